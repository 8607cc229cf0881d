"""Synthetic moving-shape clips with exact per-pixel masks.

Each clip shows one rigid shape (an axis-aligned box or a disc) translating
at constant velocity over a textured background, with the whole trajectory
kept inside the frame. The returned label volume marks exactly the rendered
foreground pixels, so segmentation targets are noise-free by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import ClipTensor

KINDS = ("box", "disc")


@dataclass(frozen=True)
class SynthSpec:
    """Geometry and appearance ranges for generated clips."""

    height: int = 64
    width: int = 64
    frames: int = 8
    channels: int = 3
    min_size: int = 10
    max_size: int = 24
    max_speed: int = 3
    noise: float = 0.05
    kinds: tuple[str, ...] = KINDS

    def validate(self) -> None:
        if min(self.height, self.width, self.frames, self.channels) < 1:
            raise ConfigError("clip dimensions must be positive")
        if not 1 <= self.min_size <= self.max_size:
            raise ConfigError("need 1 <= min_size <= max_size")
        if self.max_size > min(self.height, self.width):
            raise ConfigError("max_size larger than the frame")
        if self.max_speed < 0:
            raise ConfigError("max_speed must be nonnegative")
        if self.noise < 0:
            raise ConfigError("noise must be nonnegative")
        if not self.kinds or any(k not in KINDS for k in self.kinds):
            raise ConfigError(f"kinds must be a nonempty subset of {KINDS}")


def _velocity_and_start(rng, span: int, extent: int, frames: int, max_speed: int) -> tuple[int, int]:
    """Integer velocity and start so [start, start+extent) stays in [0, span)."""
    free = span - extent
    for _ in range(64):
        v = int(rng.integers(-max_speed, max_speed + 1))
        travel = v * (frames - 1)
        lo = max(0, -travel)
        hi = free - max(0, travel)
        if hi >= lo:
            return v, int(rng.integers(lo, hi + 1))
    return 0, int(rng.integers(0, free + 1))


def moving_shape_clip(spec: SynthSpec, rng: np.random.Generator):
    """One clip: (frames array (h, w, t, c), labels (h, w, t) in {0, 1})."""
    spec.validate()
    h, w, t, c = spec.height, spec.width, spec.frames, spec.channels
    kind = str(rng.choice(list(spec.kinds)))
    size = int(rng.integers(spec.min_size, spec.max_size + 1))
    vy, y0 = _velocity_and_start(rng, h, size, t, spec.max_speed)
    vx, x0 = _velocity_and_start(rng, w, size, t, spec.max_speed)

    # background: a smooth two-way ramp per channel, distinctly darker than
    # the foreground so the task is learnable from appearance alone
    yy = np.linspace(0.0, 1.0, h)[:, None]
    xx = np.linspace(0.0, 1.0, w)[None, :]
    back_base = rng.uniform(0.05, 0.30, size=c)
    back_tilt = rng.uniform(-0.10, 0.10, size=(2, c))
    fore_color = rng.uniform(0.65, 0.95, size=c)

    frames = np.empty((h, w, t, c))
    labels = np.zeros((h, w, t), dtype=np.int64)
    for k in range(t):
        top = y0 + vy * k
        left = x0 + vx * k
        mask = np.zeros((h, w), dtype=bool)
        if kind == "box":
            mask[top:top + size, left:left + size] = True
        else:
            r = size / 2.0
            cy = top + r - 0.5
            cx = left + r - 0.5
            ys = np.arange(h)[:, None] - cy
            xs = np.arange(w)[None, :] - cx
            mask = ys * ys + xs * xs <= r * r
        for ch in range(c):
            plane = back_base[ch] + back_tilt[0, ch] * yy + back_tilt[1, ch] * xx
            plane = np.broadcast_to(plane, (h, w)).copy()
            plane[mask] = fore_color[ch]
            frames[:, :, k, ch] = plane
        labels[:, :, k] = mask
    if spec.noise > 0:
        frames += rng.normal(scale=spec.noise, size=frames.shape)
    return frames, labels


def make_dataset(clips: int, spec: SynthSpec | None = None, seed: int = 0):
    """A seeded list of (ClipTensor, labels) pairs."""
    if clips < 1:
        raise ConfigError("need at least one clip")
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(clips):
        frames, labels = moving_shape_clip(spec, rng)
        out.append((ClipTensor(frames), labels))
    return out
