"""Seeded training loop: Adam updates, decayed learning rate, clip augmentation.

The loop is deterministic end to end — a fixed seed fixes the augmentation
draws and the update order, so two runs produce bitwise-identical weights.
Training operates on a list of (clip, labels) pairs, one optimizer step per
clip, with per-pixel softmax cross-entropy as the objective.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import ConfigError, ShapeError
from .network import SegmentationNetwork, TrainConfig, validate_train_config
from .tensor import ClipTensor

Sample = tuple[ClipTensor, np.ndarray]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    steps: int = 0


def init_adam(weights: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(arr) for name, arr in weights.items()},
        v={name: np.zeros_like(arr) for name, arr in weights.items()},
    )


def adam_step(
    weights: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place, over every parameter."""
    if set(grads) != set(weights):
        raise ShapeError("gradient names do not match the parameter names")
    state.steps += 1
    t = state.steps
    for name, arr in weights.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * (g * g)
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        arr -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Stepwise-decayed rate: lr0 * decay^(epoch // every)."""
    return cfg.learning_rate * cfg.decay_rate ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------------------
# augmentation


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-aligned nearest source index for each output position."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out)
    return np.clip(np.floor(src), 0, n_in - 1).astype(np.int64)


def _scale_spatial(frames: np.ndarray, labels: np.ndarray, scale: float):
    h, w = frames.shape[:2]
    nh = max(1, round(h * scale))
    nw = max(1, round(w * scale))
    if (nh, nw) == (h, w):
        return frames, labels
    scaled = K.resize_trilinear(
        ClipTensor(frames), (nh, nw, frames.shape[2])
    ).data
    lab = labels[np.ix_(_nearest_index(h, nh), _nearest_index(w, nw))]
    return scaled, lab


def _fit_square(frames: np.ndarray, labels: np.ndarray, side: int, rng) -> tuple:
    """Random-crop or zero-pad the spatial axes to side x side."""
    h, w = frames.shape[:2]
    if h > side:
        top = int(rng.integers(0, h - side + 1))
        frames = frames[top:top + side]
        labels = labels[top:top + side]
    elif h < side:
        pad = side - h
        frames = np.pad(frames, ((0, pad), (0, 0), (0, 0), (0, 0)))
        labels = np.pad(labels, ((0, pad), (0, 0), (0, 0)))
    h, w = frames.shape[:2]
    if w > side:
        left = int(rng.integers(0, w - side + 1))
        frames = frames[:, left:left + side]
        labels = labels[:, left:left + side]
    elif w < side:
        pad = side - w
        frames = np.pad(frames, ((0, 0), (0, pad), (0, 0), (0, 0)))
        labels = np.pad(labels, ((0, 0), (0, pad), (0, 0)))
    return frames, labels


def augment(
    clip: ClipTensor, labels: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One random training view: scale jitter, horizontal flip, square fit,
    temporal window. Frames are resampled trilinearly, labels by nearest
    neighbour so they stay crisp class indices."""
    frames = clip.data
    lab = np.asarray(labels)
    if lab.shape != frames.shape[:3]:
        raise ShapeError(f"labels {lab.shape} do not match clip dims {frames.shape[:3]}")
    lo, hi = cfg.scale_jitter
    if (lo, hi) != (1.0, 1.0):
        frames, lab = _scale_spatial(frames, lab, float(rng.uniform(lo, hi)))
    if cfg.horizontal_flip and rng.random() < 0.5:
        frames = frames[:, ::-1]
        lab = lab[:, ::-1]
    frames, lab = _fit_square(frames, lab, cfg.crop, rng)
    t = frames.shape[2]
    if t < cfg.clip_length:
        raise ConfigError(
            f"clip has {t} frames, fewer than the configured length {cfg.clip_length}"
        )
    if t > cfg.clip_length:
        start = int(rng.integers(0, t - cfg.clip_length + 1))
        frames = frames[:, :, start:start + cfg.clip_length]
        lab = lab[:, :, start:start + cfg.clip_length]
    return np.ascontiguousarray(frames), np.ascontiguousarray(lab)


# ---------------------------------------------------------------------------
# evaluation


def foreground_iou(pred: np.ndarray, labels: np.ndarray) -> float:
    """Intersection over union of the nonzero class; 1.0 when both empty."""
    p = pred != 0
    g = labels != 0
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass(frozen=True)
class EvalStats:
    loss: float
    accuracy: float
    iou: float


def evaluate(net: SegmentationNetwork, dataset: list[Sample]) -> EvalStats:
    """Mean loss / pixel accuracy / foreground IoU over un-augmented clips."""
    if not dataset:
        raise ConfigError("cannot evaluate on an empty dataset")
    losses = []
    correct = 0
    total = 0
    ious = []
    for clip, labels in dataset:
        logits = net.forward(clip)
        loss, _ = K.softmax_ce_loss(logits, labels)
        losses.append(loss)
        pred = np.argmax(logits.data, axis=-1)
        correct += int((pred == labels).sum())
        total += labels.size
        ious.append(foreground_iou(pred, labels))
    return EvalStats(
        loss=float(np.mean(losses)),
        accuracy=correct / total,
        iou=float(np.mean(ious)),
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    learning_rate: float
    train_loss: float
    eval_loss: float
    accuracy: float
    iou: float
    seconds: float


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    reached_targets: bool = False


def train(
    net: SegmentationNetwork,
    dataset: list[Sample],
    cfg: TrainConfig,
    seed: int = 0,
    target_accuracy: float | None = None,
    target_iou: float | None = None,
    log=None,
) -> TrainResult:
    """Run up to cfg.epochs passes; one Adam step per clip in fixed order.

    Stops early once BOTH targets (when given) are met by the end-of-epoch
    evaluation. `log`, when provided, receives one EpochStats per epoch.
    """
    validate_train_config(cfg)
    if not dataset:
        raise ConfigError("cannot train on an empty dataset")
    weights = net.parameters()
    state = init_adam(weights)
    rng = np.random.default_rng(seed)
    result = TrainResult()
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = learning_rate(cfg, epoch)
        epoch_losses = []
        for clip, labels in dataset:
            frames, lab = augment(clip, labels, cfg, rng)
            logits, cache = net.forward(ClipTensor(frames), keep_cache=True)
            loss, dlogits = K.softmax_ce_loss(logits, lab)
            grads, _ = net.backward(dlogits, cache)
            adam_step(weights, grads, state, lr)
            epoch_losses.append(loss)
        stats = evaluate(net, dataset)
        entry = EpochStats(
            epoch=epoch,
            learning_rate=lr,
            train_loss=float(np.mean(epoch_losses)),
            eval_loss=stats.loss,
            accuracy=stats.accuracy,
            iou=stats.iou,
            seconds=time.perf_counter() - started,
        )
        result.history.append(entry)
        if log is not None:
            log(entry)
        hit_acc = target_accuracy is None or stats.accuracy > target_accuracy
        hit_iou = target_iou is None or stats.iou > target_iou
        if (target_accuracy is not None or target_iou is not None) and hit_acc and hit_iou:
            result.reached_targets = True
            break
    return result
