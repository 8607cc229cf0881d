"""Core clip tensor type.

A clip is a dense float64 array laid out as (H, W, T, C) with an optional
outermost batch axis B, row-major. Element (h, w, t, c) of a rank-4 clip
therefore lives at flat offset ((h * W + w) * T + t) * C + c.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

# Dims must fit a u32 in the on-disk header; keep in-memory limits identical.
MAX_DIM = 2**32 - 1
# Product cap so byte counts stay well inside int64.
MAX_ELEMENTS = 2**53


@dataclass(frozen=True)
class TensorShape:
    """Logical clip dimensions; batch is None for rank-4 tensors."""

    h: int
    w: int
    t: int
    c: int
    b: int | None = None

    def __post_init__(self) -> None:
        dims = [self.h, self.w, self.t, self.c]
        if self.b is not None:
            dims.append(self.b)
        for d in dims:
            if not isinstance(d, (int, np.integer)) or d < 1:
                raise ShapeError(f"dimensions must be positive integers, got {self}")
            if d > MAX_DIM:
                raise ShapeError(f"dimension {d} exceeds the u32 limit")
        if self.num_elements() > MAX_ELEMENTS:
            raise ShapeError(f"element count overflows safe limits: {self}")

    def num_elements(self) -> int:
        n = self.h * self.w * self.t * self.c
        return n * self.b if self.b is not None else n

    def as_tuple(self) -> tuple[int, ...]:
        if self.b is not None:
            return (self.b, self.h, self.w, self.t, self.c)
        return (self.h, self.w, self.t, self.c)

    @staticmethod
    def from_tuple(dims: tuple[int, ...]) -> "TensorShape":
        if len(dims) == 4:
            return TensorShape(h=dims[0], w=dims[1], t=dims[2], c=dims[3])
        if len(dims) == 5:
            return TensorShape(b=dims[0], h=dims[1], w=dims[2], t=dims[3], c=dims[4])
        raise ShapeError(f"clip tensors are rank 4 or 5, got rank {len(dims)}")


class ClipTensor:
    """Immutable float64 clip; the value type all kernels consume and produce."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray, validate: bool = True) -> None:
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr is data or (isinstance(data, np.ndarray) and np.shares_memory(arr, data)):
            # Never alias caller memory: freezing it would be a side effect,
            # and later caller writes would break immutability.
            arr = arr.copy()
        if arr.ndim not in (4, 5):
            raise ShapeError(f"clip tensors are rank 4 or 5, got rank {arr.ndim}")
        TensorShape.from_tuple(arr.shape)
        if validate and not np.all(np.isfinite(arr)):
            raise ValueError("clip tensor holds non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def _adopt(cls, arr: np.ndarray) -> "ClipTensor":
        """Zero-copy wrap of a freshly allocated array the caller yields.

        Internal fast path for kernel outputs; the array (or its base) must
        not be written through any other reference afterwards.
        """
        if arr.dtype != np.float64 or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.ndim not in (4, 5):
            raise ShapeError(f"clip tensors are rank 4 or 5, got rank {arr.ndim}")
        TensorShape.from_tuple(arr.shape)
        if arr.flags.writeable:
            arr.flags.writeable = False
        self = object.__new__(cls)
        object.__setattr__(self, "data", arr)
        return self

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("ClipTensor is immutable")

    @property
    def shape(self) -> TensorShape:
        return TensorShape.from_tuple(self.data.shape)

    @property
    def rank(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"ClipTensor{self.data.shape}"


def new_filled(shape: TensorShape, value: float) -> ClipTensor:
    """Allocate a clip of the given shape with every element set to value."""
    if not np.isfinite(value):
        raise ValueError(f"fill value must be finite, got {value}")
    return ClipTensor._adopt(np.full(shape.as_tuple(), value, dtype=np.float64))


def concat_channels(parts: list[ClipTensor]) -> ClipTensor:
    """Concatenate clips along the channel axis; all other dims must agree."""
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    lead = parts[0].data.shape[:-1]
    rank = parts[0].rank
    for p in parts[1:]:
        if p.rank != rank or p.data.shape[:-1] != lead:
            raise ShapeError(
                f"channel concat needs matching leading dims, got {p.data.shape} vs {parts[0].data.shape}"
            )
    if len(parts) == 1:
        return ClipTensor._adopt(parts[0].data.copy())
    return ClipTensor._adopt(np.concatenate([p.data for p in parts], axis=-1))


def max_abs_diff(a: ClipTensor, b: ClipTensor) -> float:
    """L-infinity distance between two clips of identical shape."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    return float(np.max(np.abs(a.data - b.data))) if a.data.size else 0.0
