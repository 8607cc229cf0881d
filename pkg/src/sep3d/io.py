"""Clip container I/O.

Version 1 holds a single clip tensor:

    magic   4 bytes  b"VCLP"
    version u16 LE   1
    dtype   u8       1 = float64, 2 = float32
    rank    u8       4 or 5
    dims    rank x u32 LE, outermost first ((B,) H, W, T, C)
    payload dims product elements, little-endian, layout order

Version 2 extends the header with a name table and holds one named tensor
per entry (used for weight checkpoints; ranks 1..8 are allowed there):

    magic   4 bytes  b"VCLP"
    version u16 LE   2
    count   u32 LE
    count records of: name_len u16 LE, name utf-8, dtype u8, rank u8,
                      dims rank x u32 LE
    payloads concatenated in record order, little-endian float64

No compression, no alignment padding in either version.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError, ShapeError
from .tensor import MAX_DIM, ClipTensor

MAGIC = b"VCLP"
DTYPE_F64 = 1
DTYPE_F32 = 2
_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_F32: np.dtype("<f4")}


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def _check_dims(dims: tuple[int, ...]) -> None:
    for d in dims:
        if d < 1:
            raise FormatError(f"zero or negative dimension in header: {dims}")
        if d > MAX_DIM:
            raise ShapeError(f"dimension {d} does not fit the u32 header field")


def write_clip(path: str, clip: ClipTensor, dtype: str = "f64") -> None:
    """Serialize one clip to the version-1 container.

    dtype "f32" stores a narrowed copy; round trips are bit-exact only for
    the default "f64".
    """
    code = {"f64": DTYPE_F64, "f32": DTYPE_F32}.get(dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {dtype!r}")
    dims = clip.data.shape
    _check_dims(dims)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HBB", 1, code, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(np.ascontiguousarray(clip.data, dtype=_DTYPES[code]).tobytes())


def read_clip(path: str) -> ClipTensor:
    """Read a version-1 clip file; float32 payloads are widened to float64."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise FormatError(f"{path}: bad magic, not a clip file")
        version, code, rank = struct.unpack("<HBB", _read_exact(fh, 4, "header"))
        if version != 1:
            raise FormatError(f"{path}: unsupported clip version {version}")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        if rank not in (4, 5):
            raise FormatError(f"{path}: clip rank must be 4 or 5, got {rank}")
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
        _check_dims(dims)
        count = int(np.prod([int(d) for d in dims], dtype=np.int64))
        itemsize = _DTYPES[code].itemsize
        payload = _read_exact(fh, count * itemsize, "payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(dims)
    return ClipTensor._adopt(arr.astype(np.float64))


def write_weights(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Serialize named float64 arrays to the version-2 container.

    Iteration order of the dict fixes the record order, which readers
    preserve.
    """
    if not tensors:
        raise ValueError("refusing to write an empty weight file")
    records = []
    payloads = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if not 1 <= len(raw) <= 65535:
            raise ValueError(f"tensor name length out of range: {name!r}")
        a = np.ascontiguousarray(arr, dtype="<f8")
        if not 1 <= a.ndim <= 8:
            raise ShapeError(f"{name}: weight rank must be 1..8, got {a.ndim}")
        _check_dims(a.shape)
        records.append(
            struct.pack("<H", len(raw))
            + raw
            + struct.pack("<BB", DTYPE_F64, a.ndim)
            + struct.pack(f"<{a.ndim}I", *a.shape)
        )
        payloads.append(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", 2))
        fh.write(struct.pack("<I", len(records)))
        for rec in records:
            fh.write(rec)
        for buf in payloads:
            fh.write(buf)


def read_weights(path: str) -> dict[str, np.ndarray]:
    """Read a version-2 weight container back into name -> float64 array."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise FormatError(f"{path}: bad magic, not a clip container")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != 2:
            raise FormatError(f"{path}: expected weight container version 2, got {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        if count == 0:
            raise FormatError(f"{path}: weight container with zero tensors")
        metas: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2, "record header"))
            if code != DTYPE_F64:
                raise FormatError(f"{path}: weight dtype code {code} unsupported")
            if not 1 <= rank <= 8:
                raise FormatError(f"{path}: weight rank must be 1..8, got {rank}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            _check_dims(dims)
            metas.append((name, dims))
        out: dict[str, np.ndarray] = {}
        for name, dims in metas:
            if name in out:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            count_el = int(np.prod([int(d) for d in dims], dtype=np.int64))
            payload = _read_exact(fh, count_el * 8, f"payload of {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payloads")
    return out
