"""Convolution variants and supporting operators on clip tensors.

Every forward kernel here consumes and produces ``ClipTensor`` values and
has a companion ``*_backward`` returning analytic gradients. Convolutions
share one geometry convention: zero same-padding by default (valid padding
available), taps of a dilated kernel centered at floor(((K-1)*dilation)/2)
per axis, and a fixed tap-major summation order so results do not depend on
execution environment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import counting
from .errors import ShapeError
from .tensor import ClipTensor

# ---------------------------------------------------------------------------
# specs and containers


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: kernel, channels, dilation, stride."""

    kernel: tuple[int, int, int]
    channels_in: int
    channels_out: int
    spatial_dilation: int = 1
    temporal_dilation: int = 1
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: str = "same"

    def __post_init__(self) -> None:
        if len(self.kernel) != 3 or any(k < 1 for k in self.kernel):
            raise ShapeError(f"kernel dims must be positive, got {self.kernel}")
        if self.channels_in < 1 or self.channels_out < 1:
            raise ShapeError("channel counts must be positive")
        if self.spatial_dilation < 1 or self.temporal_dilation < 1:
            raise ShapeError("dilation rates must be >= 1")
        if len(self.stride) != 3 or any(s < 1 for s in self.stride):
            raise ShapeError(f"strides must be positive, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def dilation(self) -> tuple[int, int, int]:
        # The spatial rate applies to h and w identically.
        return (self.spatial_dilation, self.spatial_dilation, self.temporal_dilation)

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple((k - 1) * g + 1 for k, g in zip(self.kernel, self.dilation))


@dataclass
class WeightSet:
    """Weight arrays for one convolution; exactly one variant populated.

    standard     (Kh, Kw, Kt, M, N)
    channelwise  (Kh, Kw, Kt, M)
    pointwise    (M, N)
    spatial + temporal   (Kh, Kw, 1, M, Mp) and (1, 1, Kt, Mp, N)
    bias         (N,), optional where the variant admits one
    """

    standard: np.ndarray | None = None
    channelwise: np.ndarray | None = None
    pointwise: np.ndarray | None = None
    spatial: np.ndarray | None = None
    temporal: np.ndarray | None = None
    bias: np.ndarray | None = None

    def kind(self) -> str:
        have = {
            name
            for name in ("standard", "channelwise", "pointwise", "spatial", "temporal")
            if getattr(self, name) is not None
        }
        if have == {"standard"}:
            return "standard"
        if have == {"channelwise"}:
            return "channelwise"
        if have == {"pointwise"}:
            return "pointwise"
        if have == {"channelwise", "pointwise"}:
            return "separable"
        if have == {"spatial", "temporal"}:
            return "r2plus1d"
        raise ShapeError(f"weight set does not describe a single variant: {sorted(have)}")

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("standard", "channelwise", "pointwise", "spatial", "temporal", "bias"):
            arr = getattr(self, name)
            if arr is not None:
                out[name] = arr
        return out


@dataclass
class GradBundle:
    """Gradients of one kernel call: input grad plus per-array weight grads."""

    input: np.ndarray
    weights: WeightSet = field(default_factory=WeightSet)


# ---------------------------------------------------------------------------
# shared geometry helpers


def _nd5(x: ClipTensor | np.ndarray) -> tuple[np.ndarray, bool]:
    arr = x.data if isinstance(x, ClipTensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 4:
        return arr[None], False
    if arr.ndim == 5:
        return arr, True
    raise ShapeError(f"expected rank 4 or 5, got rank {arr.ndim}")


def _wrap(arr: np.ndarray, batched: bool) -> ClipTensor:
    return ClipTensor._adopt(arr if batched else arr[0])


def _unwrap(arr: np.ndarray, batched: bool) -> np.ndarray:
    return arr if batched else arr[0]


def _axis_geometry(n: int, k: int, dilation: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Output length plus (lo, hi) zero padding for one axis."""
    ext = (k - 1) * dilation + 1
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + ext - n, 0)
        lo = total // 2
        return out, lo, total - lo
    if ext > n:
        raise ShapeError(f"kernel extent {ext} exceeds input length {n} under valid padding")
    return (n - ext) // stride + 1, 0, 0


def _conv_geometry(shape5: tuple[int, ...], spec: ConvSpec):
    if shape5[4] != spec.channels_in:
        raise ShapeError(f"input has {shape5[4]} channels, spec expects {spec.channels_in}")
    geo = [
        _axis_geometry(shape5[1 + a], spec.kernel[a], spec.dilation[a], spec.stride[a], spec.padding)
        for a in range(3)
    ]
    out_dims = tuple(g[0] for g in geo)
    pads = tuple((g[1], g[2]) for g in geo)
    return out_dims, pads


def _pad5(arr: np.ndarray, pads) -> np.ndarray:
    if all(lo == 0 and hi == 0 for lo, hi in pads):
        return arr
    return np.pad(arr, ((0, 0), pads[0], pads[1], pads[2], (0, 0)))


def _tap_slice(pads, spec: ConvSpec, out_dims, i: int, j: int, k: int):
    sh, sw, st = spec.stride
    gh, gw, gt = spec.dilation
    return (
        slice(None),
        slice(i * gh, i * gh + (out_dims[0] - 1) * sh + 1, sh),
        slice(j * gw, j * gw + (out_dims[1] - 1) * sw + 1, sw),
        slice(k * gt, k * gt + (out_dims[2] - 1) * st + 1, st),
        slice(None),
    )


def _interior_tap_counts(n: int, k: int, dilation: int, stride: int, out: int, lo: int) -> list[int]:
    """Per tap index, how many output positions read real (unpadded) input."""
    counts = []
    for i in range(k):
        off = i * dilation - lo
        o_min = max(0, -(off // stride))
        o_max = min(out - 1, (n - 1 - off) // stride)
        counts.append(max(0, o_max - o_min + 1))
    return counts


def _interior_site_total(shape5, spec: ConvSpec, out_dims, pads) -> int:
    per_axis = [
        sum(
            _interior_tap_counts(
                shape5[1 + a], spec.kernel[a], spec.dilation[a], spec.stride[a], out_dims[a], pads[a][0]
            )
        )
        for a in range(3)
    ]
    return shape5[0] * per_axis[0] * per_axis[1] * per_axis[2]


def _check_weight(name: str, arr: np.ndarray | None, shape: tuple[int, ...]) -> np.ndarray:
    if arr is None:
        raise ShapeError(f"weight set is missing the {name!r} array")
    if arr.shape != shape:
        raise ShapeError(f"{name} weights have shape {arr.shape}, expected {shape}")
    return np.asarray(arr, dtype=np.float64)


def _check_bias(bias: np.ndarray | None, n: int) -> np.ndarray | None:
    if bias is None:
        return None
    if bias.shape != (n,):
        raise ShapeError(f"bias has shape {bias.shape}, expected ({n},)")
    return np.asarray(bias, dtype=np.float64)


# ---------------------------------------------------------------------------
# standard dense 3D convolution


def _conv_standard_nd(arr: np.ndarray, kern: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    out_dims, pads = _conv_geometry(arr.shape, spec)
    kh, kw, kt = spec.kernel
    m, n = spec.channels_in, spec.channels_out
    xp = _pad5(arr, pads)
    b = arr.shape[0]
    sites = b * out_dims[0] * out_dims[1] * out_dims[2]
    out = np.zeros((b, *out_dims, n))
    for i in range(kh):
        for j in range(kw):
            for k in range(kt):
                sl = xp[_tap_slice(pads, spec, out_dims, i, j, k)]
                out += np.tensordot(sl, kern[i, j, k], axes=([4], [0]))
    counting.record(
        sites * m * n * kh * kw * kt,
        _interior_site_total(arr.shape, spec, out_dims, pads) * m * n,
    )
    if bias is not None:
        out += bias
    return out


def conv3d_standard(x: ClipTensor, w: WeightSet, spec: ConvSpec) -> ClipTensor:
    """Dense 3D convolution over (h, w, t) with full channel mixing."""
    arr, batched = _nd5(x)
    kern = _check_weight("standard", w.standard, (*spec.kernel, spec.channels_in, spec.channels_out))
    bias = _check_bias(w.bias, spec.channels_out)
    return _wrap(_conv_standard_nd(arr, kern, bias, spec), batched)


def _conv_standard_backward_nd(up: np.ndarray, arr: np.ndarray, kern: np.ndarray, spec: ConvSpec, want_bias: bool):
    out_dims, pads = _conv_geometry(arr.shape, spec)
    kh, kw, kt = spec.kernel
    if up.shape != (arr.shape[0], *out_dims, spec.channels_out):
        raise ShapeError(f"upstream shape {up.shape} does not match forward output")
    xp = _pad5(arr, pads)
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kern)
    for i in range(kh):
        for j in range(kw):
            for k in range(kt):
                sl_idx = _tap_slice(pads, spec, out_dims, i, j, k)
                dk[i, j, k] = np.tensordot(xp[sl_idx], up, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
                dxp[sl_idx] += np.tensordot(up, kern[i, j, k], axes=([4], [1]))
    _, h, w_, t, _ = arr.shape
    dx = dxp[:, pads[0][0] : pads[0][0] + h, pads[1][0] : pads[1][0] + w_, pads[2][0] : pads[2][0] + t, :]
    db = up.sum(axis=(0, 1, 2, 3)) if want_bias else None
    return np.ascontiguousarray(dx), dk, db


def conv3d_standard_backward(
    upstream: ClipTensor | np.ndarray, x: ClipTensor, w: WeightSet, spec: ConvSpec
) -> GradBundle:
    arr, batched = _nd5(x)
    up, _ = _nd5(upstream)
    kern = _check_weight("standard", w.standard, (*spec.kernel, spec.channels_in, spec.channels_out))
    dx, dk, db = _conv_standard_backward_nd(up, arr, kern, spec, w.bias is not None)
    return GradBundle(input=_unwrap(dx, batched), weights=WeightSet(standard=dk, bias=db))


# ---------------------------------------------------------------------------
# channel-wise (depthwise) 3D convolution, the dilated workhorse


def _conv_channelwise_nd(arr: np.ndarray, kern: np.ndarray, spec: ConvSpec) -> np.ndarray:
    out_dims, pads = _conv_geometry(arr.shape, spec)
    kh, kw, kt = spec.kernel
    m = spec.channels_in
    xp = _pad5(arr, pads)
    b = arr.shape[0]
    sites = b * out_dims[0] * out_dims[1] * out_dims[2]
    out = np.zeros((b, *out_dims, m))
    for i in range(kh):
        for j in range(kw):
            for k in range(kt):
                out += xp[_tap_slice(pads, spec, out_dims, i, j, k)] * kern[i, j, k]
    counting.record(
        sites * m * kh * kw * kt,
        _interior_site_total(arr.shape, spec, out_dims, pads) * m,
    )
    return out


def conv3d_channelwise(x: ClipTensor, w: WeightSet, spec: ConvSpec) -> ClipTensor:
    """Per-channel 3D convolution; channel m sees only input channel m."""
    if spec.channels_out != spec.channels_in:
        raise ShapeError("channel-wise convolution preserves the channel count")
    if w.bias is not None:
        raise ShapeError("channel-wise convolution carries no bias")
    arr, batched = _nd5(x)
    kern = _check_weight("channelwise", w.channelwise, (*spec.kernel, spec.channels_in))
    return _wrap(_conv_channelwise_nd(arr, kern, spec), batched)


def _conv_channelwise_backward_nd(up: np.ndarray, arr: np.ndarray, kern: np.ndarray, spec: ConvSpec):
    out_dims, pads = _conv_geometry(arr.shape, spec)
    kh, kw, kt = spec.kernel
    if up.shape != (arr.shape[0], *out_dims, spec.channels_in):
        raise ShapeError(f"upstream shape {up.shape} does not match forward output")
    xp = _pad5(arr, pads)
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kern)
    for i in range(kh):
        for j in range(kw):
            for k in range(kt):
                sl_idx = _tap_slice(pads, spec, out_dims, i, j, k)
                dk[i, j, k] = (xp[sl_idx] * up).sum(axis=(0, 1, 2, 3))
                dxp[sl_idx] += up * kern[i, j, k]
    _, h, w_, t, _ = arr.shape
    dx = dxp[:, pads[0][0] : pads[0][0] + h, pads[1][0] : pads[1][0] + w_, pads[2][0] : pads[2][0] + t, :]
    return np.ascontiguousarray(dx), dk


def conv3d_channelwise_backward(
    upstream: ClipTensor | np.ndarray, x: ClipTensor, w: WeightSet, spec: ConvSpec
) -> GradBundle:
    arr, batched = _nd5(x)
    up, _ = _nd5(upstream)
    kern = _check_weight("channelwise", w.channelwise, (*spec.kernel, spec.channels_in))
    dx, dk = _conv_channelwise_backward_nd(up, arr, kern, spec)
    return GradBundle(input=_unwrap(dx, batched), weights=WeightSet(channelwise=dk))


# ---------------------------------------------------------------------------
# point-wise (1x1x1) convolution


def _require_pointwise_spec(spec: ConvSpec) -> None:
    if spec.kernel != (1, 1, 1) or spec.stride != (1, 1, 1):
        raise ShapeError("point-wise convolution requires kernel (1,1,1) and unit stride")


def _conv_pointwise_nd(arr: np.ndarray, kern: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    m, n = kern.shape
    flat = arr.reshape(-1, m)
    out = flat @ kern
    counting.record(flat.shape[0] * m * n)
    if bias is not None:
        out = out + bias
    return out.reshape(*arr.shape[:4], n)


def conv3d_pointwise(x: ClipTensor, w: WeightSet, spec: ConvSpec) -> ClipTensor:
    """1x1x1 convolution: an (M -> N) linear map applied at every site."""
    _require_pointwise_spec(spec)
    arr, batched = _nd5(x)
    kern = _check_weight("pointwise", w.pointwise, (spec.channels_in, spec.channels_out))
    if arr.shape[4] != spec.channels_in:
        raise ShapeError(f"input has {arr.shape[4]} channels, spec expects {spec.channels_in}")
    bias = _check_bias(w.bias, spec.channels_out)
    return _wrap(_conv_pointwise_nd(arr, kern, bias), batched)


def conv3d_pointwise_backward(
    upstream: ClipTensor | np.ndarray, x: ClipTensor, w: WeightSet, spec: ConvSpec
) -> GradBundle:
    _require_pointwise_spec(spec)
    arr, batched = _nd5(x)
    up, _ = _nd5(upstream)
    kern = _check_weight("pointwise", w.pointwise, (spec.channels_in, spec.channels_out))
    if up.shape != (*arr.shape[:4], spec.channels_out):
        raise ShapeError(f"upstream shape {up.shape} does not match forward output")
    flat_x = arr.reshape(-1, spec.channels_in)
    flat_up = up.reshape(-1, spec.channels_out)
    dk = flat_x.T @ flat_up
    dx = (flat_up @ kern.T).reshape(arr.shape)
    db = flat_up.sum(axis=0) if w.bias is not None else None
    return GradBundle(input=_unwrap(dx, batched), weights=WeightSet(pointwise=dk, bias=db))


# ---------------------------------------------------------------------------
# separable = channel-wise followed by point-wise


def conv3d_separable(x: ClipTensor, w: WeightSet, spec: ConvSpec) -> ClipTensor:
    """Factored convolution: per-channel spatio-temporal filter, then channel mix."""
    arr, batched = _nd5(x)
    kern_cw = _check_weight("channelwise", w.channelwise, (*spec.kernel, spec.channels_in))
    kern_pw = _check_weight("pointwise", w.pointwise, (spec.channels_in, spec.channels_out))
    bias = _check_bias(w.bias, spec.channels_out)
    mid = _conv_channelwise_nd(arr, kern_cw, spec)
    return _wrap(_conv_pointwise_nd(mid, kern_pw, bias), batched)


def conv3d_separable_backward(
    upstream: ClipTensor | np.ndarray, x: ClipTensor, w: WeightSet, spec: ConvSpec
) -> GradBundle:
    arr, batched = _nd5(x)
    up, _ = _nd5(upstream)
    kern_cw = _check_weight("channelwise", w.channelwise, (*spec.kernel, spec.channels_in))
    kern_pw = _check_weight("pointwise", w.pointwise, (spec.channels_in, spec.channels_out))
    if up.shape[4] != spec.channels_out:
        raise ShapeError(f"upstream has {up.shape[4]} channels, spec expects {spec.channels_out}")
    # Recompute the intermediate feature map instead of caching it.
    mid = _conv_channelwise_nd(arr, kern_cw, spec)
    flat_mid = mid.reshape(-1, spec.channels_in)
    flat_up = up.reshape(-1, spec.channels_out)
    dk_pw = flat_mid.T @ flat_up
    d_mid = (flat_up @ kern_pw.T).reshape(mid.shape)
    db = flat_up.sum(axis=0) if w.bias is not None else None
    dx, dk_cw = _conv_channelwise_backward_nd(d_mid, arr, kern_cw, spec)
    return GradBundle(
        input=_unwrap(dx, batched),
        weights=WeightSet(channelwise=dk_cw, pointwise=dk_pw, bias=db),
    )


# ---------------------------------------------------------------------------
# spatial-then-temporal factored convolution


def m_prime(spec: ConvSpec) -> int:
    """Intermediate width that keeps the factored form at parameter parity.

    Rounds half up and never drops below 1.
    """
    kh, kw, kt = spec.kernel
    m, n = spec.channels_in, spec.channels_out
    num = m * n * kt * kh * kw
    den = n * kt + m * kh * kw
    return max(1, (2 * num + den) // (2 * den))


def _r2plus1d_factor_specs(spec: ConvSpec, mp: int) -> tuple[ConvSpec, ConvSpec]:
    kh, kw, kt = spec.kernel
    sh, sw, st = spec.stride
    spatial = ConvSpec(
        kernel=(kh, kw, 1),
        channels_in=spec.channels_in,
        channels_out=mp,
        spatial_dilation=spec.spatial_dilation,
        temporal_dilation=1,
        stride=(sh, sw, 1),
        padding=spec.padding,
    )
    temporal = ConvSpec(
        kernel=(1, 1, kt),
        channels_in=mp,
        channels_out=spec.channels_out,
        spatial_dilation=1,
        temporal_dilation=spec.temporal_dilation,
        stride=(1, 1, st),
        padding=spec.padding,
    )
    return spatial, temporal


def conv_r2plus1d(x: ClipTensor, w: WeightSet, spec: ConvSpec) -> ClipTensor:
    """(Kh x Kw x 1) spatial convolution into Mp channels, then (1 x 1 x Kt)."""
    arr, batched = _nd5(x)
    if w.spatial is None or w.spatial.ndim != 5:
        raise ShapeError("r2plus1d weights need a rank-5 'spatial' array")
    mp = w.spatial.shape[4]
    sp_spec, tm_spec = _r2plus1d_factor_specs(spec, mp)
    kern_sp = _check_weight("spatial", w.spatial, (*sp_spec.kernel, spec.channels_in, mp))
    kern_tm = _check_weight("temporal", w.temporal, (*tm_spec.kernel, mp, spec.channels_out))
    bias = _check_bias(w.bias, spec.channels_out)
    mid = _conv_standard_nd(arr, kern_sp, None, sp_spec)
    return _wrap(_conv_standard_nd(mid, kern_tm, bias, tm_spec), batched)


def conv_r2plus1d_backward(
    upstream: ClipTensor | np.ndarray, x: ClipTensor, w: WeightSet, spec: ConvSpec
) -> GradBundle:
    arr, batched = _nd5(x)
    up, _ = _nd5(upstream)
    if w.spatial is None or w.spatial.ndim != 5:
        raise ShapeError("r2plus1d weights need a rank-5 'spatial' array")
    mp = w.spatial.shape[4]
    sp_spec, tm_spec = _r2plus1d_factor_specs(spec, mp)
    kern_sp = _check_weight("spatial", w.spatial, (*sp_spec.kernel, spec.channels_in, mp))
    kern_tm = _check_weight("temporal", w.temporal, (*tm_spec.kernel, mp, spec.channels_out))
    mid = _conv_standard_nd(arr, kern_sp, None, sp_spec)
    d_mid, dk_tm, db = _conv_standard_backward_nd(up, mid, kern_tm, tm_spec, w.bias is not None)
    dx, dk_sp, _ = _conv_standard_backward_nd(d_mid, arr, kern_sp, sp_spec, False)
    return GradBundle(
        input=_unwrap(dx, batched),
        weights=WeightSet(spatial=dk_sp, temporal=dk_tm, bias=db),
    )


# ---------------------------------------------------------------------------
# trilinear interpolation (integer upsampling plus general resize)


def _axis_interp_geometry(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src)
    frac = src - base
    i0 = np.clip(base, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(base + 1, 0, n_in - 1).astype(np.int64)
    return i0, i1, frac


def _axis_interp_nd(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_out == n_in:
        return arr
    i0, i1, frac = _axis_interp_geometry(n_in, n_out)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    w1 = frac.reshape(shape)
    out = np.take(arr, i0, axis=axis) * (1.0 - w1) + np.take(arr, i1, axis=axis) * w1
    counting.record(2 * out.size)
    return out


def _axis_interp_backward_nd(up: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    n_out = up.shape[axis]
    if n_out == n_in:
        return up
    i0, i1, frac = _axis_interp_geometry(n_in, n_out)
    shape = [1] * up.ndim
    shape[axis] = n_out
    w1 = frac.reshape(shape)
    g_shape = list(up.shape)
    g_shape[axis] = n_in
    grad = np.zeros(g_shape)
    gm = np.moveaxis(grad, axis, 0)
    np.add.at(gm, i0, np.moveaxis(up * (1.0 - w1), axis, 0))
    np.add.at(gm, i1, np.moveaxis(up * w1, axis, 0))
    return grad


def resize_trilinear(x: ClipTensor, out_dims: tuple[int, int, int]) -> ClipTensor:
    """Resize (h, w, t) to arbitrary positive dims, half-pixel-aligned corners."""
    arr, batched = _nd5(x)
    if len(out_dims) != 3 or any(d < 1 for d in out_dims):
        raise ShapeError(f"output dims must be three positive integers, got {out_dims}")
    for axis, n_out in zip((1, 2, 3), out_dims):
        arr = _axis_interp_nd(arr, axis, n_out)
    return _wrap(arr, batched)


def resize_trilinear_backward(
    upstream: ClipTensor | np.ndarray, x: ClipTensor, out_dims: tuple[int, int, int]
) -> GradBundle:
    """Transpose of resize_trilinear applied to the upstream gradient."""
    arr, batched = _nd5(x)
    up, _ = _nd5(upstream)
    expect = (arr.shape[0], *out_dims, arr.shape[4])
    if up.shape != expect:
        raise ShapeError(f"upstream shape {up.shape} does not match resized dims {expect}")
    grad = up
    for axis in (3, 2, 1):
        grad = _axis_interp_backward_nd(grad, axis, arr.shape[axis])
    return GradBundle(input=_unwrap(grad, batched))


def _check_scale(scale: tuple[int, int, int]) -> None:
    if len(scale) != 3 or any((not isinstance(s, (int, np.integer))) or s < 1 for s in scale):
        raise ShapeError(f"upsample scale must be three integers >= 1, got {scale}")


def trilinear_upsample(x: ClipTensor, scale: tuple[int, int, int]) -> ClipTensor:
    """Integer-factor trilinear upsampling of the (h, w, t) axes."""
    _check_scale(scale)
    arr, _ = _nd5(x)
    dims = tuple(arr.shape[1 + a] * scale[a] for a in range(3))
    return resize_trilinear(x, dims)


def trilinear_upsample_backward(
    upstream: ClipTensor | np.ndarray, x: ClipTensor, scale: tuple[int, int, int]
) -> GradBundle:
    """Transpose of the upsampling operator applied to the upstream gradient."""
    _check_scale(scale)
    arr, batched = _nd5(x)
    up, _ = _nd5(upstream)
    expect = (arr.shape[0],) + tuple(arr.shape[1 + a] * scale[a] for a in range(3)) + (arr.shape[4],)
    if up.shape != expect:
        raise ShapeError(f"upstream shape {up.shape} does not match upsampled dims {expect}")
    grad = up
    for axis in (3, 2, 1):
        grad = _axis_interp_backward_nd(grad, axis, arr.shape[axis])
    return GradBundle(input=_unwrap(grad, batched))


# ---------------------------------------------------------------------------
# full-frame spatial pooling and its broadcast inverse


def avg_pool_spatial_full(x: ClipTensor) -> ClipTensor:
    """Mean over all of (h, w) per (t, c), keeping singleton spatial dims."""
    arr, batched = _nd5(x)
    out = arr.mean(axis=(1, 2), keepdims=True)
    counting.record(arr.size)
    return _wrap(out, batched)


def avg_pool_spatial_full_backward(upstream: ClipTensor | np.ndarray, x: ClipTensor) -> GradBundle:
    arr, batched = _nd5(x)
    up, _ = _nd5(upstream)
    if up.shape != (arr.shape[0], 1, 1, arr.shape[3], arr.shape[4]):
        raise ShapeError(f"upstream shape {up.shape} does not match pooled dims")
    h, w = arr.shape[1], arr.shape[2]
    grad = np.broadcast_to(up / (h * w), arr.shape).copy()
    return GradBundle(input=_unwrap(grad, batched))


def broadcast_spatial(x: ClipTensor, h: int, w: int) -> ClipTensor:
    """Tile a spatially pooled tensor back to (h, w); exact copies per site."""
    arr, batched = _nd5(x)
    if arr.shape[1] != 1 or arr.shape[2] != 1:
        raise ShapeError(f"broadcast source must have singleton spatial dims, got {arr.shape}")
    if h < 1 or w < 1:
        raise ShapeError("broadcast target dims must be positive")
    out = np.broadcast_to(arr, (arr.shape[0], h, w, arr.shape[3], arr.shape[4])).copy()
    return _wrap(out, batched)


def broadcast_spatial_backward(upstream: ClipTensor | np.ndarray, x: ClipTensor) -> GradBundle:
    arr, batched = _nd5(x)
    up, _ = _nd5(upstream)
    if up.shape[0] != arr.shape[0] or up.shape[3:] != arr.shape[3:]:
        raise ShapeError(f"upstream shape {up.shape} incompatible with broadcast source {arr.shape}")
    grad = up.sum(axis=(1, 2), keepdims=True)
    return GradBundle(input=_unwrap(grad, batched))


# ---------------------------------------------------------------------------
# rectifier


def relu(x: ClipTensor) -> ClipTensor:
    arr, batched = _nd5(x)
    return _wrap(np.maximum(arr, 0.0), batched)


def relu_backward(upstream: ClipTensor | np.ndarray, x: ClipTensor) -> GradBundle:
    """Subgradient convention: zero at exactly zero input."""
    arr, batched = _nd5(x)
    up, _ = _nd5(upstream)
    if up.shape != arr.shape:
        raise ShapeError(f"upstream shape {up.shape} does not match input {arr.shape}")
    return GradBundle(input=_unwrap(up * (arr > 0.0), batched))


# ---------------------------------------------------------------------------
# pixel-wise softmax cross-entropy


def softmax_ce_loss(logits: ClipTensor, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over every (b, h, w, t) site.

    labels holds integer class ids shaped like the logits without the
    channel axis. Returns the scalar loss and its gradient with respect to
    the logits (already divided by the site count).
    """
    arr, batched = _nd5(logits)
    lab = np.asarray(labels)
    if not np.issubdtype(lab.dtype, np.integer):
        raise ShapeError("labels must be integers")
    lab5 = lab[None] if lab.ndim == 3 else lab
    if lab5.shape != arr.shape[:4]:
        raise ShapeError(f"labels shape {lab.shape} does not match logits sites {arr.shape[:4]}")
    n_classes = arr.shape[4]
    if lab5.min() < 0 or lab5.max() >= n_classes:
        raise ValueError(f"label ids must lie in [0, {n_classes  - 1}]")
    shifted = arr - arr.max(axis=4, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=4, keepdims=True))
    log_probs = shifted - log_z
    sites = int(np.prod(arr.shape[:4]))
    picked = np.take_along_axis(log_probs, lab5[..., None], axis=4)
    loss = float(-picked.sum() / sites)
    grad = np.exp(log_probs)
    np.put_along_axis(grad, lab5[..., None], np.take_along_axis(grad, lab5[..., None], axis=4) - 1.0, axis=4)
    grad /= sites
    return loss, _unwrap(grad, batched)
