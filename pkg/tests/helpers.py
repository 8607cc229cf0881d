"""Shared generators and checkers for kernel-vs-oracle and gradient tests."""

import numpy as np

import oracles
from sep3d import kernels as K
from sep3d.tensor import ClipTensor


def random_geometry(rng, max_dim=6, allow_stride=True):
    """Random ConvSpec-compatible geometry with dims capped at max_dim."""
    kernel = tuple(int(rng.integers(1, 4)) for _ in range(3))
    gs = int(rng.integers(1, 4))
    gt = int(rng.integers(1, 4))
    stride = tuple(int(rng.integers(1, 3)) for _ in range(3)) if allow_stride else (1, 1, 1)
    padding = "same" if rng.random() < 0.5 else "valid"
    m = int(rng.integers(1, 5))
    n = int(rng.integers(1, 5))
    dims = []
    for axis in range(3):
        g = (gs, gs, gt)[axis]
        ext = (kernel[axis] - 1) * g + 1
        lo = ext if padding == "valid" else 1
        dims.append(int(rng.integers(lo, max(lo + 1, max_dim + 1))))
    b = int(rng.integers(1, 3))
    return dict(kernel=kernel, gs=gs, gt=gt, stride=stride, padding=padding, m=m, n=n, dims=tuple(dims), b=b)


def _spec(geo, m, n):
    return K.ConvSpec(
        kernel=geo["kernel"],
        channels_in=m,
        channels_out=n,
        spatial_dilation=geo["gs"],
        temporal_dilation=geo["gt"],
        stride=geo["stride"],
        padding=geo["padding"],
    )


def make_case(rng, variant, max_dim=6):
    """Random input + weights + spec for one kernel variant."""
    geo = random_geometry(rng, max_dim=max_dim)
    m, n = geo["m"], geo["n"]
    if variant == "pointwise":
        geo["kernel"], geo["stride"], geo["gs"], geo["gt"] = (1, 1, 1), (1, 1, 1), 1, 1
    if variant == "channelwise":
        n = m
    x = rng.normal(size=(geo["b"], *geo["dims"], m))
    spec = _spec(geo, m, n)
    kh, kw, kt = geo["kernel"]
    bias = rng.normal(size=n) if rng.random() < 0.5 and variant != "channelwise" else None
    if variant == "standard":
        w = K.WeightSet(standard=rng.normal(size=(kh, kw, kt, m, n)), bias=bias)
    elif variant == "channelwise":
        w = K.WeightSet(channelwise=rng.normal(size=(kh, kw, kt, m)))
    elif variant == "pointwise":
        w = K.WeightSet(pointwise=rng.normal(size=(m, n)), bias=bias)
    elif variant == "separable":
        w = K.WeightSet(
            channelwise=rng.normal(size=(kh, kw, kt, m)),
            pointwise=rng.normal(size=(m, n)),
            bias=bias,
        )
    elif variant == "r2plus1d":
        mp = int(rng.integers(1, 5))
        w = K.WeightSet(
            spatial=rng.normal(size=(kh, kw, 1, m, mp)),
            temporal=rng.normal(size=(1, 1, kt, mp, n)),
            bias=bias,
        )
    else:
        raise ValueError(variant)
    return x, w, spec, geo


FORWARD = {
    "standard": K.conv3d_standard,
    "channelwise": K.conv3d_channelwise,
    "pointwise": K.conv3d_pointwise,
    "separable": K.conv3d_separable,
    "r2plus1d": K.conv_r2plus1d,
}

BACKWARD = {
    "standard": K.conv3d_standard_backward,
    "channelwise": K.conv3d_channelwise_backward,
    "pointwise": K.conv3d_pointwise_backward,
    "separable": K.conv3d_separable_backward,
    "r2plus1d": K.conv_r2plus1d_backward,
}


def oracle_forward(variant, x, w, geo):
    args = (geo["gs"], geo["gt"], geo["stride"], geo["padding"])
    if variant == "standard":
        return oracles.conv_standard(x, w.standard, w.bias, *args)
    if variant == "channelwise":
        return oracles.conv_channelwise(x, w.channelwise, *args)
    if variant == "pointwise":
        return oracles.conv_pointwise(x, w.pointwise, w.bias)
    if variant == "separable":
        return oracles.conv_separable(x, w.channelwise, w.pointwise, w.bias, *args)
    if variant == "r2plus1d":
        return oracles.conv_r2plus1d(x, w.spatial, w.temporal, w.bias, *args)
    raise ValueError(variant)


def oracle_equivalence_error(variant, instances, seed):
    """Max L-inf error between the kernel and its nested-loop oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        x, w, spec, geo = make_case(rng, variant)
        got = FORWARD[variant](ClipTensor(x), w, spec).data
        want = oracle_forward(variant, x, w, geo)
        assert got.shape == want.shape, f"{variant}: shape {got.shape} vs oracle {want.shape}"
        worst = max(worst, float(np.max(np.abs(got - want))) if got.size else 0.0)
    return worst


def interior_tap_count(dims, kernel, dilation, stride, padding):
    """Brute-force count of (site, tap) pairs whose reads all land in-bounds."""
    geo = [oracles.axis_out(n, k, g, s, padding) for n, k, g, s in zip(dims, kernel, dilation, stride)]
    hits = 0
    for oh in range(geo[0][0]):
        for ow in range(geo[1][0]):
            for ot in range(geo[2][0]):
                site = (oh, ow, ot)
                for i in range(kernel[0]):
                    for j in range(kernel[1]):
                        for k in range(kernel[2]):
                            tap = (i, j, k)
                            ok = True
                            for a in range(3):
                                src = site[a] * stride[a] + tap[a] * dilation[a] - geo[a][1]
                                if src < 0 or src >= dims[a]:
                                    ok = False
                                    break
                            if ok:
                                hits += 1
    return hits


def fd_check(loss_fn, arrays, analytic, step=1e-5):
    """Central-difference check of analytic grads for every array entry.

    loss_fn re-evaluates the scalar loss from the (mutated) arrays. Returns
    the worst relative error, with the scale floored at 1 to keep near-zero
    gradients from amplifying finite-difference noise.
    """
    worst = 0.0
    for name, arr in arrays.items():
        grad = analytic[name]
        assert grad.shape == arr.shape, f"{name}: grad shape {grad.shape} vs {arr.shape}"
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + step
            up = loss_fn()
            flat[idx] = keep - step
            down = loss_fn()
            flat[idx] = keep
            fd_flat[idx] = (up - down) / (2 * step)
        scale = max(1.0, float(np.max(np.abs(grad))), float(np.max(np.abs(fd))))
        worst = max(worst, float(np.max(np.abs(grad - fd))) / scale)
    return worst
