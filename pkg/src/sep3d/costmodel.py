"""Closed-form accounting of work, parameters, and activation storage.

Every expression here mirrors the instrumented counters in ``kernels``
exactly: a multiply-accumulate (MAC) is one multiply feeding one add, taps
that read zero padding are included, and ``ops`` doubles the MAC count to
report multiplies and adds separately. The equality between these closed
forms and the measured counters is enforced by tests, so the two routes
cannot drift apart silently.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import prod

from . import kernels as K
from .errors import ShapeError
from .kernels import ConvSpec
from .network import Dims, NetworkConfig, PlanStep, layer_plan

BYTES_PER_ELEMENT = 8  # activations are stored as float64


# ---------------------------------------------------------------------------
# geometry


def conv_out_dims(in_dims: Dims, spec: ConvSpec) -> Dims:
    """Output (h, w, t) of a convolution, matching the kernel geometry."""
    out = []
    for n, ext, s in zip(in_dims, spec.extent, spec.stride):
        if spec.padding == "same":
            out.append(-(-n // s))
        else:
            span = n - ext
            if span < 0:
                raise ShapeError(
                    f"valid padding needs input dim >= extent, got {n} < {ext}"
                )
            out.append(span // s + 1)
    return tuple(out)


def _r2plus1d_stage_dims(in_dims: Dims, spec: ConvSpec) -> tuple[Dims, Dims]:
    """(spatial-stage out dims, temporal-stage out dims) of the factored form."""
    kh, kw, kt = spec.kernel
    sh, sw, st = spec.stride
    sp = ConvSpec((kh, kw, 1), 1, 1, spatial_dilation=spec.spatial_dilation,
                  stride=(sh, sw, 1), padding=spec.padding)
    tm = ConvSpec((1, 1, kt), 1, 1, temporal_dilation=spec.temporal_dilation,
                  stride=(1, 1, st), padding=spec.padding)
    mid = conv_out_dims(in_dims, sp)
    return mid, conv_out_dims(mid, tm)


# ---------------------------------------------------------------------------
# elementary closed forms (MACs)


def cost_standard(out_dims: Dims, kernel: Dims, channels_in: int, channels_out: int) -> int:
    """Dense convolution: every output site mixes all taps of all channels."""
    return prod(out_dims) * channels_in * channels_out * prod(kernel)


def cost_channelwise(out_dims: Dims, kernel: Dims, channels_in: int) -> int:
    """Per-channel filtering: each channel sees only its own taps."""
    return prod(out_dims) * channels_in * prod(kernel)


def cost_pointwise(dims: Dims, channels_in: int, channels_out: int) -> int:
    """1x1x1 channel mixing applied independently at every site."""
    return prod(dims) * channels_in * channels_out


def cost_separable(out_dims: Dims, kernel: Dims, channels_in: int, channels_out: int) -> int:
    """Channel-wise filtering followed by point-wise mixing."""
    return cost_channelwise(out_dims, kernel, channels_in) + cost_pointwise(
        out_dims, channels_in, channels_out
    )


def separable_reduction_ratio(kernel: Dims, channels_out: int) -> Fraction:
    """Exact work ratio separable/dense; independent of the site count."""
    return Fraction(1, channels_out) + Fraction(1, prod(kernel))


def r2plus1d_reduction_ratio(
    kernel: Dims, channels_in: int, channels_out: int, mid_channels: int | None = None
) -> Fraction:
    """Exact work ratio of the spatial-then-temporal factorization vs dense.

    With the parameter-parity intermediate width the ratio sits within one
    rounding step of 1: the factorization reshapes the computation without
    changing its budget.
    """
    kh, kw, kt = kernel
    m, n = channels_in, channels_out
    q = mid_channels if mid_channels is not None else K.m_prime(
        ConvSpec(kernel, m, n)
    )
    return Fraction(q, n * kt) + Fraction(q, m * kh * kw)


def upsample_macs(in_dims: Dims, out_dims: Dims, channels: int) -> int:
    """Trilinear resize cost: two MACs per produced element, one axis pass
    at a time in (h, w, t) order, skipping axes that do not change."""
    cur = list(in_dims)
    total = 0
    for axis in range(3):
        if out_dims[axis] != cur[axis]:
            cur[axis] = out_dims[axis]
            total += 2 * prod(cur) * channels
    return total


def pool_macs(in_dims: Dims, channels: int) -> int:
    """Full-frame spatial averaging touches every input element once."""
    return prod(in_dims) * channels


def conv_macs(
    in_dims: Dims, spec: ConvSpec, variant: str, mid_channels: int | None = None
) -> int:
    """MACs of one convolution under the given realization."""
    out = conv_out_dims(in_dims, spec)
    m, n = spec.channels_in, spec.channels_out
    if variant == "standard":
        return cost_standard(out, spec.kernel, m, n)
    if variant == "channelwise":
        return cost_channelwise(out, spec.kernel, m)
    if variant == "pointwise":
        return cost_pointwise(out, m, n)
    if variant == "separable":
        return cost_separable(out, spec.kernel, m, n)
    if variant == "r2plus1d":
        q = mid_channels if mid_channels is not None else K.m_prime(spec)
        kh, kw, kt = spec.kernel
        mid_dims, out_dims = _r2plus1d_stage_dims(in_dims, spec)
        return (
            cost_standard(mid_dims, (kh, kw, 1), m, q)
            + cost_standard(out_dims, (1, 1, kt), q, n)
        )
    raise ShapeError(f"unknown conv realization {variant!r}")


def conv_params(
    spec: ConvSpec, variant: str, has_bias: bool, mid_channels: int | None = None
) -> int:
    """Learnable scalar count of one convolution under the given realization."""
    kh, kw, kt = spec.kernel
    m, n = spec.channels_in, spec.channels_out
    if variant == "standard":
        count = kh * kw * kt * m * n
    elif variant == "channelwise":
        count = kh * kw * kt * m
    elif variant == "pointwise":
        count = m * n
    elif variant == "separable":
        count = kh * kw * kt * m + m * n
    elif variant == "r2plus1d":
        q = mid_channels if mid_channels is not None else K.m_prime(spec)
        count = kh * kw * m * q + kt * q * n
    else:
        raise ShapeError(f"unknown conv realization {variant!r}")
    return count + (n if has_bias else 0)


# ---------------------------------------------------------------------------
# per-layer and whole-network reports


@dataclass(frozen=True)
class LayerCost:
    """Cost of one resolved network operation."""

    name: str
    section: str
    kind: str
    variant: str | None
    macs: int
    params: int
    out_elements: int

    @property
    def ops(self) -> int:
        return 2 * self.macs

    @property
    def activation_bytes(self) -> int:
        return self.out_elements * BYTES_PER_ELEMENT


@dataclass(frozen=True)
class CostReport:
    """Totals over a set of layer costs; sums are order-independent."""

    input_dims: Dims
    variant: str
    layers: tuple[LayerCost, ...]
    includes_encoder: bool

    @property
    def multiply_adds(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def ops(self) -> int:
        return 2 * self.multiply_adds

    @property
    def params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def activation_bytes(self) -> int:
        return sum(layer.activation_bytes for layer in self.layers)


def step_cost(step: PlanStep) -> LayerCost:
    """Cost of one plan step, reproducing the instrumented counters exactly."""
    out_elements = prod(step.out_dims) * step.out_channels
    if step.kind == "conv":
        macs = conv_macs(step.in_dims, step.spec, step.variant)
        params = conv_params(step.spec, step.variant, step.has_bias)
    elif step.kind == "pool":
        macs = pool_macs(step.in_dims, step.in_channels)
        params = 0
    elif step.kind == "broadcast":
        macs = 0
        params = 0
    elif step.kind == "upsample":
        macs = upsample_macs(step.in_dims, step.out_dims, step.out_channels)
        params = 0
    else:
        raise ShapeError(f"unknown plan step kind {step.kind!r}")
    return LayerCost(
        name=step.name,
        section=step.section,
        kind=step.kind,
        variant=step.variant,
        macs=macs,
        params=params,
        out_elements=out_elements,
    )


def plan_costs(plan: list[PlanStep]) -> list[LayerCost]:
    return [step_cost(step) for step in plan]


def network_cost(
    cfg: NetworkConfig,
    input_dims: Dims,
    variant: str | None = None,
    include_encoder: bool = False,
) -> CostReport:
    """Cost report for a configured network on the given clip dims.

    By default only the pyramid, decoder, and head are totalled — the
    sections the conv realization actually swaps — since the encoder keeps
    its factored form in every variant. Pass ``include_encoder=True`` to
    account for the full forward pass.
    """
    plan = layer_plan(cfg, tuple(input_dims), variant)
    if not include_encoder:
        plan = [step for step in plan if step.section != "encoder"]
    return CostReport(
        input_dims=tuple(input_dims),
        variant=variant or cfg.conv_variant,
        layers=tuple(plan_costs(plan)),
        includes_encoder=include_encoder,
    )
