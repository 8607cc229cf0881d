"""Encoder / pyramid / decoder segmentation network over video clips.

Structure, configurable end to end:

  * encoder: a stack of factored spatial-temporal blocks (a K_h x K_w x 1
    convolution into an intermediate width, a rectifier, then a
    1 x 1 x K_t convolution), each with its own spatial stride, temporal
    stride, and temporal dilation; every block's output is kept as a
    potential skip connection
  * pyramid pooling: parallel branches over the final encoder features —
    3x3x3 convolutions at several spatial dilation rates, an optional
    1x1x1 branch, and an optional frame-level branch (global spatial
    average, projected, broadcast back) — concatenated and fused by a
    1x1x1 convolution
  * decoder: stages of trilinear upsampling, concatenation with a
    projected encoder skip, and a 3x3x3 convolution
  * heads: a pointwise segmentation head over the decoder output (plus an
    optional final upsampling of the logits), and an optional clip-level
    classifier head fed by mask-guided crops of the decoder features

The `conv_variant` config field selects how every pyramid/decoder mixing
convolution is realized: "standard" (dense), "separable" (channel-wise
then point-wise), or "r2plus1d" (spatial then temporal factor at
parameter parity). The encoder always uses the factored spatial-temporal
form, mirroring a conventional pretrained video backbone, and is excluded
from inference-cost accounting.

All convolutions use zero same-padding and live weights in one flat
`{name: ndarray}` dictionary so checkpoints are a list of named tensors.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels as K
from . import postproc
from .errors import ConfigError, ConfigWarning, ShapeError
from .kernels import ConvSpec, WeightSet
from .tensor import ClipTensor, concat_channels

VARIANTS = ("standard", "r2plus1d", "separable")
MIX_KERNEL = (3, 3, 3)

Dims = tuple[int, int, int]  # (h, w, t)


# ---------------------------------------------------------------------------
# configuration types


@dataclass(frozen=True)
class EncoderBlock:
    """One encoder stage: output width plus stride/dilation geometry."""

    channels: int
    spatial_stride: int = 1
    temporal_stride: int = 1
    temporal_dilation: int = 1


@dataclass(frozen=True)
class PyramidConfig:
    """Branch layout of the pyramid pooling module.

    branch_channels / fuse_channels of None default to a quarter / half of
    the incoming feature width at build time.
    """

    spatial_rates: tuple[int, ...] = (6, 12, 18)
    include_unit_branch: bool = True
    include_frame_features: bool = True
    branch_channels: int | None = None
    fuse_channels: int | None = None

    @property
    def branch_count(self) -> int:
        return (
            len(self.spatial_rates)
            + int(self.include_unit_branch)
            + int(self.include_frame_features)
        )


@dataclass(frozen=True)
class DecoderStage:
    """One decoder stage: upsample scale, optional skip, output width."""

    scale: Dims
    out_channels: int
    skip_block: int | None = None
    skip_channels: int = 0


@dataclass(frozen=True)
class NetworkConfig:
    encoder: tuple[EncoderBlock, ...]
    pyramid: PyramidConfig
    decoder: tuple[DecoderStage, ...]
    in_channels: int = 3
    num_classes: int = 2
    conv_variant: str = "separable"
    logits_scale: Dims = (1, 1, 1)
    action_classes: int = 0
    action_crop: int = 7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    decay_rate: float = 0.95
    decay_every: int = 1
    epochs: int = 100
    scale_jitter: tuple[float, float] = (0.5, 2.0)
    horizontal_flip: bool = True
    clip_length: int = 8
    crop: int = 320


def _positive(value: int, what: str) -> None:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"{what} must be a positive integer, got {value!r}")


def validate_config(cfg: NetworkConfig) -> None:
    """Structural validation; dimension checks happen in layer_plan."""
    if not cfg.encoder:
        raise ConfigError("encoder needs at least one block")
    for i, blk in enumerate(cfg.encoder):
        _positive(blk.channels, f"encoder[{i}].channels")
        _positive(blk.spatial_stride, f"encoder[{i}].spatial_stride")
        _positive(blk.temporal_stride, f"encoder[{i}].temporal_stride")
        _positive(blk.temporal_dilation, f"encoder[{i}].temporal_dilation")
    ppm = cfg.pyramid
    for r in ppm.spatial_rates:
        _positive(r, "pyramid rate")
    if len(set(ppm.spatial_rates)) != len(ppm.spatial_rates):
        raise ConfigError(f"pyramid rates must be distinct, got {ppm.spatial_rates}")
    if ppm.branch_count < 1:
        raise ConfigError("pyramid has zero branches configured")
    if ppm.branch_channels is not None:
        _positive(ppm.branch_channels, "pyramid.branch_channels")
    if ppm.fuse_channels is not None:
        _positive(ppm.fuse_channels, "pyramid.fuse_channels")
    if not cfg.decoder:
        raise ConfigError("decoder needs at least one stage")
    for j, st in enumerate(cfg.decoder):
        if len(st.scale) != 3:
            raise ConfigError(f"decoder[{j}].scale must have three entries")
        for s in st.scale:
            _positive(s, f"decoder[{j}].scale entry")
        _positive(st.out_channels, f"decoder[{j}].out_channels")
        if st.skip_block is not None:
            if not 0 <= st.skip_block < len(cfg.encoder):
                raise ConfigError(
                    f"decoder[{j}].skip_block {st.skip_block} is not an encoder "
                    f"block index (0..{len(cfg.encoder) - 1})"
                )
            _positive(st.skip_channels, f"decoder[{j}].skip_channels")
    _positive(cfg.in_channels, "in_channels")
    if cfg.num_classes < 2:
        raise ConfigError(f"num_classes must be at least 2, got {cfg.num_classes}")
    if cfg.conv_variant not in VARIANTS:
        raise ConfigError(f"conv_variant must be one of {VARIANTS}, got {cfg.conv_variant!r}")
    if len(cfg.logits_scale) != 3:
        raise ConfigError("logits_scale must have three entries")
    for s in cfg.logits_scale:
        _positive(s, "logits_scale entry")
    if cfg.action_classes < 0:
        raise ConfigError("action_classes must be nonnegative")
    if cfg.action_classes:
        _positive(cfg.action_crop, "action_crop")


def validate_train_config(cfg: TrainConfig) -> None:
    if not cfg.learning_rate > 0:
        raise ConfigError(f"learning_rate must be positive, got {cfg.learning_rate}")
    if not 0 < cfg.decay_rate <= 1:
        raise ConfigError(f"decay_rate must lie in (0, 1], got {cfg.decay_rate}")
    _positive(cfg.decay_every, "decay_every")
    if cfg.epochs < 0:
        raise ConfigError(f"epochs must be nonnegative, got {cfg.epochs}")
    lo, hi = cfg.scale_jitter
    if not 0 < lo <= hi:
        raise ConfigError(f"scale_jitter must satisfy 0 < lo <= hi, got {cfg.scale_jitter}")
    _positive(cfg.clip_length, "clip_length")
    _positive(cfg.crop, "crop")


# ---------------------------------------------------------------------------
# config (de)serialization — plain JSON with a "network" and optional
# "train" section


def config_to_dict(cfg: NetworkConfig) -> dict:
    return {
        "encoder": [
            {
                "channels": b.channels,
                "spatial_stride": b.spatial_stride,
                "temporal_stride": b.temporal_stride,
                "temporal_dilation": b.temporal_dilation,
            }
            for b in cfg.encoder
        ],
        "pyramid": {
            "spatial_rates": list(cfg.pyramid.spatial_rates),
            "include_unit_branch": cfg.pyramid.include_unit_branch,
            "include_frame_features": cfg.pyramid.include_frame_features,
            "branch_channels": cfg.pyramid.branch_channels,
            "fuse_channels": cfg.pyramid.fuse_channels,
        },
        "decoder": [
            {
                "scale": list(st.scale),
                "out_channels": st.out_channels,
                "skip_block": st.skip_block,
                "skip_channels": st.skip_channels,
            }
            for st in cfg.decoder
        ],
        "in_channels": cfg.in_channels,
        "num_classes": cfg.num_classes,
        "conv_variant": cfg.conv_variant,
        "logits_scale": list(cfg.logits_scale),
        "action_classes": cfg.action_classes,
        "action_crop": cfg.action_crop,
    }


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "learning_rate": cfg.learning_rate,
        "decay_rate": cfg.decay_rate,
        "decay_every": cfg.decay_every,
        "epochs": cfg.epochs,
        "scale_jitter": list(cfg.scale_jitter),
        "horizontal_flip": cfg.horizontal_flip,
        "clip_length": cfg.clip_length,
        "crop": cfg.crop,
    }


def _expect_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def config_from_dict(d: dict) -> NetworkConfig:
    _expect_keys(
        d,
        {
            "encoder", "pyramid", "decoder", "in_channels", "num_classes",
            "conv_variant", "logits_scale", "action_classes", "action_crop",
        },
        "network config",
    )
    try:
        encoder = tuple(
            EncoderBlock(
                channels=int(b["channels"]),
                spatial_stride=int(b.get("spatial_stride", 1)),
                temporal_stride=int(b.get("temporal_stride", 1)),
                temporal_dilation=int(b.get("temporal_dilation", 1)),
            )
            for b in d["encoder"]
        )
        p = d.get("pyramid", {})
        pyramid = PyramidConfig(
            spatial_rates=tuple(int(r) for r in p.get("spatial_rates", (6, 12, 18))),
            include_unit_branch=bool(p.get("include_unit_branch", True)),
            include_frame_features=bool(p.get("include_frame_features", True)),
            branch_channels=(None if p.get("branch_channels") is None else int(p["branch_channels"])),
            fuse_channels=(None if p.get("fuse_channels") is None else int(p["fuse_channels"])),
        )
        decoder = tuple(
            DecoderStage(
                scale=tuple(int(s) for s in st["scale"]),
                out_channels=int(st["out_channels"]),
                skip_block=(None if st.get("skip_block") is None else int(st["skip_block"])),
                skip_channels=int(st.get("skip_channels", 0)),
            )
            for st in d["decoder"]
        )
        cfg = NetworkConfig(
            encoder=encoder,
            pyramid=pyramid,
            decoder=decoder,
            in_channels=int(d.get("in_channels", 3)),
            num_classes=int(d.get("num_classes", 2)),
            conv_variant=str(d.get("conv_variant", "separable")),
            logits_scale=tuple(int(s) for s in d.get("logits_scale", (1, 1, 1))),
            action_classes=int(d.get("action_classes", 0)),
            action_crop=int(d.get("action_crop", 7)),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed network config: {exc!r}") from exc
    validate_config(cfg)
    return cfg


def train_config_from_dict(d: dict) -> TrainConfig:
    _expect_keys(
        d,
        {
            "learning_rate", "decay_rate", "decay_every", "epochs",
            "scale_jitter", "horizontal_flip", "clip_length", "crop",
        },
        "train config",
    )
    try:
        cfg = TrainConfig(
            learning_rate=float(d.get("learning_rate", 1e-4)),
            decay_rate=float(d.get("decay_rate", 0.95)),
            decay_every=int(d.get("decay_every", 1)),
            epochs=int(d.get("epochs", 100)),
            scale_jitter=tuple(float(s) for s in d.get("scale_jitter", (0.5, 2.0))),
            horizontal_flip=bool(d.get("horizontal_flip", True)),
            clip_length=int(d.get("clip_length", 8)),
            crop=int(d.get("crop", 320)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed train config: {exc!r}") from exc
    validate_train_config(cfg)
    return cfg


def load_config(path: str | Path) -> tuple[NetworkConfig, TrainConfig | None]:
    """Read a JSON config file holding a "network" and optional "train" section."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or "network" not in payload:
        raise ConfigError(f'config file {path} must be an object with a "network" section')
    _expect_keys(payload, {"network", "train"}, "config file")
    net = config_from_dict(payload["network"])
    train = train_config_from_dict(payload["train"]) if "train" in payload else None
    return net, train


def save_config(path: str | Path, net: NetworkConfig, train: TrainConfig | None = None) -> None:
    payload: dict = {"network": config_to_dict(net)}
    if train is not None:
        payload["train"] = train_config_to_dict(train)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def bundled_config_path(name: str) -> Path:
    """Path of a config shipped with the package (e.g. "toy64", "ref320")."""
    root = resources.files("sep3d") / "configs"
    path = Path(str(root / f"{name}.json"))
    if not path.is_file():
        have = sorted(p.stem for p in Path(str(root)).glob("*.json"))
        raise ConfigError(f"no bundled config named {name!r}; available: {have}")
    return path


# ---------------------------------------------------------------------------
# layer plan: the dimension walk shared by shape validation and the cost
# model


@dataclass(frozen=True)
class PlanStep:
    """One cost-relevant operation of the network, with resolved geometry."""

    name: str
    section: str  # "encoder" | "pyramid" | "decoder" | "head"
    kind: str  # "conv" | "pool" | "broadcast" | "upsample"
    in_dims: Dims
    out_dims: Dims
    in_channels: int
    out_channels: int
    variant: str | None = None  # conv realization for kind == "conv"
    spec: ConvSpec | None = None
    scale: Dims | None = None
    has_bias: bool = False


def _mixing_variant(variant: str, kernel: tuple[int, int, int]) -> str:
    """Concrete conv realization for a mixing convolution.

    1x1x1 mixing convolutions have no spatial structure to factor, so the
    standard and r2plus1d variants realize them as plain pointwise layers;
    the separable variant keeps its channel-wise + point-wise split.
    """
    if kernel == (1, 1, 1):
        return "separable" if variant == "separable" else "pointwise"
    return variant


def _same_out(n: int, stride: int) -> int:
    return -(-n // stride)


def _conv_out_dims(dims: Dims, spec: ConvSpec) -> Dims:
    return tuple(_same_out(n, s) for n, s in zip(dims, spec.stride))


def resolved_branch_widths(cfg: NetworkConfig) -> tuple[int, int]:
    """(branch_channels, fuse_channels) with defaults from the encoder width."""
    m = cfg.encoder[-1].channels
    branch = cfg.pyramid.branch_channels or max(1, m // 4)
    fuse = cfg.pyramid.fuse_channels or max(1, m // 2)
    return branch, fuse


def layer_plan(
    cfg: NetworkConfig, input_dims: Dims, variant: str | None = None
) -> list[PlanStep]:
    """Resolve every cost-relevant operation with its input/output geometry.

    Raises ConfigError when the configured strides, scales, and skips do
    not produce a consistent network on the given input dims; warns (but
    proceeds) when a dilated pyramid branch's filter extent exceeds its
    feature map, since such branches read mostly padding.
    """
    validate_config(cfg)
    variant = variant or cfg.conv_variant
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if len(input_dims) != 3 or any(d < 1 for d in input_dims):
        raise ConfigError(f"input dims must be three positive integers, got {input_dims}")

    steps: list[PlanStep] = []

    def conv(name, section, dims, spec, conv_variant, has_bias):
        out_dims = _conv_out_dims(dims, spec)
        steps.append(
            PlanStep(
                name=name,
                section=section,
                kind="conv",
                in_dims=dims,
                out_dims=out_dims,
                in_channels=spec.channels_in,
                out_channels=spec.channels_out,
                variant=conv_variant,
                spec=spec,
                has_bias=has_bias,
            )
        )
        return out_dims

    # encoder ---------------------------------------------------------
    dims = tuple(input_dims)
    channels = cfg.in_channels
    skip_dims: list[Dims] = []
    skip_channels: list[int] = []
    for i, blk in enumerate(cfg.encoder):
        equivalent = ConvSpec(
            MIX_KERNEL,
            channels,
            blk.channels,
            temporal_dilation=blk.temporal_dilation,
            stride=(blk.spatial_stride, blk.spatial_stride, blk.temporal_stride),
        )
        mp = K.m_prime(equivalent)
        sp_spec = ConvSpec(
            (MIX_KERNEL[0], MIX_KERNEL[1], 1),
            channels,
            mp,
            stride=(blk.spatial_stride, blk.spatial_stride, 1),
        )
        t_spec = ConvSpec(
            (1, 1, MIX_KERNEL[2]),
            mp,
            blk.channels,
            temporal_dilation=blk.temporal_dilation,
            stride=(1, 1, blk.temporal_stride),
        )
        dims = conv(f"enc{i}.spatial", "encoder", dims, sp_spec, "standard", has_bias=False)
        dims = conv(f"enc{i}.temporal", "encoder", dims, t_spec, "standard", has_bias=True)
        channels = blk.channels
        skip_dims.append(dims)
        skip_channels.append(channels)

    # pyramid pooling ---------------------------------------------------
    branch, fuse = resolved_branch_widths(cfg)
    feat_dims = dims
    m = channels
    n_branches = 0
    for rate in sorted(cfg.pyramid.spatial_rates):
        spec = ConvSpec(MIX_KERNEL, m, branch, spatial_dilation=rate)
        extent = spec.extent
        if any(e > d for e, d in zip(extent, feat_dims)):
            warnings.warn(
                f"pyramid branch rate {rate}: filter extent {extent} exceeds "
                f"feature dims {feat_dims}; most taps read zero padding",
                ConfigWarning,
                stacklevel=2,
            )
        conv(f"ppm.rate{rate}", "pyramid", feat_dims, spec,
             _mixing_variant(variant, MIX_KERNEL), has_bias=True)
        n_branches += 1
    if cfg.pyramid.include_unit_branch:
        conv("ppm.unit", "pyramid", feat_dims, ConvSpec((1, 1, 1), m, branch),
             _mixing_variant(variant, (1, 1, 1)), has_bias=True)
        n_branches += 1
    if cfg.pyramid.include_frame_features:
        pooled = (1, 1, feat_dims[2])
        steps.append(
            PlanStep(name="ppm.ff.pool", section="pyramid", kind="pool",
                     in_dims=feat_dims, out_dims=pooled, in_channels=m, out_channels=m)
        )
        conv("ppm.ff.proj", "pyramid", pooled, ConvSpec((1, 1, 1), m, branch),
             "pointwise", has_bias=True)
        steps.append(
            PlanStep(name="ppm.ff.broadcast", section="pyramid", kind="broadcast",
                     in_dims=pooled, out_dims=feat_dims, in_channels=branch,
                     out_channels=branch)
        )
        n_branches += 1
    conv("ppm.fuse", "pyramid", feat_dims,
         ConvSpec((1, 1, 1), n_branches * branch, fuse), "pointwise", has_bias=True)

    # decoder -----------------------------------------------------------
    channels = fuse
    for j, st in enumerate(cfg.decoder):
        up_dims = tuple(d * s for d, s in zip(dims, st.scale))
        steps.append(
            PlanStep(name=f"dec{j}.upsample", section="decoder", kind="upsample",
                     in_dims=dims, out_dims=up_dims, in_channels=channels,
                     out_channels=channels, scale=tuple(st.scale))
        )
        dims = up_dims
        conv_in = channels
        if st.skip_block is not None:
            want = skip_dims[st.skip_block]
            if want != dims:
                raise ConfigError(
                    f"decoder stage {j}: upsampled dims {dims} do not match "
                    f"skip from encoder block {st.skip_block} at {want}"
                )
            conv(f"dec{j}.skip", "decoder", dims,
                 ConvSpec((1, 1, 1), skip_channels[st.skip_block], st.skip_channels),
                 "pointwise", has_bias=True)
            conv_in += st.skip_channels
        dims = conv(f"dec{j}.conv", "decoder", dims,
                    ConvSpec(MIX_KERNEL, conv_in, st.out_channels),
                    _mixing_variant(variant, MIX_KERNEL), has_bias=True)
        channels = st.out_channels

    # heads ---------------------------------------------------------------
    dims = conv("head", "head", dims, ConvSpec((1, 1, 1), channels, cfg.num_classes),
                "pointwise", has_bias=True)
    if tuple(cfg.logits_scale) != (1, 1, 1):
        out_dims = tuple(d * s for d, s in zip(dims, cfg.logits_scale))
        steps.append(
            PlanStep(name="logits.upsample", section="head", kind="upsample",
                     in_dims=dims, out_dims=out_dims, in_channels=cfg.num_classes,
                     out_channels=cfg.num_classes, scale=tuple(cfg.logits_scale))
        )
        dims = out_dims
    if dims != tuple(input_dims):
        raise ConfigError(
            f"network output dims {dims} do not restore the input dims "
            f"{tuple(input_dims)}; check strides, scales, and logits_scale"
        )
    return steps


# ---------------------------------------------------------------------------
# weight inventory and initialization


_SLOTS = {
    "standard": ("kernel",),
    "pointwise": ("kernel",),
    "channelwise": ("kernel",),
    "separable": ("channelwise", "pointwise"),
    "r2plus1d": ("spatial", "temporal"),
}


def _slot_shapes(step: PlanStep) -> dict[str, tuple[int, ...]]:
    """Weight array shapes for one conv plan step, keyed by full name."""
    spec = step.spec
    kh, kw, kt = spec.kernel
    m, n = spec.channels_in, spec.channels_out
    shapes: dict[str, tuple[int, ...]] = {}
    if step.variant == "standard":
        shapes[f"{step.name}.kernel"] = (kh, kw, kt, m, n)
    elif step.variant == "pointwise":
        shapes[f"{step.name}.kernel"] = (m, n)
    elif step.variant == "channelwise":
        shapes[f"{step.name}.kernel"] = (kh, kw, kt, m)
    elif step.variant == "separable":
        shapes[f"{step.name}.channelwise"] = (kh, kw, kt, m)
        shapes[f"{step.name}.pointwise"] = (m, n)
    elif step.variant == "r2plus1d":
        mp = K.m_prime(spec)
        shapes[f"{step.name}.spatial"] = (kh, kw, 1, m, mp)
        shapes[f"{step.name}.temporal"] = (1, 1, kt, mp, n)
    else:
        raise ConfigError(f"unknown conv variant {step.variant!r}")
    if step.has_bias:
        shapes[f"{step.name}.bias"] = (n,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".bias"):
        return 0
    if len(shape) == 2:  # pointwise / linear: (m, n)
        return shape[0]
    if len(shape) == 4:  # channelwise: (kh, kw, kt, m) — one filter per channel
        return shape[0] * shape[1] * shape[2]
    if len(shape) == 5:  # dense: (kh, kw, kt, m, n)
        return shape[0] * shape[1] * shape[2] * shape[3]
    raise ShapeError(f"cannot infer fan-in of {name} with shape {shape}")


def weight_inventory(cfg: NetworkConfig, input_dims: Dims, variant: str | None = None) -> dict[str, tuple[int, ...]]:
    """Every weight array name and shape, in deterministic build order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for step in layer_plan(cfg, input_dims, variant):
        if step.kind == "conv":
            shapes.update(_slot_shapes(step))
    if cfg.action_classes:
        feat = cfg.decoder[-1].out_channels
        flat = cfg.action_crop * cfg.action_crop * feat
        shapes["action.fc.weight"] = (flat, cfg.action_classes)
        shapes["action.fc.bias"] = (cfg.action_classes,)
    return shapes


def init_weights(
    cfg: NetworkConfig,
    input_dims: Dims,
    seed: int = 0,
    variant: str | None = None,
    zero: bool = False,
) -> dict[str, np.ndarray]:
    """He-style fan-in normal initialization (biases zero), seeded."""
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    for name, shape in weight_inventory(cfg, input_dims, variant).items():
        if zero or name.endswith(".bias"):
            weights[name] = np.zeros(shape)
        else:
            std = np.sqrt(2.0 / _fan_in(name, shape))
            weights[name] = rng.normal(0.0, std, size=shape)
    return weights


# ---------------------------------------------------------------------------
# the network


_FORWARD_FN = {
    "standard": K.conv3d_standard,
    "channelwise": K.conv3d_channelwise,
    "pointwise": K.conv3d_pointwise,
    "separable": K.conv3d_separable,
    "r2plus1d": K.conv_r2plus1d,
}

_BACKWARD_FN = {
    "standard": K.conv3d_standard_backward,
    "channelwise": K.conv3d_channelwise_backward,
    "pointwise": K.conv3d_pointwise_backward,
    "separable": K.conv3d_separable_backward,
    "r2plus1d": K.conv_r2plus1d_backward,
}


@dataclass
class ActionResult:
    """Clip-level classifier output plus which frames fell back to a
    whole-frame crop because the mask was empty there."""

    logits: np.ndarray
    fallback_frames: tuple[int, ...]
    cache: dict | None = None


class SegmentationNetwork:
    """Stateful weight holder with explicit forward/backward passes.

    Weights live in `self.weights` as a flat name-to-array dict; backward
    returns gradients under the same names. The instance is bound to the
    spatial/temporal input dims given at construction (weight shapes do
    not depend on them, but plan validation does).
    """

    def __init__(
        self,
        config: NetworkConfig,
        input_dims: Dims,
        seed: int = 0,
        variant: str | None = None,
        zero_init: bool = False,
    ) -> None:
        validate_config(config)
        self.config = config
        self.input_dims = tuple(input_dims)
        self.variant = variant or config.conv_variant
        self.plan = layer_plan(config, self.input_dims, self.variant)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConfigWarning)  # already warned above
            self.weights = init_weights(config, self.input_dims, seed=seed,
                                        variant=self.variant, zero=zero_init)

    # -- weight plumbing ---------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        return self.weights

    def load_weights(self, weights: dict[str, np.ndarray]) -> None:
        want = {name: arr.shape for name, arr in self.weights.items()}
        got = {name: np.asarray(arr).shape for name, arr in weights.items()}
        if want != got:
            missing = sorted(set(want) - set(got))
            extra = sorted(set(got) - set(want))
            mismatched = sorted(
                name for name in set(want) & set(got) if want[name] != got[name]
            )
            raise ShapeError(
                f"weight sets differ: missing {missing}, unexpected {extra}, "
                f"shape mismatches {mismatched}"
            )
        self.weights = {name: np.asarray(weights[name], dtype=np.float64) for name in want}

    def _weightset(self, name: str, variant: str) -> WeightSet:
        w = self.weights
        bias = w.get(f"{name}.bias")
        if variant == "standard":
            return WeightSet(standard=w[f"{name}.kernel"], bias=bias)
        if variant == "pointwise":
            return WeightSet(pointwise=w[f"{name}.kernel"], bias=bias)
        if variant == "channelwise":
            return WeightSet(channelwise=w[f"{name}.kernel"], bias=bias)
        if variant == "separable":
            return WeightSet(channelwise=w[f"{name}.channelwise"],
                             pointwise=w[f"{name}.pointwise"], bias=bias)
        if variant == "r2plus1d":
            return WeightSet(spatial=w[f"{name}.spatial"],
                             temporal=w[f"{name}.temporal"], bias=bias)
        raise ConfigError(f"unknown conv variant {variant!r}")

    @staticmethod
    def _grad_names(name: str, variant: str, bundle_weights: WeightSet) -> dict[str, np.ndarray]:
        out = {}
        for slot, arr in bundle_weights.arrays().items():
            if slot == "bias":
                out[f"{name}.bias"] = arr
            elif variant in ("standard", "pointwise", "channelwise"):
                out[f"{name}.kernel"] = arr
            else:
                out[f"{name}.{slot}"] = arr
        return out

    # -- forward -----------------------------------------------------------

    def _conv_step(self, name, variant, x, spec, relu_after, cache):
        out = _FORWARD_FN[variant](x, self._weightset(name, variant), spec)
        cache[f"{name}.in"] = x
        cache[f"{name}.meta"] = (variant, spec, relu_after)
        if relu_after:
            cache[f"{name}.pre"] = out
            out = K.relu(out)
        return out

    def _conv_step_backward(self, name, dout, cache, grads):
        variant, spec, relu_after = cache[f"{name}.meta"]
        if relu_after:
            dout = K.relu_backward(dout, cache[f"{name}.pre"]).input
        bundle = _BACKWARD_FN[variant](dout, cache[f"{name}.in"],
                                       self._weightset(name, variant), spec)
        grads.update(self._grad_names(name, variant, bundle.weights))
        return bundle.input

    def _encoder_specs(self, i: int) -> tuple[ConvSpec, ConvSpec]:
        blk = self.config.encoder[i]
        channels = self.config.in_channels if i == 0 else self.config.encoder[i - 1].channels
        equivalent = ConvSpec(
            MIX_KERNEL, channels, blk.channels,
            temporal_dilation=blk.temporal_dilation,
            stride=(blk.spatial_stride, blk.spatial_stride, blk.temporal_stride),
        )
        mp = K.m_prime(equivalent)
        sp = ConvSpec((MIX_KERNEL[0], MIX_KERNEL[1], 1), channels, mp,
                      stride=(blk.spatial_stride, blk.spatial_stride, 1))
        tp = ConvSpec((1, 1, MIX_KERNEL[2]), mp, blk.channels,
                      temporal_dilation=blk.temporal_dilation,
                      stride=(1, 1, blk.temporal_stride))
        return sp, tp

    def forward(self, clip: ClipTensor, keep_cache: bool = False):
        """Clip -> per-pixel class logits; optionally keep the backward tape."""
        if clip.data.shape[-4:-1] != self.input_dims:
            raise ShapeError(
                f"clip dims {clip.data.shape[-4:-1]} do not match the network's "
                f"input dims {self.input_dims}"
            )
        if clip.data.shape[-1] != self.config.in_channels:
            raise ShapeError(
                f"clip has {clip.data.shape[-1]} channels, network expects "
                f"{self.config.in_channels}"
            )
        cache: dict = {}
        x = clip
        skips: list[ClipTensor] = []
        for i in range(len(self.config.encoder)):
            sp, tp = self._encoder_specs(i)
            x = self._conv_step(f"enc{i}.spatial", "standard", x, sp, True, cache)
            x = self._conv_step(f"enc{i}.temporal", "standard", x, tp, True, cache)
            skips.append(x)

        x = self._pyramid_forward(x, cache)
        x = self._decoder_forward(x, skips, cache)
        cache["features"] = x

        logits = self._conv_step(
            "head", "pointwise", x,
            ConvSpec((1, 1, 1), self.config.decoder[-1].out_channels, self.config.num_classes),
            False, cache,
        )
        if tuple(self.config.logits_scale) != (1, 1, 1):
            cache["logits.up.in"] = logits
            logits = K.trilinear_upsample(logits, self.config.logits_scale)
        if keep_cache:
            return logits, cache
        return logits

    def _pyramid_forward(self, x: ClipTensor, cache: dict) -> ClipTensor:
        cfg = self.config
        m = cfg.encoder[-1].channels
        branch, fuse = resolved_branch_widths(cfg)
        feat_hw = x.data.shape[-4:-2]
        branches: list[ClipTensor] = []
        for rate in sorted(cfg.pyramid.spatial_rates):
            spec = ConvSpec(MIX_KERNEL, m, branch, spatial_dilation=rate)
            branches.append(self._conv_step(
                f"ppm.rate{rate}", _mixing_variant(self.variant, MIX_KERNEL),
                x, spec, True, cache))
        if cfg.pyramid.include_unit_branch:
            branches.append(self._conv_step(
                "ppm.unit", _mixing_variant(self.variant, (1, 1, 1)),
                x, ConvSpec((1, 1, 1), m, branch), True, cache))
        if cfg.pyramid.include_frame_features:
            cache["ppm.ff.pool.in"] = x
            pooled = K.avg_pool_spatial_full(x)
            proj = self._conv_step("ppm.ff.proj", "pointwise", pooled,
                                   ConvSpec((1, 1, 1), m, branch), True, cache)
            cache["ppm.ff.broadcast.in"] = proj
            branches.append(K.broadcast_spatial(proj, feat_hw[0], feat_hw[1]))
        cache["ppm.split"] = [b.data.shape[-1] for b in branches]
        cat = concat_channels(branches)
        return self._conv_step(
            "ppm.fuse", "pointwise", cat,
            ConvSpec((1, 1, 1), len(branches) * branch, fuse), False, cache)

    def _decoder_forward(self, x: ClipTensor, skips: list[ClipTensor], cache: dict) -> ClipTensor:
        cfg = self.config
        branch, fuse = resolved_branch_widths(cfg)
        channels = fuse
        for j, st in enumerate(cfg.decoder):
            cache[f"dec{j}.up.in"] = x
            x = K.trilinear_upsample(x, st.scale)
            conv_in = channels
            if st.skip_block is not None:
                skip = skips[st.skip_block]
                if skip.data.shape[-4:-1] != x.data.shape[-4:-1]:
                    raise ShapeError(
                        f"decoder stage {j}: upsampled dims {x.data.shape[-4:-1]} "
                        f"do not match skip {skip.data.shape[-4:-1]}"
                    )
                skip_in = cfg.encoder[st.skip_block].channels
                proj = self._conv_step(f"dec{j}.skip", "pointwise", skip,
                                       ConvSpec((1, 1, 1), skip_in, st.skip_channels),
                                       True, cache)
                cache[f"dec{j}.split"] = [channels, st.skip_channels]
                x = concat_channels([x, proj])
                conv_in += st.skip_channels
            x = self._conv_step(f"dec{j}.conv", _mixing_variant(self.variant, MIX_KERNEL),
                                x, ConvSpec(MIX_KERNEL, conv_in, st.out_channels),
                                True, cache)
            channels = st.out_channels
        return x

    # -- backward ----------------------------------------------------------

    def backward(self, dlogits: np.ndarray, cache: dict):
        """Gradients of a scalar loss given d(loss)/d(logits).

        Returns (grads, dinput): grads keyed like self.weights, dinput the
        gradient with respect to the input clip.
        """
        grads: dict[str, np.ndarray] = {}
        d = np.asarray(dlogits, dtype=np.float64)
        if tuple(self.config.logits_scale) != (1, 1, 1):
            d = K.trilinear_upsample_backward(
                d, cache["logits.up.in"], self.config.logits_scale).input
        d = self._conv_step_backward("head", d, cache, grads)
        d = self._decoder_backward(d, cache, grads)
        # d is now a list of per-encoder-block output grads (skip slots)
        carried = None
        for i in reversed(range(len(self.config.encoder))):
            total = d[i] if carried is None else d[i] + carried
            total = self._conv_step_backward(f"enc{i}.temporal", total, cache, grads)
            carried = self._conv_step_backward(f"enc{i}.spatial", total, cache, grads)
        return grads, carried

    def _decoder_backward(self, d: np.ndarray, cache: dict, grads: dict):
        cfg = self.config
        dskips = [None] * len(cfg.encoder)
        for j in reversed(range(len(cfg.decoder))):
            st = cfg.decoder[j]
            d = self._conv_step_backward(f"dec{j}.conv", d, cache, grads)
            if st.skip_block is not None:
                main_c, skip_c = cache[f"dec{j}.split"]
                d_main = d[..., :main_c]
                d_skip = d[..., main_c:]
                d_skip = self._conv_step_backward(f"dec{j}.skip", d_skip, cache, grads)
                k = st.skip_block
                dskips[k] = d_skip if dskips[k] is None else dskips[k] + d_skip
                d = d_main
            d = K.trilinear_upsample_backward(d, cache[f"dec{j}.up.in"], st.scale).input
        d = self._pyramid_backward(d, cache, grads)
        last = len(cfg.encoder) - 1
        dskips[last] = d if dskips[last] is None else dskips[last] + d
        out = []
        for i, g in enumerate(dskips):
            if g is None:
                shape = cache[f"enc{i}.temporal.pre"].data.shape
                g = np.zeros(shape)
            out.append(g)
        return out

    def _pyramid_backward(self, d: np.ndarray, cache: dict, grads: dict) -> np.ndarray:
        cfg = self.config
        d = self._conv_step_backward("ppm.fuse", d, cache, grads)
        split = cache["ppm.split"]
        offsets = np.cumsum([0] + split)
        parts = [d[..., offsets[i]:offsets[i + 1]] for i in range(len(split))]
        dx = None

        def add(g):
            nonlocal dx
            dx = g if dx is None else dx + g

        idx = 0
        for rate in sorted(cfg.pyramid.spatial_rates):
            add(self._conv_step_backward(f"ppm.rate{rate}", parts[idx], cache, grads))
            idx += 1
        if cfg.pyramid.include_unit_branch:
            add(self._conv_step_backward("ppm.unit", parts[idx], cache, grads))
            idx += 1
        if cfg.pyramid.include_frame_features:
            g = K.broadcast_spatial_backward(parts[idx], cache["ppm.ff.broadcast.in"]).input
            g = self._conv_step_backward("ppm.ff.proj", g, cache, grads)
            add(K.avg_pool_spatial_full_backward(g, cache["ppm.ff.pool.in"]).input)
            idx += 1
        return dx

    # -- clip-level classifier head -----------------------------------------

    def action_forward(self, features: ClipTensor, mask: np.ndarray,
                       keep_cache: bool = False) -> ActionResult:
        """Classify a clip from mask-guided crops of decoder features.

        For each frame, the largest connected foreground region of the mask
        picks a tight box; the feature crop under that box is resized to a
        fixed square, crops are averaged over frames, and a linear layer
        produces clip-level logits. Frames with an empty mask fall back to
        the whole frame and are reported in `fallback_frames`.
        """
        if not self.config.action_classes:
            raise ConfigError("this network was configured without an action head")
        feat = features.data
        if feat.ndim != 4:
            raise ShapeError("action head expects unbatched (h, w, t, c) features")
        h, w, t, c = feat.shape
        m = np.asarray(mask)
        if m.shape != (h, w, t):
            raise ShapeError(f"mask shape {m.shape} does not match features {(h, w, t)}")
        r = self.config.action_crop
        crops = []
        crop_shapes: list[tuple[int, ...]] = []
        boxes: list[tuple[int, int, int, int]] = []
        fallback = []
        for k in range(t):
            labeled = postproc.connected_components(m[:, :, k] != 0)
            region = postproc.max_area_region(labeled)
            if region is None:
                box = (0, 0, h - 1, w - 1)
                fallback.append(k)
            else:
                box = region.bbox
            boxes.append(box)
            top, left, bottom, right = box
            crop = feat[top:bottom + 1, left:right + 1, k:k + 1, :]
            crop_shapes.append(crop.shape)
            crops.append(K.resize_trilinear(ClipTensor(crop, validate=False), (r, r, 1)).data)
        mean = np.mean(crops, axis=0)  # (r, r, 1, c)
        flat = mean.reshape(-1)
        weight = self.weights["action.fc.weight"]
        bias = self.weights["action.fc.bias"]
        logits = flat @ weight + bias
        cache = None
        if keep_cache:
            cache = {"boxes": boxes, "flat": flat, "feat_shape": feat.shape,
                     "crop_shapes": crop_shapes}
        return ActionResult(logits=logits, fallback_frames=tuple(fallback), cache=cache)

    def action_backward(self, dlogits: np.ndarray, cache: dict):
        """Gradients of the classifier head: (grads, dfeatures).

        The box selection is treated as constant routing; gradients flow
        through the crop, resize, frame average, and linear layer.
        """
        weight = self.weights["action.fc.weight"]
        d = np.asarray(dlogits, dtype=np.float64)
        grads = {
            "action.fc.weight": np.outer(cache["flat"], d),
            "action.fc.bias": d.copy(),
        }
        h, w, t, c = cache["feat_shape"]
        r = self.config.action_crop
        dmean = (weight @ d).reshape(r, r, 1, c)
        dfeat = np.zeros((h, w, t, c))
        for k, box in enumerate(cache["boxes"]):
            top, left, bottom, right = box
            crop_shape = cache["crop_shapes"][k]
            dcrop = K.resize_trilinear_backward(
                dmean / t, ClipTensor(np.zeros(crop_shape), validate=False), (r, r, 1)
            ).input
            dfeat[top:bottom + 1, left:right + 1, k:k + 1, :] += dcrop
        return grads, dfeat
