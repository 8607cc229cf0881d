"""Separable 3D convolutional video segmentation.

An encoder-decoder network over short clips, built on factored 3D
convolutions (per-channel spatial-temporal filtering followed by 1x1x1
channel mixing) with a closed-form cost model, a dilated context pyramid,
training on synthetic moving shapes, and mask post-processing.
"""

from .costmodel import (
    CostReport,
    LayerCost,
    conv_macs,
    conv_out_dims,
    conv_params,
    cost_channelwise,
    cost_pointwise,
    cost_separable,
    cost_standard,
    network_cost,
    plan_costs,
    r2plus1d_reduction_ratio,
    separable_reduction_ratio,
)
from .counting import CountingContext, measured_macs
from .errors import ConfigError, ConfigWarning, FormatError, Sep3dError, ShapeError
from .io import read_clip, read_weights, write_clip, write_weights
from .kernels import (
    ConvSpec,
    WeightSet,
    conv3d_channelwise,
    conv3d_pointwise,
    conv3d_separable,
    conv3d_standard,
    m_prime,
    resize_trilinear,
    softmax_ce_loss,
    trilinear_upsample,
)
from .network import (
    DecoderStage,
    EncoderBlock,
    NetworkConfig,
    PyramidConfig,
    SegmentationNetwork,
    TrainConfig,
    bundled_config_path,
    layer_plan,
    load_config,
    save_config,
    weight_inventory,
)
from .postproc import (
    Detection,
    GroundTruthBox,
    LabeledMask,
    Region,
    bbox_from_mask,
    bbox_iou,
    connected_components,
    frame_map,
    mask_iou,
    max_area_region,
)
from .synth import SynthSpec, make_dataset, moving_shape_clip
from .tensor import ClipTensor, TensorShape
from .training import (
    EpochStats,
    EvalStats,
    TrainResult,
    adam_step,
    augment,
    evaluate,
    foreground_iou,
    init_adam,
    learning_rate,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # tensors and I/O
    "ClipTensor", "TensorShape", "read_clip", "write_clip",
    "read_weights", "write_weights",
    # kernels
    "ConvSpec", "WeightSet", "conv3d_standard", "conv3d_channelwise",
    "conv3d_pointwise", "conv3d_separable", "m_prime",
    "softmax_ce_loss", "resize_trilinear", "trilinear_upsample",
    # cost model
    "CostReport", "LayerCost", "conv_out_dims", "conv_macs", "conv_params",
    "cost_standard", "cost_channelwise", "cost_pointwise", "cost_separable",
    "separable_reduction_ratio", "r2plus1d_reduction_ratio",
    "plan_costs", "network_cost",
    # counters
    "CountingContext", "measured_macs",
    # network
    "NetworkConfig", "TrainConfig", "EncoderBlock", "PyramidConfig",
    "DecoderStage", "SegmentationNetwork", "layer_plan", "weight_inventory",
    "load_config", "save_config", "bundled_config_path",
    # training
    "EpochStats", "EvalStats", "TrainResult", "train", "evaluate",
    "augment", "adam_step", "init_adam", "learning_rate", "foreground_iou",
    # synthetic data
    "SynthSpec", "make_dataset", "moving_shape_clip",
    # post-processing
    "Region", "LabeledMask", "connected_components", "max_area_region",
    "bbox_from_mask", "mask_iou", "bbox_iou", "Detection", "GroundTruthBox",
    "frame_map",
    # errors
    "Sep3dError", "ConfigError", "ConfigWarning", "ShapeError", "FormatError",
]
