"""Inference, cost accounting, and benchmarking toolkit for ghost-style
lightweight detection networks, plus a simulated edge notification pipeline."""

from .tensor import (
    ConfigError,
    ConvAttrs,
    ConvParams,
    ShapeError,
    Tensor4,
    concat_channels,
    conv2d_fast,
    conv2d_naive,
    depthwise_conv,
    maxpool2d,
    pointwise_conv,
    silu,
    split_channels,
    upsample_nearest,
)
from .blocks import DetectOutput
from .netgraph import (
    CostReport,
    ModelGraph,
    builtin_configs,
    build_model,
    count_costs,
    infer_shapes,
    load_weights,
    parse_config,
    save_weights,
    serialize_config,
)
from .postprocess import Detection, GroundTruthBox, EvalResult, decode, evaluate_map, iou, nms

__all__ = [
    "ConfigError",
    "ConvAttrs",
    "ConvParams",
    "CostReport",
    "Detection",
    "DetectOutput",
    "EvalResult",
    "GroundTruthBox",
    "ModelGraph",
    "ShapeError",
    "Tensor4",
    "builtin_configs",
    "build_model",
    "concat_channels",
    "conv2d_fast",
    "conv2d_naive",
    "count_costs",
    "decode",
    "depthwise_conv",
    "evaluate_map",
    "infer_shapes",
    "iou",
    "load_weights",
    "maxpool2d",
    "nms",
    "parse_config",
    "pointwise_conv",
    "save_weights",
    "serialize_config",
    "silu",
    "split_channels",
    "upsample_nearest",
]
