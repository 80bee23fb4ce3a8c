from .autodiff import (
    ShapeError,
    Tape,
    TapeConsumedError,
    Var,
    add,
    bce_with_logits,
    concat_channels,
    conv2d,
    dense,
    global_avg_pool,
    max_pool2,
    relu,
    scale,
    sigmoid,
    upsample_nearest2,
)
from .gradcheck import GradCheckReport, ModelLoss, grad_check
from .optim import Optimizer, OptimizerConfig
from .params import Param, ParamSet

__all__ = [
    "ShapeError", "Tape", "TapeConsumedError", "Var",
    "add", "bce_with_logits", "concat_channels", "conv2d", "dense",
    "global_avg_pool", "max_pool2", "relu", "scale", "sigmoid",
    "upsample_nearest2",
    "GradCheckReport", "ModelLoss", "grad_check",
    "Optimizer", "OptimizerConfig",
    "Param", "ParamSet",
]
