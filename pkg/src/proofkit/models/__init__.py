"""Trainable scorers: the 3D conv net, the linear fusion layer, and the
serialized bundle tying them together."""

from .bundle import (
    FEATURE_LAYOUT_VERSION,
    FUSION_DIM,
    ModelBundle,
    build_fusion_input,
    load_bundle,
    save_bundle,
)
from .cnn import (
    CnnConfig,
    CnnParams,
    ModelError,
    bce_loss,
    cnn_forward,
    cnn_train,
    forward_logit,
    grad_check,
    init_params,
    loss_and_grads,
    sigmoid,
)
from .fusion import FusionParams, fusion_train, hinge_objective

__all__ = [
    "FEATURE_LAYOUT_VERSION",
    "FUSION_DIM",
    "ModelBundle",
    "build_fusion_input",
    "load_bundle",
    "save_bundle",
    "CnnConfig",
    "CnnParams",
    "ModelError",
    "bce_loss",
    "cnn_forward",
    "cnn_train",
    "forward_logit",
    "grad_check",
    "init_params",
    "loss_and_grads",
    "sigmoid",
    "FusionParams",
    "fusion_train",
    "hinge_objective",
]
