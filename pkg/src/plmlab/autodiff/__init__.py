"""Minimal reverse-mode autodiff, MLP, losses and SGD."""

from plmlab.autodiff.functional import (
    EPS_CLIP,
    binary_cross_entropy,
    clamp,
    cross_entropy,
    exp,
    linear,
    log,
    relu,
    sigmoid,
    softmax,
    vecmat,
)
from plmlab.autodiff.nn import Mlp, predict_proba, softmax_np
from plmlab.autodiff.optim import SGD, OptimizerState, lr_schedule, sgd_step
from plmlab.autodiff.tensor import Tensor, as_tensor

__all__ = [
    "EPS_CLIP", "Mlp", "OptimizerState", "SGD", "Tensor", "as_tensor",
    "binary_cross_entropy", "clamp", "cross_entropy", "exp", "linear", "log",
    "lr_schedule", "predict_proba", "relu", "sgd_step", "sigmoid", "softmax",
    "softmax_np", "vecmat",
]
