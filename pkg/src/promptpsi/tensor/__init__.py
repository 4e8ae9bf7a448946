"""Minimal float64 tensor engine with reverse-mode autodiff."""
from .core import (ShapeError, Tensor, add, as_tensor, backward, bias_add, concat,
                   expand, gelu, grad, grad_enabled, l2_normalize, layer_norm, matmul,
                   mean, mse_loss, mul, no_grad, permute, straight_through_zero, power_normalize, relu, reshape, scale,
                   sigmoid, slice_, softmax, sub, sum_, take, tanh, transpose)
from .gradcheck import grad_check
from .kernels import BACKEND
from .optim import Adam

__all__ = [
    "ShapeError", "Tensor", "add", "as_tensor", "backward", "bias_add", "concat",
    "expand", "gelu", "grad", "grad_enabled", "l2_normalize", "layer_norm", "matmul",
    "mean", "mse_loss", "mul", "no_grad", "permute", "straight_through_zero", "power_normalize", "relu", "reshape", "scale",
    "sigmoid", "slice_", "softmax", "sub", "sum_", "take", "tanh", "transpose",
    "grad_check", "BACKEND", "Adam",
]
