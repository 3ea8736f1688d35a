"""Minimal float64 tensor core: autodiff, layer primitives, Adam, tensor files."""

from .tensor import Graph, NonFiniteError, ShapeError, Tensor, as_tensor, backward
from .ops import (
    abs, add, concat, conv2d, dense, div, exp, getitem, global_avg_pool, log, logsumexp,
    masked_softmax, matmul, mean, mul, neg, power, relu, reshape, sigmoid, softmax, sqrt,
    stack, sub, sum, take, tanh, transpose,
)
from .optim import Adam, AdamState, adam_step, he_uniform
from .io import load_array, load_tensor, save_tensor
from .gradcheck import check_gradients, directional_check, kink_margin, numeric_grad, relative_error
