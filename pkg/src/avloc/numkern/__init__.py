"""Dense-matrix numeric kernel with reverse-mode differentiation."""

from .tape import (
    Tensor,
    constant,
    parameter,
    no_grad,
    add,
    sub,
    mul,
    div,
    matmul,
    maximum,
    neg,
    exp,
    log,
    sqrt,
    sigmoid,
    relu,
    softplus,
    tsum,
    row_max,
    softmax_rows,
    masked_softmax,
    concat_rows,
    concat_cols,
    slice_rows,
    slice_cols,
    transpose,
    mean_all,
    l2_normalize_rows,
    linear,
    layer_norm,
    dropout,
)
from .gradcheck import finite_difference_gradient, check_gradients, GradCheckReport

__all__ = [
    "Tensor", "constant", "parameter", "no_grad",
    "add", "sub", "mul", "div", "matmul", "maximum", "neg",
    "exp", "log", "sqrt", "sigmoid", "relu", "softplus",
    "tsum", "row_max", "softmax_rows", "masked_softmax",
    "concat_rows", "concat_cols", "slice_rows", "slice_cols", "transpose",
    "mean_all", "l2_normalize_rows", "linear", "layer_norm", "dropout",
    "finite_difference_gradient", "check_gradients", "GradCheckReport",
]
