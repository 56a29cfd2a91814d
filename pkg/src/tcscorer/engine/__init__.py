"""Float32 tensor engine: autodiff, conv ops, normalization, Adam, checkpoints."""

from .checkpoint import CONFIG_ENTRY, load_checkpoint, save_checkpoint
from .conv import (
    conv2d,
    conv2d_output_extent,
    conv2d_transpose,
    conv2d_transpose_output_extent,
)
from .gradcheck import finite_diff_check
from .losses import (
    binary_cross_entropy,
    categorical_cross_entropy,
    mean_squared_error,
)
from .norm import (
    BN_EPS,
    SpectralState,
    batch_norm,
    spectral_normalize,
    spectral_sigma,
)
from .params import ParamStore, adam_step
from .tensor import (
    Tensor,
    add,
    add_channel_bias,
    add_row_bias,
    as_tensor,
    concat,
    grad_enabled,
    leaky_relu,
    log_clamped,
    matmul,
    mean_all,
    mean_axes,
    mul,
    neg,
    no_grad,
    pick_rows,
    relu,
    reshape,
    rsub,
    sigmoid,
    slice_rows,
    softmax,
    sub,
    sum_all,
    tanh,
)

__all__ = [
    "BN_EPS",
    "CONFIG_ENTRY",
    "ParamStore",
    "SpectralState",
    "Tensor",
    "adam_step",
    "add",
    "add_channel_bias",
    "add_row_bias",
    "as_tensor",
    "batch_norm",
    "binary_cross_entropy",
    "categorical_cross_entropy",
    "concat",
    "conv2d",
    "conv2d_output_extent",
    "conv2d_transpose",
    "conv2d_transpose_output_extent",
    "finite_diff_check",
    "grad_enabled",
    "leaky_relu",
    "load_checkpoint",
    "log_clamped",
    "matmul",
    "mean_all",
    "mean_axes",
    "mean_squared_error",
    "mul",
    "neg",
    "no_grad",
    "pick_rows",
    "relu",
    "reshape",
    "rsub",
    "save_checkpoint",
    "sigmoid",
    "slice_rows",
    "softmax",
    "spectral_normalize",
    "spectral_sigma",
    "sub",
    "sum_all",
    "tanh",
]
