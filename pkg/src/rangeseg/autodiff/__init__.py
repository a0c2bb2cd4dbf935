"""Self-contained reverse-mode autodiff used by the network and trainer."""

from .checkpoint import read_container, write_container
from .gradcheck import grad_check
from .ops import (
    BatchNormState,
    batch_norm,
    concat_channels,
    conv2d,
    relu,
    sigmoid,
    softmax_channels,
    tanh,
    tensor_sum,
    upsample_width2,
    warp_gather,
    warp_gather_multi,
    weighted_cross_entropy_op,
)
from .tensor import Parameter, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "BatchNormState",
    "Parameter",
    "Tensor",
    "backward",
    "batch_norm",
    "concat_channels",
    "conv2d",
    "grad_check",
    "is_grad_enabled",
    "no_grad",
    "read_container",
    "relu",
    "sigmoid",
    "softmax_channels",
    "tanh",
    "tensor_sum",
    "upsample_width2",
    "warp_gather",
    "warp_gather_multi",
    "weighted_cross_entropy_op",
    "write_container",
]
