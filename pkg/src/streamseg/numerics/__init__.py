"""Minimal NCHW tensor kernel with tape-based reverse-mode autodiff."""
from streamseg.numerics.gradcheck import grad_check
from streamseg.numerics.ops import (
    add,
    bilinear_matrix,
    concat_channels,
    concat_frames,
    conv2d,
    conv2d_transpose,
    hadamard,
    identity,
    layer_norm,
    leaky_relu,
    permute_channels,
    pointwise,
    resize_bilinear,
    same_padding,
    scale,
    sigmoid,
    slice_channels,
    sub,
    tanh,
)
from streamseg.numerics.tensor import Parameters, Tape, Tensor, active_tape, record_op

__all__ = [
    "Parameters",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "bilinear_matrix",
    "concat_channels",
    "concat_frames",
    "conv2d",
    "conv2d_transpose",
    "grad_check",
    "hadamard",
    "identity",
    "layer_norm",
    "leaky_relu",
    "permute_channels",
    "pointwise",
    "record_op",
    "resize_bilinear",
    "same_padding",
    "scale",
    "sigmoid",
    "slice_channels",
    "sub",
    "tanh",
]
