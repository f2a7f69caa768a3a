"""Differentiable ops on NCHW tensors.

Conventions shared by every op here:

* convolutions use "same" zero padding, so a stride ``s`` maps a spatial size
  ``n`` to ``ceil(n / s)``; odd padding puts the extra row/column at the
  bottom/right;
* bilinear resizing samples at half-pixel centers (no corner alignment) and
  clamps at the border;
* layer norm divides by ``sqrt(var + 1e-5)``.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from streamseg.errors import ShapeError
from streamseg.numerics.tensor import Tensor, record_op

LN_EPS = 1e-5


def _check_4d(op: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(op, "expected a 4-D NCHW tensor", x.shape)


def same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out_size, pad_before, pad_after)`` for "same" padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


# -- convolution core -------------------------------------------------------
#
# Columns are laid out tap-major: [G, kh*kw*Cg, N*Ho*Wo]. Each tap is then a
# single strided slice copy of a channel-major padded input, which is far
# cheaper than gathering kw-wide windows.

def _pad_channel_major(x: np.ndarray, pt: int, pb: int, pl: int, pr: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + pt + pb, w + pl + pr), dtype=x.dtype)
    xp[:, :, pt:pt + h, pl:pl + w] = x.transpose(1, 0, 2, 3)
    return xp


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, groups: int):
    n, c, h, w = x.shape
    ho, pt, pb = same_padding(h, kh, stride)
    wo, pl, pr = same_padding(w, kw, stride)
    xp = _pad_channel_major(x, pt, pb, pl, pr)
    cg = c // groups
    cols = np.empty((groups, kh, kw, cg, n, ho, wo), dtype=x.dtype)
    xg = xp.reshape(groups, cg, n, xp.shape[2], xp.shape[3])
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xg[..., i:i + hs:stride, j:j + ws:stride]
    cols = cols.reshape(groups, kh * kw * cg, n * ho * wo)
    return cols, (ho, wo, pt, pl, xp.shape[2], xp.shape[3])


def _wmat(w: np.ndarray, groups: int) -> np.ndarray:
    """Kernel as [G, Og, kh*kw*Cg] matching the tap-major column order."""
    co, cg, kh, kw = w.shape
    return w.reshape(groups, co // groups, cg, kh, kw).transpose(0, 1, 3, 4, 2).reshape(groups, co // groups, -1)


def _wmat_inverse(dwm: np.ndarray, w_shape) -> np.ndarray:
    co, cg, kh, kw = w_shape
    groups = dwm.shape[0]
    return dwm.reshape(groups, co // groups, kh, kw, cg).transpose(0, 1, 4, 2, 3).reshape(w_shape)


def _gemm_out(cols: np.ndarray, w: np.ndarray, groups: int, n: int, ho: int, wo: int) -> np.ndarray:
    out = np.matmul(_wmat(w, groups), cols)  # [G, Og, N*Ho*Wo]
    og = out.shape[1]
    return out.reshape(groups * og, n, ho, wo).transpose(1, 0, 2, 3)


def _grad_to_mat(g: np.ndarray, groups: int) -> np.ndarray:
    """[N, Co, Ho, Wo] -> [G, Og, N*Ho*Wo]."""
    n, co, ho, wo = g.shape
    return g.transpose(1, 0, 2, 3).reshape(groups, co // groups, n * ho * wo)


def _input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride: int, groups: int, geom) -> np.ndarray:
    """Adjoint of the im2col convolution: scatter ``g`` back through ``w``."""
    n, c, h, wd = x_shape
    ho, wo, pt, pl, hp, wp = geom
    co, cg, kh, kw = w.shape
    d = np.matmul(_wmat(w, groups).transpose(0, 2, 1), _grad_to_mat(g, groups))
    d = d.reshape(groups, kh, kw, cg, n, ho, wo)
    dxp = np.zeros((groups, cg, n, hp, wp), dtype=g.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[..., i:i + hs:stride, j:j + ws:stride] += d[:, i, j]
    dx = dxp[..., pt:pt + h, pl:pl + wd].reshape(c, n, h, wd)
    return dx.transpose(1, 0, 2, 3)


def _conv_checks(op: str, x: Tensor, w: Tensor, b: Tensor | None, stride: int, groups: int, in_axis: int) -> None:
    _check_4d(op, x)
    if w.data.ndim != 4:
        raise ShapeError(op, "kernel must be 4-D", w.shape)
    if stride < 1 or int(stride) != stride:
        raise ShapeError(op, f"stride must be a positive int, got {stride}")
    c = x.shape[1]
    if c % groups:
        raise ShapeError(op, f"input channels not divisible by groups={groups}", x.shape, w.shape)
    expect = c // groups if in_axis == 1 else c
    if w.shape[in_axis] != expect:
        raise ShapeError(op, "kernel channel count does not match input", x.shape, w.shape)
    out_ch = w.shape[0] if in_axis == 1 else w.shape[1]
    if b is not None and b.shape != (out_ch,):
        raise ShapeError(op, "bias must have one entry per output channel", w.shape, b.shape)


# Stride-1 fast path: on the flattened padded grid every tap is a contiguous
# shift, so gathering columns and scattering their gradient are plain slices.
# Outputs are computed at every grid position and the wrap-around rows and
# columns are cropped away; their gradient is zero by construction.

def _flat_geometry(h: int, w: int, kh: int, kw: int):
    _, pt, pb = same_padding(h, kh, 1)
    _, pl, pr = same_padding(w, kw, 1)
    hp, wp = h + pt + pb, w + pl + pr
    return pt, pb, pl, pr, hp, wp


def _flat_cols(x: np.ndarray, kh: int, kw: int, groups: int):
    n, c, h, w = x.shape
    pt, pb, pl, pr, hp, wp = _flat_geometry(h, w, kh, kw)
    cg = c // groups
    xf = _pad_channel_major(x, pt, pb, pl, pr).reshape(groups, cg, n * hp * wp)
    length = n * hp * wp - ((kh - 1) * wp + (kw - 1))
    cols = np.empty((groups, kh, kw, cg, length), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            cols[:, i, j] = xf[..., off:off + length]
    return cols.reshape(groups, kh * kw * cg, length), length


def _grid_grad(g: np.ndarray, groups: int, hp: int, wp: int, length: int) -> np.ndarray:
    """Place [N, Co, H, W] gradient on the padded grid as [G, Og, length]."""
    n, co, h, w = g.shape
    full = np.zeros((co, n, hp, wp), dtype=g.dtype)
    full[:, :, :h, :w] = g.transpose(1, 0, 2, 3)
    return full.reshape(groups, co // groups, n * hp * wp)[..., :length]


def _conv_s1(x: Tensor, w: Tensor, b: Tensor | None, groups: int) -> Tensor:
    n, c, h, wd_ = x.shape
    co, cg, kh, kw = w.shape
    pt, pb, pl, pr, hp, wp = _flat_geometry(h, wd_, kh, kw)
    cols, length = _flat_cols(x.data, kh, kw, groups)
    flat = np.zeros((co, n * hp * wp), dtype=x.dtype)
    flat[:, :length] = np.matmul(_wmat(w.data, groups), cols).reshape(co, length)
    out = flat.reshape(co, n, hp, wp)[:, :, :h, :wd_].transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    wdata = w.data

    def backward(g):
        gg = _grid_grad(g, groups, hp, wp, length)
        dw = _wmat_inverse(np.matmul(gg, cols.transpose(0, 2, 1)), wdata.shape)
        dx = None
        if x.requires_grad:
            d = np.matmul(_wmat(wdata, groups).transpose(0, 2, 1), gg).reshape(groups, kh, kw, cg, length)
            dxf = np.zeros((groups, cg, n * hp * wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    dxf[..., off:off + length] += d[:, i, j]
            dx = dxf.reshape(c, n, hp, wp)[:, :, pt:pt + h, pl:pl + wd_].transpose(1, 0, 2, 3)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("conv2d", out, inputs, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, groups: int = 1) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``w`` [Co, C/groups, kh, kw]."""
    _conv_checks("conv2d", x, w, b, stride, groups, in_axis=1)
    if w.shape[0] % groups:
        raise ShapeError("conv2d", "output channels not divisible by groups", w.shape)
    if stride == 1:
        return _conv_s1(x, w, b, groups)
    n = x.shape[0]
    kh, kw = w.shape[2:]
    cols, geom = _im2col(x.data, kh, kw, stride, groups)
    ho, wo = geom[:2]
    out = _gemm_out(cols, w.data, groups, n, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]
    xs, wd = x.shape, w.data

    def backward(g):
        dw = _wmat_inverse(np.matmul(_grad_to_mat(g, groups), cols.transpose(0, 2, 1)), wd.shape)
        dx = None
        if x.requires_grad:
            dx = _input_grad(g, wd, xs, stride, groups, geom)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("conv2d", out, inputs, backward)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Adjoint of a "same"-padded strided conv2d; output is exactly ``stride``x larger.

    ``w`` has shape [C_in, C_out, kh, kw], i.e. it is the kernel of the
    forward convolution that maps C_out channels back to C_in.
    """
    _conv_checks("conv2d_transpose", x, w, b, stride, 1, in_axis=0)
    n, c, h, wd_ = x.shape
    kh, kw = w.shape[2:]
    out_shape = (n, w.shape[1], h * stride, wd_ * stride)
    ho, pt, pb = same_padding(out_shape[2], kh, stride)
    wo, pl, pr = same_padding(out_shape[3], kw, stride)
    geom = (ho, wo, pt, pl, out_shape[2] + pt + pb, out_shape[3] + pl + pr)
    out = _input_grad(x.data, w.data, out_shape, stride, 1, geom)
    if b is not None:
        out = out + b.data[None, :, None, None]
    wdata = w.data

    def backward(g):
        cols, _ = _im2col(g, kh, kw, stride, 1)
        dx = None
        if x.requires_grad:
            dx = _gemm_out(cols, wdata, 1, n, h, wd_)
        dw = _wmat_inverse(np.matmul(_grad_to_mat(x.data, 1), cols.transpose(0, 2, 1)), wdata.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("conv2d_transpose", out, inputs, backward)


# -- resampling -------------------------------------------------------------

@lru_cache(maxsize=128)
def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear map [n_out, n_in] for 1-D half-pixel bilinear resampling."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, ratio: int) -> Tensor:
    _check_4d("resize_bilinear", x)
    if ratio < 1 or int(ratio) != ratio:
        raise ShapeError("resize_bilinear", f"ratio must be a positive int, got {ratio}")
    if ratio == 1:
        return identity(x)
    h, w = x.shape[2:]
    ah = bilinear_matrix(h, h * ratio, x.dtype.type)
    aw = bilinear_matrix(w, w * ratio, x.dtype.type)
    out = ah @ x.data @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return record_op("resize_bilinear", out, (x,), backward)


def identity(x: Tensor) -> Tensor:
    return record_op("identity", x.data, (x,), lambda g: (g,))


# -- normalization ----------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int = 1, eps: float = LN_EPS) -> Tensor:
    """Per-frame normalization over (C, H, W), then per-channel affine.

    With ``groups > 1`` the channel axis is split into contiguous blocks that
    are normalized independently, which is how several gates share one call.
    """
    _check_4d("layer_norm", x)
    n, c, h, w = x.shape
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError("layer_norm", "gain/bias must have one entry per channel", x.shape, gain.shape, bias.shape)
    if c % groups:
        raise ShapeError("layer_norm", f"channels not divisible by groups={groups}", x.shape)
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gain.data[None, :, None, None] + bias.data[None, :, None, None]
    gd = gain.data

    def backward(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3))
        dbias = g.sum(axis=(0, 2, 3))
        dxhat = (g * gd[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return dx.reshape(n, c, h, w), dgain, dbias

    return record_op("layer_norm", out, (x, gain, bias), backward)


# -- pointwise --------------------------------------------------------------

def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, "operands must have equal shapes", a.shape, b.shape)


def sigmoid(x: Tensor) -> Tensor:
    # e^x / (1 + e^x) on the negative side keeps tiny gate values nonzero
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return record_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record_op("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, slope * x.data)
    return record_op("leaky_relu", y, (x,), lambda g: (np.where(pos, g, slope * g),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return record_op("hadamard", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, factor: float, offset: float = 0.0) -> Tensor:
    """``factor * x + offset``; ``scale(z, -1, 1)`` gives ``1 - z``."""
    return record_op("scale", x.data * factor + offset, (x,), lambda g: (g * factor,))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat_channels", "nothing to concatenate")
    ref = xs[0].shape
    for t in xs:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError("concat_channels", "non-channel dims must agree", ref, t.shape)
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return record_op("concat_channels", out, xs, backward)


def concat_frames(xs: Sequence[Tensor]) -> Tensor:
    """Stack 4-D tensors along the leading (frame-batch) axis."""
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat_frames", "nothing to concatenate")
    ref = xs[0].shape[1:]
    for t in xs:
        if t.shape[1:] != ref:
            raise ShapeError("concat_frames", "trailing dims must agree", xs[0].shape, t.shape)
    out = np.concatenate([t.data for t in xs], axis=0)
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return record_op("concat_frames", out, xs, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_4d("slice_channels", x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError("slice_channels", f"bad channel range [{start}, {stop})", x.shape)
    out = x.data[:, start:stop]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return record_op("slice_channels", out, (x,), backward)


def permute_channels(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(x.shape[1])):
        raise ShapeError("permute_channels", "perm must be a permutation of the channel axis", x.shape, perm.shape)
    inv = np.argsort(perm)
    return record_op("permute_channels", x.data[:, perm], (x,), lambda g: (g[:, inv],))


def pointwise(kind: str, *inputs: Tensor, **kwargs) -> Tensor:
    """Dispatch by name: sigmoid, tanh, hadamard, add, concat_channels, scale."""
    table = {
        "sigmoid": sigmoid,
        "tanh": tanh,
        "hadamard": hadamard,
        "add": add,
        "sub": sub,
        "scale": scale,
        "leaky_relu": leaky_relu,
    }
    if kind == "concat_channels":
        return concat_channels(inputs)
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise op {kind!r}") from None
    return fn(*inputs, **kwargs)
