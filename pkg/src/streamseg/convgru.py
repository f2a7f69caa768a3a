"""Convolutional GRU cell built from asymmetric (separable) convolutions.

Every gate transform is the sum of two separable paths over the same input:
order A applies a ``1 x k`` kernel and then a ``k x 1`` kernel, order B the
reverse. Each order emits ``hidden / 2`` channels; the two halves are stacked
and layer-normalized together. Input and state streams are normalized
separately before they are summed inside the gate nonlinearity.

The state update follows the cell's definition literally::

    h_t = z * h_{t-1} + (1 - z) * h_cand

so the update gate ``z`` weighs the *old* state. This is the reverse of the
textbook GRU convention and is kept on purpose.

For speed the three gates that read the same tensor are evaluated with one
fused first convolution and one grouped second convolution. The weights of
each gate and each order are still independent parameters; they are only
stored stacked along the output-channel axis in the order (r, z, c).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from streamseg import numerics as nx
from streamseg.errors import PreconditionError, ShapeError
from streamseg.numerics import Parameters, Tensor

GATES_X = ("r", "z", "c")
GATES_H = ("r", "z")


def asymmetric_block(
    s: Tensor,
    wa1: Tensor,
    wa2: Tensor,
    wb1: Tensor,
    wb2: Tensor,
    gain: Tensor,
    bias: Tensor,
    gates: int = 1,
    stride: int = 1,
) -> Tensor:
    """Stacked separable convolutions of one stream, layer-normalized per gate.

    Kernel shapes for ``gates`` gates of ``hidden`` channels each
    (``half = hidden // 2``)::

        wa1 [gates*half, C, 1, k]     wa2 [gates*half, half, k, 1]
        wb1 [gates*half, C, k, 1]     wb2 [gates*half, half, 1, k]

    The stride, if any, is applied by the first convolution of each order.
    Output channels are laid out gate by gate as ``[A-half ; B-half]``.
    """
    if s.shape[1] != wa1.shape[1] or s.shape[1] != wb1.shape[1]:
        raise ShapeError("asymmetric_block", "stream channels do not match kernels", s.shape, wa1.shape)
    half = wa1.shape[0] // gates
    a = nx.conv2d(nx.conv2d(s, wa1, stride=stride), wa2, groups=gates)
    b = nx.conv2d(nx.conv2d(s, wb1, stride=stride), wb2, groups=gates)
    stacked = nx.concat_channels([a, b])
    if gates > 1:
        perm = []
        for g in range(gates):
            perm.extend(range(g * half, (g + 1) * half))
            perm.extend(range((gates + g) * half, (gates + g + 1) * half))
        stacked = nx.permute_channels(stacked, perm)
    return nx.layer_norm(stacked, gain, bias, groups=gates)


@dataclass
class CellState:
    h: Tensor


class ConvGruCell:
    """One ConvGRU at one spatial scale.

    Parameters live in the shared registry under ``<prefix>.<stream>.<name>``
    where stream is ``x`` (input), ``h`` (state, gates r and z) or ``q``
    (reset state, candidate).
    """

    def __init__(self, params: Parameters, prefix: str, in_channels: int, hidden: int,
                 k: int = 7, stride: int = 1, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if k % 2 != 1:
            raise PreconditionError(f"kernel size must be odd, got {k}")
        if hidden % 2:
            raise PreconditionError(f"hidden channel count must be even, got {hidden}")
        self.prefix = prefix
        self.in_channels = in_channels
        self.hidden = hidden
        self.k = k
        self.stride = stride
        rng = rng if rng is not None else np.random.default_rng(0)
        half = hidden // 2

        def uniform(shape, fan_in):
            a = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-a, a, size=shape).astype(dtype)

        def stream(name, c_in, gates):
            n = gates * half
            params.add(f"{prefix}.{name}.a1", uniform((n, c_in, 1, k), c_in * k))
            params.add(f"{prefix}.{name}.a2", uniform((n, half, k, 1), half * k))
            params.add(f"{prefix}.{name}.b1", uniform((n, c_in, k, 1), c_in * k))
            params.add(f"{prefix}.{name}.b2", uniform((n, half, 1, k), half * k))
            params.add(f"{prefix}.{name}.gain", np.ones(gates * hidden, dtype=dtype))
            params.add(f"{prefix}.{name}.bias", np.zeros(gates * hidden, dtype=dtype))

        stream("x", in_channels, len(GATES_X))
        stream("h", hidden, len(GATES_H))
        stream("q", hidden, 1)
        self.params = params

    def _p(self, stream: str, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{stream}.{name}"]

    def _block(self, stream: str, s: Tensor, gates: int, stride: int) -> Tensor:
        p = self._p
        return asymmetric_block(s, p(stream, "a1"), p(stream, "a2"), p(stream, "b1"), p(stream, "b2"),
                                p(stream, "gain"), p(stream, "bias"), gates=gates, stride=stride)

    def state_size(self, height: int, width: int) -> tuple[int, int]:
        """Spatial size of this cell's state for an input of the given size."""
        return -(-height // self.stride), -(-width // self.stride)

    def zero_state(self, n: int, height: int, width: int, dtype=np.float32) -> CellState:
        hs, ws = self.state_size(height, width)
        return CellState(Tensor(np.zeros((n, self.hidden, hs, ws), dtype=dtype)))

    def step(self, x: Tensor, prev: CellState, return_gates: bool = False):
        h = prev.h
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.prefix}.step", "input channel mismatch", x.shape, (self.in_channels,))
        hd = self.hidden
        gx = self._block("x", x, len(GATES_X), self.stride)
        if gx.shape[2:] != h.shape[2:] or gx.shape[0] != h.shape[0]:
            raise ShapeError(f"{self.prefix}.step", "strided input features and state differ in scale",
                             gx.shape, h.shape)
        gh = self._block("h", h, len(GATES_H), 1)
        r = nx.sigmoid(nx.add(nx.slice_channels(gx, 0, hd), nx.slice_channels(gh, 0, hd)))
        z = nx.sigmoid(nx.add(nx.slice_channels(gx, hd, 2 * hd), nx.slice_channels(gh, hd, 2 * hd)))
        q = nx.hadamard(r, h)
        cq = self._block("q", q, 1, 1)
        cand = nx.tanh(nx.add(nx.slice_channels(gx, 2 * hd, 3 * hd), cq))
        h_new = nx.add(nx.hadamard(z, h), nx.hadamard(nx.scale(z, -1.0, 1.0), cand))
        state = CellState(h_new)
        if return_gates:
            return state, {"r": r, "z": z, "cand": cand}
        return state

    def gate_kernels(self, stream: str, gate: str) -> dict[str, np.ndarray]:
        """Views of one gate's kernels and layer-norm affine for one stream."""
        gates = {"x": GATES_X, "h": GATES_H, "q": ("c",)}[stream]
        g = gates.index(gate)
        half, hd = self.hidden // 2, self.hidden
        sl = slice(g * half, (g + 1) * half)
        out = {n: self._p(stream, n).data[sl] for n in ("a1", "a2", "b1", "b2")}
        out["gain"] = self._p(stream, "gain").data[g * hd:(g + 1) * hd]
        out["bias"] = self._p(stream, "bias").data[g * hd:(g + 1) * hd]
        return out


def gru_step(cell: ConvGruCell, x_t: Tensor, h_prev: CellState) -> CellState:
    return cell.step(x_t, h_prev)
