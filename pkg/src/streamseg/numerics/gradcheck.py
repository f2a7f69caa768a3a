"""Finite-difference verification of analytic backward passes."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from streamseg.errors import NonFiniteError
from streamseg.numerics.tensor import Tape, Tensor, record_op

FD_STEP = 1e-5
MAX_COORDS = 10_000


def _as_outputs(result) -> list[Tensor]:
    if isinstance(result, Tensor):
        return [result]
    return [t for t in result if isinstance(t, Tensor)]


def _projected(fn, tensors, weights) -> float:
    outs = _as_outputs(fn())
    total = 0.0
    for o, wgt in zip(outs, weights):
        if not np.all(np.isfinite(o.data)):
            raise NonFiniteError("grad_check: non-finite forward output")
        total += float(np.sum(o.data * wgt))
    return total


def grad_check(
    fn: Callable[[], "Tensor | Sequence[Tensor]"],
    tensors: Sequence[Tensor],
    seed: int = 0,
    step: float = FD_STEP,
    max_coords: int = MAX_COORDS,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` is a closure that recomputes the op from the current contents of
    ``tensors`` (inputs and parameters alike, all float64). Outputs are
    reduced to a scalar through fixed seeded random weights. Per tensor, the
    error is ``max|analytic - numeric| / max(max|numeric|, max|analytic|)``,
    so coordinates with vanishing gradient do not dominate through roundoff.

    When the total coordinate count exceeds ``max_coords``, a seeded random
    subset of that size is probed.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 tensors, got {t.dtype} for {t.name or t}")
        t.data = np.array(t.data, dtype=np.float64)  # writable, contiguous
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        outs = _as_outputs(fn())
    weights = [rng.standard_normal(o.shape) for o in outs]
    for o in outs:
        if not np.all(np.isfinite(o.data)):
            raise NonFiniteError("grad_check: non-finite forward output")
    _backward_multi(tape, outs, weights)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]

    sizes = [t.size for t in tensors]
    total = sum(sizes)
    if total > max_coords:
        flat = np.sort(rng.choice(total, size=max_coords, replace=False))
    else:
        flat = np.arange(total)
    offsets = np.cumsum([0] + sizes)

    numeric = [np.full(t.shape, np.nan) for t in tensors]
    for idx in flat:
        k = int(np.searchsorted(offsets, idx, side="right") - 1)
        local = int(idx - offsets[k])
        buf = tensors[k].data.reshape(-1)
        orig = buf[local]
        buf[local] = orig + step
        f_plus = _projected(fn, tensors, weights)
        buf[local] = orig - step
        f_minus = _projected(fn, tensors, weights)
        buf[local] = orig
        numeric[k].reshape(-1)[local] = (f_plus - f_minus) / (2 * step)

    worst = 0.0
    for a, nmr in zip(analytic, numeric):
        probed = ~np.isnan(nmr)
        if not probed.any():
            continue
        av, nv = a[probed], nmr[probed]
        if not (np.all(np.isfinite(av)) and np.all(np.isfinite(nv))):
            raise NonFiniteError("grad_check: non-finite gradient")
        scale = max(np.abs(nv).max(), np.abs(av).max())
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(av - nv).max() / scale))
    return worst


def _backward_multi(tape: Tape, outs: list[Tensor], weights: list[np.ndarray]) -> None:
    if len(outs) == 1:
        tape.backward(outs[0], weights[0])
        return
    # join the outputs into one scalar so a single reverse sweep covers all of them
    def backward(g):
        return tuple(g * w for w in weights)

    total = sum(float(np.sum(o.data * w)) for o, w in zip(outs, weights))
    with tape:
        joined = record_op("project", np.array(total), tuple(outs), backward)
    tape.backward(joined)
