"""Two-label fully connected CRF refined by mean-field iterations.

Pairwise terms are evaluated exactly by brute force, so the cost is
quadratic in the pixel count; images above 2**16 pixels are refused.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from streamseg.errors import CapacityError, ConfigError, ShapeError

MAX_PIXELS = 2 ** 16
PROB_CLAMP = 1e-7
_CACHE_LIMIT = 2 ** 24   # kernel entries kept in memory across iterations
_CHUNK = 2 ** 22         # kernel entries built at once otherwise


@dataclass
class CrfConfig:
    w1: float = 5.0             # appearance (bilateral) kernel weight
    w2: float = 3.0             # smoothness (spatial) kernel weight
    theta_alpha: float = 30.0   # px
    theta_beta: float = 5.0     # RGB units on a 0..255 scale
    theta_gamma: float = 3.0    # px
    iterations: int = 5

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ConfigError("CRF kernel scales must be positive")
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError("CRF kernel weights must be non-negative")
        if self.iterations < 1:
            raise ConfigError("CRF needs at least one iteration")

    def to_dict(self) -> dict:
        return asdict(self)


def unary_from_prob(prob: np.ndarray) -> np.ndarray:
    """Negative log-likelihoods [2, H, W] for (background, foreground)."""
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.stack([-np.log1p(-p), -np.log(p)])


def _kernel_rows(pos, col, rows: slice, cfg: CrfConfig) -> np.ndarray:
    dp = ((pos[rows, None, :] - pos[None, :, :]) ** 2).sum(-1)
    dc = ((col[rows, None, :] - col[None, :, :]) ** 2).sum(-1)
    k = cfg.w1 * np.exp(-dp / (2 * cfg.theta_alpha ** 2) - dc / (2 * cfg.theta_beta ** 2))
    if cfg.w2:
        k += cfg.w2 * np.exp(-dp / (2 * cfg.theta_gamma ** 2))
    return k


def _softmax2(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=0)
    e = np.exp(logits - m)
    return e / e.sum(axis=0)


def meanfield(unary: np.ndarray, rgb: np.ndarray, cfg: CrfConfig, return_history: bool = False):
    """Approximate marginals ``Q`` [2, H, W] after ``cfg.iterations`` updates.

    ``rgb`` is [H, W, 3] on a 0..255 scale. The update for each pixel is
    ``Q_i(l) ~ exp(-U_i(l) - sum_{j != i} k(i, j) Q_j(not l))``
    (Potts compatibility). Returns the final logits too, so callers can take
    an argmax without losing ties to normalization roundoff.
    """
    unary = np.asarray(unary, dtype=np.float64)
    if unary.ndim != 3 or unary.shape[0] != 2:
        raise ShapeError("meanfield", "unary must be [2, H, W]", unary.shape)
    h, w = unary.shape[1:]
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape != (h, w, 3):
        raise ShapeError("meanfield", "image and unary resolutions differ", rgb.shape, (h, w, 3))
    n = h * w
    if n > MAX_PIXELS:
        raise CapacityError(f"dense CRF limited to {MAX_PIXELS} pixels in brute-force mode, got {h}x{w}={n}")
    u = unary.reshape(2, n)
    logits = -u
    q = _softmax2(logits)
    history = [q.reshape(2, h, w)]
    if cfg.w1 == 0 and cfg.w2 == 0:
        return (q.reshape(2, h, w), logits.reshape(2, h, w), history) if return_history else \
            (q.reshape(2, h, w), logits.reshape(2, h, w))
    ys, xs = np.divmod(np.arange(n), w)
    pos = np.stack([ys, xs], axis=1).astype(np.float64)
    col = rgb.reshape(n, 3)
    self_k = cfg.w1 + cfg.w2
    cached = _kernel_rows(pos, col, slice(None), cfg) if n * n <= _CACHE_LIMIT else None
    step = max(1, _CHUNK // n)
    for _ in range(cfg.iterations):
        if cached is not None:
            msg = q @ cached.T
        else:
            msg = np.empty_like(q)
            for a in range(0, n, step):
                rows = slice(a, min(n, a + step))
                msg[:, rows] = q @ _kernel_rows(pos, col, rows, cfg).T
        msg -= self_k * q  # exclude j == i
        # penalty for label l is the mass the neighbours put on the other label
        logits = -u - msg[::-1]
        q = _softmax2(logits)
        history.append(q.reshape(2, h, w))
    if return_history:
        return q.reshape(2, h, w), logits.reshape(2, h, w), history
    return q.reshape(2, h, w), logits.reshape(2, h, w)


def meanfield_refine(prob: np.ndarray, rgb: np.ndarray, cfg: CrfConfig | None = None) -> np.ndarray:
    """Binary foreground mask; ties go to background."""
    cfg = cfg or CrfConfig()
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 2:
        raise ShapeError("meanfield_refine", "probability map must be 2-D", prob.shape)
    if prob.size > MAX_PIXELS:
        raise CapacityError(f"dense CRF limited to {MAX_PIXELS} pixels in brute-force mode, got {prob.size}")
    if cfg.w1 == 0 and cfg.w2 == 0:
        return prob > 0.5
    _, logits = meanfield(unary_from_prob(prob), rgb, cfg)
    return logits[1] > logits[0]
