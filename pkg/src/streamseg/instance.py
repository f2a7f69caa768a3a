"""Instance-aware refinement of the pixel-level map.

Each proposal is scored by how well it agrees with the pixel-level map
(a soft IoU) times its objectness. The best proposal, restricted to those
near the position predicted by a constant-velocity Kalman tracker, is
boosted and everything else is halved.

Boxes are ``[x0, y0, x1, y1]`` in pixels with an exclusive upper corner, so
width is ``x1 - x0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from streamseg.errors import PreconditionError, ShapeError

BIN_THRESHOLD = 0.5
GATE_IOU = 0.1
COAST_LIMIT = 10


def binarize(pixel: np.ndarray) -> np.ndarray:
    """Foreground where the probability is strictly above 0.5."""
    return np.asarray(pixel) > BIN_THRESHOLD


@dataclass
class InstanceProposal:
    mask: np.ndarray
    objectness: float
    box: list[int] | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise PreconditionError("instance proposal mask is empty")
        if not 0.0 <= self.objectness <= 1.0:
            raise PreconditionError(f"objectness {self.objectness} outside [0, 1]")
        if self.box is None:
            ys, xs = np.nonzero(self.mask)
            self.box = [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]


def compute_iou(mask: np.ndarray, pixel: np.ndarray) -> float:
    """``sum(M_obj * M_pixel) / sum(max(M_obj, Bin(M_pixel)))``, 0 for an empty union."""
    mask = np.asarray(mask)
    pixel = np.asarray(pixel, dtype=np.float64)
    if mask.shape != pixel.shape:
        raise ShapeError("compute_iou", "mask and pixel map resolutions differ", mask.shape, pixel.shape)
    m = mask.astype(np.float64)
    den = np.maximum(m, binarize(pixel)).sum()
    if den == 0:
        return 0.0
    return float((m * pixel).sum() / den)


def score_proposals(proposals: Sequence[InstanceProposal], pixel: np.ndarray) -> np.ndarray:
    return np.array([compute_iou(p.mask, pixel) * p.objectness for p in proposals], dtype=np.float64)


def boost_mask(pixel: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Raise the map inside ``mask`` by its interior mean (capped at 1) and
    halve it everywhere else."""
    pixel = np.asarray(pixel, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pixel.shape:
        raise ShapeError("boost_mask", "mask and pixel map resolutions differ", mask.shape, pixel.shape)
    if not mask.any():
        raise PreconditionError("boost_mask: selected mask is empty")
    mu = pixel[mask].mean()
    return np.where(mask, np.minimum(pixel + mu, 1.0), pixel / 2.0)


def box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


# -- Kalman tracker ---------------------------------------------------------

def box_to_z(box) -> np.ndarray:
    x0, y0, x1, y1 = (float(v) for v in box)
    w, h = x1 - x0, y1 - y0
    return np.array([x0 + w / 2.0, y0 + h / 2.0, w * h, w / h])


def z_to_box(x: np.ndarray) -> list[float]:
    s, r = x[2], x[3]
    if s <= 0 or r <= 0:
        w = h = 0.0
    else:
        w = float(np.sqrt(s * r))
        h = s / w
    return [x[0] - w / 2.0, x[1] - h / 2.0, x[0] + w / 2.0, x[1] + h / 2.0]


F = np.eye(7)
F[0, 4] = F[1, 5] = F[2, 6] = 1.0
H = np.eye(4, 7)
Q = np.diag([1.0, 1.0, 1.0, 1e-2, 1e-1, 1e-1, 1e-4])
R = np.diag([1.0, 1.0, 10.0, 1e-2])
P0 = np.diag([1.0, 1.0, 10.0, 1e-2, 1e3, 1e3, 1e3])


def _check_cov(P: np.ndarray) -> None:
    if not np.all(np.isfinite(P)):
        raise PreconditionError("Kalman covariance is not finite")
    scale = max(1.0, float(np.abs(P).max()))
    if np.abs(P - P.T).max() > 1e-9 * scale:
        raise PreconditionError("Kalman covariance is not symmetric")
    if np.linalg.eigvalsh(P).min() < -1e-9 * scale:
        raise PreconditionError("Kalman covariance is not positive semi-definite")


@dataclass
class KalmanTrack:
    """Constant-velocity box track on state (cx, cy, area, aspect, vcx, vcy, v_area)."""

    x: np.ndarray
    P: np.ndarray = field(default_factory=lambda: P0.copy())
    misses: int = 0
    hits: int = 1

    @classmethod
    def from_box(cls, box) -> "KalmanTrack":
        return cls(np.concatenate([box_to_z(box), np.zeros(3)]))

    def copy(self) -> "KalmanTrack":
        return KalmanTrack(self.x.copy(), self.P.copy(), self.misses, self.hits)

    def predict(self) -> list[float]:
        _check_cov(self.P)
        if self.x[2] + self.x[6] <= 0:
            self.x[6] = 0.0  # the area may shrink towards zero, never below
        self.x = F @ self.x
        self.P = F @ self.P @ F.T + Q
        return z_to_box(self.x)

    def update(self, box) -> None:
        _check_cov(self.P)
        z = box_to_z(box)
        y = z - H @ self.x
        S = H @ self.P @ H.T + R
        K = np.linalg.solve(S, H @ self.P).T
        self.x = self.x + K @ y
        # Joseph form keeps the covariance symmetric and PSD
        I_KH = np.eye(7) - K @ H
        self.P = I_KH @ self.P @ I_KH.T + K @ R @ K.T
        self.misses = 0
        self.hits += 1

    @property
    def box(self) -> list[float]:
        return z_to_box(self.x)


def kalman_predict(track: KalmanTrack) -> tuple[list[float], KalmanTrack]:
    t = track.copy()
    return t.predict(), t


def kalman_update(track: KalmanTrack, box) -> KalmanTrack:
    t = track.copy()
    t.update(box)
    return t


def select_and_fuse(pixel: np.ndarray, proposals: Sequence[InstanceProposal],
                    track: KalmanTrack | None = None, gate_iou: float = GATE_IOU,
                    coast_limit: int = COAST_LIMIT) -> tuple[np.ndarray, KalmanTrack | None, int | None]:
    """One frame of instance-aware fusion.

    With a live track, only proposals whose box overlaps the predicted box
    by at least ``gate_iou`` compete; otherwise all do. The highest score
    wins (lowest index on ties) and is boosted. Without a winner the map is
    returned unchanged and the track coasts; a track that has coasted for
    more than ``coast_limit`` frames is dropped.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    track = track.copy() if track is not None else None
    if track is not None:
        pred = track.predict()
        gated = [i for i, p in enumerate(proposals) if box_iou(p.box, pred) >= gate_iou]
    else:
        gated = list(range(len(proposals)))
    if not gated:
        if track is not None:
            track.misses += 1
            if track.misses > coast_limit:
                track = None
        return pixel.copy(), track, None
    scores = score_proposals([proposals[i] for i in gated], pixel)
    chosen = gated[int(np.argmax(scores))]
    fused = boost_mask(pixel, proposals[chosen].mask)
    if track is None:
        track = KalmanTrack.from_box(proposals[chosen].box)
    else:
        track.update(proposals[chosen].box)
    return fused, track, chosen


def fuse_sequence(probs: np.ndarray, proposals: Sequence[Sequence[InstanceProposal]],
                  gate_iou: float = GATE_IOU, coast_limit: int = COAST_LIMIT):
    """Run :func:`select_and_fuse` over a video in frame order."""
    if len(probs) != len(proposals):
        raise ShapeError("fuse_sequence", "frame counts differ", (len(probs),), (len(proposals),))
    track = None
    out, chosen = [], []
    for p, props in zip(probs, proposals):
        fused, track, c = select_and_fuse(p, props, track, gate_iou, coast_limit)
        out.append(fused)
        chosen.append(c)
    return np.stack(out), chosen
