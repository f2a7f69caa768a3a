"""Region similarity J and contour accuracy F for binary video masks."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from streamseg.errors import DataError, ShapeError
from streamseg.io import mask_read

BOUNDARY_FRACTION = 0.008


def _pair(op: str, pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(op, "prediction and ground truth resolutions differ", pred.shape, gt.shape)
    return pred, gt


def region_j(pred, gt) -> float:
    pred, gt = _pair("region_j", pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_map(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour.

    Neighbours outside the image do not count, so a mask touching the
    border is not outlined along the border.
    """
    m = np.asarray(mask, dtype=bool)
    bg_nb = np.zeros_like(m)
    bg_nb[1:, :] |= ~m[:-1, :]
    bg_nb[:-1, :] |= ~m[1:, :]
    bg_nb[:, 1:] |= ~m[:, :-1]
    bg_nb[:, :-1] |= ~m[:, 1:]
    return m & bg_nb


def default_tolerance(shape) -> int:
    diag = math.hypot(shape[0], shape[1])
    return max(1, int(math.floor(BOUNDARY_FRACTION * diag + 0.5)))


def disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return r[:, None] ** 2 + r[None, :] ** 2 <= radius * radius


def boundary_f(pred, gt, tolerance_px: int | None = None) -> float:
    """F-measure of boundary pixels matched within a Euclidean tolerance."""
    pred, gt = _pair("boundary_f", pred, gt)
    tol = default_tolerance(pred.shape) if tolerance_px is None else int(tolerance_px)
    bp, bg = boundary_map(pred), boundary_map(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    if tol > 0:
        st = disk(tol)
        near_g = ndimage.binary_dilation(bg, structure=st)
        near_p = ndimage.binary_dilation(bp, structure=st)
    else:
        near_g, near_p = bg, bp
    precision = (bp & near_g).sum() / n_p
    recall = (bg & near_p).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass
class SequenceScore:
    J: list[float]
    F: list[float]
    evaluated: list[int]    # frame indices that enter the means

    @property
    def J_mean(self) -> float:
        return float(np.mean([self.J[i] for i in self.evaluated]))

    @property
    def F_mean(self) -> float:
        return float(np.mean([self.F[i] for i in self.evaluated]))

    @property
    def JF_mean(self) -> float:
        return (self.J_mean + self.F_mean) / 2.0

    def to_report(self) -> dict:
        return {
            "per_frame": [{"frame": i, "J": j, "F": f, "evaluated": i in self.evaluated}
                          for i, (j, f) in enumerate(zip(self.J, self.F))],
            "J_mean": self.J_mean,
            "F_mean": self.F_mean,
            "JF_mean": self.JF_mean,
        }


def evaluated_frames(count: int) -> list[int]:
    """First and last frame are left out once there are at least three."""
    return list(range(1, count - 1)) if count >= 3 else list(range(count))


def evaluate_masks(preds, gts) -> SequenceScore:
    if len(preds) != len(gts):
        raise DataError(f"prediction has {len(preds)} frames, ground truth {len(gts)}")
    if len(gts) == 0:
        raise DataError("no frames to evaluate")
    js = [region_j(p, g) for p, g in zip(preds, gts)]
    fs = [boundary_f(p, g) for p, g in zip(preds, gts)]
    return SequenceScore(js, fs, evaluated_frames(len(gts)))


def _as_binary(m: np.ndarray) -> np.ndarray:
    return m if m.dtype == bool else m > 0.5


def evaluate_sequence(pred_dir, gt_dir) -> SequenceScore:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gt_files = sorted(gt_dir.glob("*.pgm"))
    if not gt_files:
        raise DataError(f"no ground-truth masks in {gt_dir}")
    missing = [f.name for f in gt_files if not (pred_dir / f.name).exists()]
    if missing:
        raise DataError(f"{pred_dir}: missing predicted frames {', '.join(missing)}")
    preds = [_as_binary(mask_read(pred_dir / f.name)) for f in gt_files]
    gts = [_as_binary(mask_read(f)) for f in gt_files]
    return evaluate_masks(preds, gts)


def write_report(path, report: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
