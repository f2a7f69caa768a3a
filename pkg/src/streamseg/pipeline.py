"""Dataset-level stages: pixel-level inference, instance-aware fusion with
optional CRF refinement, and evaluation. Every stage communicates through
files only.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from streamseg.crf import CrfConfig, meanfield_refine
from streamseg.datagen import list_sequences, load_sequence
from streamseg.errors import DataError
from streamseg.instance import COAST_LIMIT, GATE_IOU, InstanceProposal, binarize, fuse_sequence
from streamseg.io import mask_read, mask_write, ppm_write
from streamseg.metrics import SequenceScore, evaluate_masks
from streamseg.streams import PixelModel
from streamseg.training import predict_sequence

PROBS = "probs"
MASKS = "masks"
OVERLAY = "overlay"


def infer_dataset(model: PixelModel, data_root, out_root, T: int = 20) -> list[Path]:
    """Write 16-bit probability maps ``<out>/<seq>/probs/%05d.pgm``."""
    written = []
    for seq_dir in list_sequences(data_root):
        seq = load_sequence(seq_dir, with_proposals=False)
        probs = predict_sequence(model, seq.frames, seq.flows, T=T)
        d = Path(out_root) / seq.name / PROBS
        for t, p in enumerate(probs):
            mask_write(d / f"{t:05d}.pgm", p, depth=16)
        written.append(d)
    return written


def read_probs(seq_dir, count: int) -> np.ndarray:
    d = Path(seq_dir) / PROBS
    missing = [f"{t:05d}.pgm" for t in range(count) if not (d / f"{t:05d}.pgm").exists()]
    if missing:
        raise DataError(f"{d}: missing probability maps {', '.join(missing)}")
    return np.stack([mask_read(d / f"{t:05d}.pgm").astype(np.float64) for t in range(count)])


def overlay(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = frame.astype(np.float64)
    out[mask] = 0.5 * out[mask] + 0.5 * np.array([255.0, 0.0, 0.0])
    return np.floor(out + 0.5).astype(np.uint8)


def fuse_arrays(probs: np.ndarray, frames: np.ndarray, proposals, crf: CrfConfig | None = None,
                gate_iou: float = GATE_IOU, coast_limit: int = COAST_LIMIT):
    """Binary masks for one video plus the fused maps and chosen proposal ids."""
    props = [[InstanceProposal(p["mask"], float(p["objectness"]), list(p["box"])) for p in frame_props]
             for frame_props in proposals]
    fused, chosen = fuse_sequence(probs, props, gate_iou, coast_limit)
    if crf is None:
        masks = binarize(fused)
    else:
        masks = np.stack([meanfield_refine(f, fr, crf) for f, fr in zip(fused, frames)])
    return masks, fused, chosen


def fuse_dataset(probs_root, data_root, out_root, crf: CrfConfig | None = None,
                 gate_iou: float = GATE_IOU, coast_limit: int = COAST_LIMIT) -> list[Path]:
    written = []
    for seq_dir in list_sequences(data_root):
        seq = load_sequence(seq_dir)
        probs = read_probs(Path(probs_root) / seq.name, len(seq.frames))
        masks, _, _ = fuse_arrays(probs, seq.frames, seq.proposals, crf, gate_iou, coast_limit)
        out = Path(out_root) / seq.name
        for t, (m, fr) in enumerate(zip(masks, seq.frames)):
            mask_write(out / MASKS / f"{t:05d}.pgm", m)
            ppm_write(out / OVERLAY / f"{t:05d}.ppm", overlay(fr, m))
        written.append(out)
    return written


def _pred_masks(pred_seq: Path, count: int) -> list[np.ndarray]:
    for sub in (MASKS, PROBS):
        d = pred_seq / sub
        if d.is_dir():
            missing = [f"{t:05d}.pgm" for t in range(count) if not (d / f"{t:05d}.pgm").exists()]
            if missing:
                raise DataError(f"{d}: missing predicted frames {', '.join(missing)}")
            out = []
            for t in range(count):
                m = mask_read(d / f"{t:05d}.pgm")
                out.append(m if m.dtype == bool else binarize(m))
            return out
    raise DataError(f"{pred_seq}: no {MASKS}/ or {PROBS}/ directory")


def evaluate_dataset(pred_root, gt_root, workers: int = 1) -> dict:
    """Per-sequence scores and their averages; the summary means are taken
    over sequences."""
    seq_dirs = list_sequences(gt_root)

    def one(seq_dir: Path) -> tuple[str, SequenceScore]:
        gt_files = sorted((seq_dir / MASKS).glob("*.pgm"))
        gts = [mask_read(f) for f in gt_files]
        preds = _pred_masks(Path(pred_root) / seq_dir.name, len(gts))
        return seq_dir.name, evaluate_masks(preds, gts)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, seq_dirs))
    else:
        results = [one(d) for d in seq_dirs]
    per_frame = []
    sequences = {}
    for name, score in results:
        rep = score.to_report()
        sequences[name] = {k: rep[k] for k in ("J_mean", "F_mean", "JF_mean")}
        per_frame.extend({"sequence": name, **row} for row in rep["per_frame"])
    j = float(np.mean([s["J_mean"] for s in sequences.values()]))
    f = float(np.mean([s["F_mean"] for s in sequences.values()]))
    return {"per_frame": per_frame, "J_mean": j, "F_mean": f, "JF_mean": (j + f) / 2.0,
            "sequences": sequences}
