"""Loss, Adam with global-norm clipping, and the stateful training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from streamseg import numerics as nx
from streamseg.datagen import LoadedSequence
from streamseg.errors import DataError, FormatError, NonFiniteError, ShapeError
from streamseg.io import load_checkpoint, save_checkpoint
from streamseg.numerics import Parameters, Tape, Tensor, record_op
from streamseg.numerics.ops import bilinear_matrix
from streamseg.streams import ModelConfig, PixelModel, detach_state

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


def bce_loss(prob: Tensor, gt) -> Tensor:
    """Pixel-mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    gt = np.asarray(gt)
    if gt.shape != prob.shape:
        raise ShapeError("bce_loss", "prediction and target shapes differ", prob.shape, gt.shape)
    if not np.isin(gt, (0, 1)).all():
        raise DataError("bce_loss: target values must be 0 or 1")
    y = gt.astype(prob.dtype)
    p = np.clip(prob.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))
    inside = (prob.data >= PROB_CLAMP) & (prob.data <= 1.0 - PROB_CLAMP)

    def backward(g):
        d = (p - y) / (p * (1 - p)) / n
        return (np.where(inside, d, 0.0).astype(prob.dtype) * g,)

    return record_op("bce_loss", np.asarray(loss, dtype=prob.dtype), (prob,), backward)


@dataclass
class StepReport:
    step: int
    lr: float
    grad_norm: float
    scale: float


class Adam:
    """Adam with bias correction, preceded by global gradient-norm clipping.

    The learning rate halves every ``halve_every`` completed steps.
    """

    def __init__(self, params: Parameters, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float = 5.0, halve_every: int = 2000):
        self.params = params
        self.lr0 = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.halve_every = halve_every
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr_at(self, completed_steps: int) -> float:
        if self.halve_every <= 0:
            return self.lr0
        return self.lr0 * 0.5 ** (completed_steps // self.halve_every)

    def step(self) -> StepReport:
        grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in self.params.items()}
        sq = 0.0
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {k!r} at step {self.t + 1}")
            sq += float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
        norm = float(np.sqrt(sq))
        scale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        lr = self.lr_at(self.t)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * p.dtype.type(scale)
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)
        return StepReport(self.t, lr, norm, scale)


def optimizer_step(opt: Adam) -> StepReport:
    return opt.step()


@dataclass
class TrainConfig:
    lr: float = 1e-4
    clip_norm: float = 5.0
    halve_every: int = 2000
    steps: int = 1000
    T: int = 20
    seed: int = 0
    crop_fraction: float = 0.875
    batch_size: int = 1
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def crop_resize(frames: np.ndarray, flows: np.ndarray, masks: np.ndarray, fraction: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cut one window of ``fraction`` of each side at a random offset from
    every frame of a video and scale it back to full size.

    Flow vectors are rescaled by the zoom factor; masks are resized as
    coverage and re-thresholded at 0.5.
    """
    t, h, w = masks.shape
    ch, cw = int(round(h * fraction)), int(round(w * fraction))
    if ch >= h and cw >= w:
        return frames.astype(np.float32), flows.astype(np.float32), masks
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    ah = bilinear_matrix(ch, h, np.float32)
    aw = bilinear_matrix(cw, w, np.float32)

    def zoom(a):  # [T, ch, cw, C] -> [T, h, w, C]
        return np.einsum("yi,tijc,xj->tyxc", ah, a, aw, optimize=True)

    f = zoom(frames[:, y0:y0 + ch, x0:x0 + cw].astype(np.float32))
    fl = zoom(flows[:, y0:y0 + ch, x0:x0 + cw].astype(np.float32))
    fl[..., 0] *= w / cw
    fl[..., 1] *= h / ch
    m = zoom(masks[:, y0:y0 + ch, x0:x0 + cw, None].astype(np.float32))[..., 0] > 0.5
    return f, fl, m


def video_tensors(frames: np.ndarray, flows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch preprocessing: [T,H,W,3] 0..255 and [T,H,W,2] to [T,3,H,W], [T,2,H,W]."""
    rgb = (np.asarray(frames, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).transpose(0, 3, 1, 2)
    fl = np.asarray(flows, dtype=np.float32)
    peak = np.sqrt((fl.astype(np.float64) ** 2).sum(axis=-1)).reshape(len(fl), -1).max(axis=1)
    peak = np.where(peak > 0, peak, 1.0).astype(np.float32)
    fl = (fl / peak[:, None, None, None]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(rgb), np.ascontiguousarray(fl)


def _windows(length: int, T: int) -> list[tuple[int, int]]:
    return [(s, min(s + T, length)) for s in range(0, length, T)]


def write_model(path, model: PixelModel, extra: dict | None = None) -> None:
    meta = {"model": model.config.to_dict()}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.params.state_dict(), meta)


def read_model(path) -> PixelModel:
    state, meta = load_checkpoint(path)
    if "model" not in meta:
        raise FormatError(path, "checkpoint header lacks a model configuration")
    model = PixelModel(ModelConfig(**meta["model"]))
    model.params.load_state_dict(state)
    return model


def train(model: PixelModel, dataset: Sequence[LoadedSequence], config: TrainConfig,
          out_dir=None, seed: int | None = None, log_path=None, callback=None) -> list[dict]:
    """Optimize ``model`` in place; returns the per-step log.

    Videos are grouped ``batch_size`` at a time along the batch axis. Each
    group is swept in windows of ``T`` frames; the forward motion state is
    carried (without gradient) from one window to the next and reset to
    zeros when a new group starts. One window is one optimizer step.
    """
    if not dataset:
        raise DataError("training set is empty")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    h, w = dataset[0].masks.shape[1:]
    model.check_resolution(h, w)
    for seq in dataset:
        if seq.masks.shape[1:] != (h, w):
            raise DataError(f"sequence {seq.name} has resolution {seq.masks.shape[1:]}, expected {(h, w)}")
    opt = Adam(model.params, lr=config.lr, clip_norm=config.clip_norm, halve_every=config.halve_every)
    out_dir = Path(out_dir) if out_dir is not None else None
    history: list[dict] = []
    log_file = None
    writer = None
    if log_path is not None:
        log_path = Path(log_path)
        try:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            log_file = open(log_path, "w", newline="")
        except OSError as exc:
            raise FormatError(log_path, f"cannot open loss log ({exc.strerror})") from exc
        writer = csv.writer(log_file)
        writer.writerow(["step", "loss", "lr", "grad_norm"])
    bsz = max(1, min(config.batch_size, len(dataset)))
    try:
        while opt.t < config.steps:
            order = rng.permutation(len(dataset))
            for g0 in range(0, len(order) - bsz + 1, bsz):
                group = [dataset[i] for i in order[g0:g0 + bsz]]
                length = min(len(s.masks) for s in group)
                rgbs, flows, masks = [], [], []
                for s in group:
                    f, fl, m = crop_resize(s.frames[:length], s.flows[:length], s.masks[:length],
                                           config.crop_fraction, rng)
                    r, fl = video_tensors(f, fl)
                    rgbs.append(r)
                    flows.append(fl)
                    masks.append(m)
                rgb_b = np.stack(rgbs, axis=1)    # [T, N, 3, H, W]
                flow_b = np.stack(flows, axis=1)
                mask_b = np.stack(masks, axis=1)  # [T, N, H, W]
                state = None
                for a, b in _windows(length, config.T):
                    model.params.zero_grad()
                    with Tape() as tape:
                        prob, new_state = model.forward([Tensor(x) for x in rgb_b[a:b]],
                                                        [Tensor(x) for x in flow_b[a:b]], state)
                        target = mask_b[a:b].reshape(-1, 1, h, w)
                        loss = bce_loss(prob, target)
                    tape.backward(loss)
                    rep = opt.step()
                    state = detach_state(new_state) if new_state is not None else None
                    row = {"step": rep.step, "loss": float(loss.data), "lr": rep.lr, "grad_norm": rep.grad_norm}
                    history.append(row)
                    if writer is not None:
                        writer.writerow([row["step"], repr(row["loss"]), repr(row["lr"]), repr(row["grad_norm"])])
                    if callback is not None:
                        callback(row)
                    if out_dir is not None and config.checkpoint_every and rep.step % config.checkpoint_every == 0:
                        write_model(out_dir / f"checkpoint_{rep.step:06d}.ckpt", model, {"step": rep.step})
                    if opt.t >= config.steps:
                        break
                if opt.t >= config.steps:
                    break
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        write_model(out_dir / "model.ckpt", model, {"step": opt.t, "train": config.to_dict()})
    return history


def predict_sequence(model: PixelModel, frames: np.ndarray, flows: np.ndarray, T: int = 20) -> np.ndarray:
    """Foreground probabilities [T,H,W] for a whole video, with state hand-off
    between consecutive windows of ``T`` frames."""
    rgb, fl = video_tensors(frames, flows)
    out = []
    state = None
    for a, b in _windows(len(rgb), T):
        prob, state = model.forward([Tensor(x[None]) for x in rgb[a:b]],
                                    [Tensor(x[None]) for x in fl[a:b]], state)
        out.append(prob.data[:, 0])
    return np.concatenate(out, axis=0).astype(np.float64)
