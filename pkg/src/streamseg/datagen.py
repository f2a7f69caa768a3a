"""Synthetic video with exact ground truth: frames, main-object masks, dense
flow and instance proposals.

All motion is integer-valued (integer velocities, camera pan and rounded
sinusoidal offsets), so every surface point lands exactly on a pixel in the
next frame and the flow field is exact, not an approximation.

Appearance cues are set up so that neither stream alone solves the task:
objects (the main one and the distractors) share one texture family that
differs from the background, so appearance alone cannot tell the main
object from a distractor; only the main object moves relative to the scene.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from streamseg.errors import DataError
from streamseg.io import (flo_read, flo_write, mask_read, mask_write, ppm_read, ppm_write,
                          read_proposals, write_proposals)

SHAPES = ("rectangle", "ellipse")
MARGIN = 2


@dataclass
class ObjectSpec:
    shape: str
    size: tuple[int, int]                    # (height, width)
    position: tuple[int, int]                # top-left (y, x) at frame 0
    velocity: tuple[int, int] = (0, 0)       # px / frame
    amplitude: tuple[int, int] = (0, 0)      # sinusoidal offset amplitude, px
    period: int = 0                          # frames; 0 disables the sinusoid
    texture_seed: int = 0
    color_lo: tuple[float, float, float] = (0.2, 0.2, 0.2)
    color_hi: tuple[float, float, float] = (0.8, 0.8, 0.8)

    def offset(self, t: int) -> tuple[int, int]:
        dy = self.velocity[0] * t
        dx = self.velocity[1] * t
        if self.period > 0:
            s = math.sin(2.0 * math.pi * t / self.period)
            dy += int(round(self.amplitude[0] * s))
            dx += int(round(self.amplitude[1] * s))
        return dy, dx


@dataclass
class SceneSpec:
    height: int
    width: int
    frames: int
    seed: int
    main: ObjectSpec
    distractors: list[ObjectSpec] = field(default_factory=list)
    pan: tuple[int, int] = (0, 0)            # camera pan (dy, dx) px / frame
    background_lo: tuple[float, float, float] = (0.3, 0.3, 0.3)
    background_hi: tuple[float, float, float] = (0.6, 0.6, 0.6)
    corrupt_proposals: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["main"] = _object_from_dict(d["main"])
        d["distractors"] = [_object_from_dict(o) for o in d.get("distractors", [])]
        for key in ("pan", "background_lo", "background_hi"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _object_from_dict(d: dict) -> ObjectSpec:
    d = dict(d)
    for key in ("size", "position", "velocity", "amplitude", "color_lo", "color_hi"):
        if key in d:
            d[key] = tuple(d[key])
    return ObjectSpec(**d)


@dataclass
class GeneratedSequence:
    frames: np.ndarray          # [T, H, W, 3] uint8
    masks: np.ndarray           # [T, H, W] bool, main object only
    flows: np.ndarray           # [T, H, W, 2] float32 (u, v), frame t -> t+1
    labels: np.ndarray          # [T, H, W] int: 0 background, 1 main, 2.. distractors
    proposals: list[list[dict]]  # per frame: {"mask", "objectness", "box", "label"}


def value_noise(rng: np.random.Generator, height: int, width: int, cell: int, octaves: int = 3) -> np.ndarray:
    """Multi-octave value noise in [0, 1]; each octave halves the lattice cell."""
    total = np.zeros((height, width))
    weight = 0.0
    amp = 1.0
    for o in range(octaves):
        c = max(1, cell >> o)
        gh, gw = height // c + 2, width // c + 2
        lattice = rng.random((gh, gw))
        ys = np.arange(height) / c
        xs = np.arange(width) / c
        y0, x0 = ys.astype(int), xs.astype(int)
        fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
        # smoothstep fade keeps lattice seams invisible
        fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
        a = lattice[np.ix_(y0, x0)]
        b = lattice[np.ix_(y0, x0 + 1)]
        cc = lattice[np.ix_(y0 + 1, x0)]
        d = lattice[np.ix_(y0 + 1, x0 + 1)]
        total += amp * ((a * (1 - fx) + b * fx) * (1 - fy) + (cc * (1 - fx) + d * fx) * fy)
        weight += amp
        amp *= 0.5
    return total / weight


def _colorize(v: np.ndarray, lo, hi) -> np.ndarray:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return lo + v[..., None] * (hi - lo)


def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    if shape == "rectangle":
        return np.ones((h, w), dtype=bool)
    if shape == "ellipse":
        y = (np.arange(h) + 0.5 - h / 2) / (h / 2)
        x = (np.arange(w) + 0.5 - w / 2) / (w / 2)
        return y[:, None] ** 2 + x[None, :] ** 2 <= 1.0
    raise DataError(f"unknown shape {shape!r}")


def validate_spec(spec: SceneSpec) -> None:
    if spec.height <= 0 or spec.width <= 0 or spec.height % 8 or spec.width % 8:
        raise DataError(f"resolution must be a positive multiple of 8, got {spec.height}x{spec.width}")
    if spec.frames < 1:
        raise DataError("frame count must be at least 1")
    for obj in [spec.main, *spec.distractors]:
        if obj.shape not in SHAPES:
            raise DataError(f"unknown shape {obj.shape!r}")
        if min(obj.size) < 1:
            raise DataError(f"object size must be positive, got {obj.size}")
    m = spec.main
    for t in range(spec.frames + 1):
        dy, dx = m.offset(t)
        y0, x0 = m.position[0] + dy, m.position[1] + dx
        if (y0 < MARGIN or x0 < MARGIN or y0 + m.size[0] > spec.height - MARGIN
                or x0 + m.size[1] > spec.width - MARGIN):
            raise DataError(f"main object leaves the frame interior at frame {t}")


def _paste(canvas: np.ndarray, labels: np.ndarray, label: int, tex: np.ndarray, shape: np.ndarray,
           y0: int, x0: int) -> None:
    H, W = labels.shape
    h, w = shape.shape
    ya, yb = max(0, y0), min(H, y0 + h)
    xa, xb = max(0, x0), min(W, x0 + w)
    if ya >= yb or xa >= xb:
        return
    sub = shape[ya - y0:yb - y0, xa - x0:xb - x0]
    canvas[ya:yb, xa:xb][sub] = tex[ya - y0:yb - y0, xa - x0:xb - x0][sub]
    labels[ya:yb, xa:xb][sub] = label


def _distractor_pos(spec: SceneSpec, obj: ObjectSpec, t: int) -> tuple[int, int]:
    # distractors live in scene coordinates, so they follow the camera pan
    dy, dx = obj.offset(t)
    return obj.position[0] + dy + spec.pan[0] * t, obj.position[1] + dx + spec.pan[1] * t


def _main_pos(spec: SceneSpec, t: int) -> tuple[int, int]:
    dy, dx = spec.main.offset(t)
    return spec.main.position[0] + dy, spec.main.position[1] + dx


def box_of(mask: np.ndarray) -> list[int]:
    """Tight box ``[x0, y0, x1, y1]`` with exclusive upper corner."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DataError("box of an empty mask")
    return [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]


def _corrupt(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    from scipy import ndimage

    radius = int(rng.integers(1, 3))
    st = ndimage.generate_binary_structure(2, 1)
    if rng.random() < 0.5:
        out = ndimage.binary_dilation(mask, st, iterations=radius)
    else:
        out = ndimage.binary_erosion(mask, st, iterations=radius)
    return out if out.any() else mask


def generate_sequence(spec: SceneSpec) -> GeneratedSequence:
    validate_spec(spec)
    H, W, T = spec.height, spec.width, spec.frames
    rng = np.random.default_rng(spec.seed)
    py, px = spec.pan

    # background lives in scene coordinates; frame t shows it shifted by pan * t
    bh, bw = H + abs(py) * T, W + abs(px) * T
    bg = _colorize(value_noise(rng, bh, bw, cell=16), spec.background_lo, spec.background_hi)
    oy, ox = (py * T if py > 0 else 0), (px * T if px > 0 else 0)

    objects = [spec.main, *spec.distractors]
    textures, shapes = [], []
    for obj in objects:
        trng = np.random.default_rng(obj.texture_seed)
        textures.append(_colorize(value_noise(trng, obj.size[0], obj.size[1], cell=4), obj.color_lo, obj.color_hi))
        shapes.append(_shape_mask(obj.shape, *obj.size))

    frames = np.empty((T, H, W, 3), dtype=np.uint8)
    labels = np.zeros((T, H, W), dtype=np.int32)
    flows = np.empty((T, H, W, 2), dtype=np.float32)
    for t in range(T):
        ys = oy - py * t
        xs = ox - px * t
        canvas = bg[ys:ys + H, xs:xs + W].copy()
        lab = labels[t]
        # painter's order: distractors first, main object on top
        for i, obj in enumerate(spec.distractors):
            y0, x0 = _distractor_pos(spec, obj, t)
            _paste(canvas, lab, i + 2, textures[i + 1], shapes[i + 1], y0, x0)
        y0, x0 = _main_pos(spec, t)
        _paste(canvas, lab, 1, textures[0], shapes[0], y0, x0)
        frames[t] = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)

        u = np.full((H, W), float(px))
        v = np.full((H, W), float(py))
        nxt, cur = _main_pos(spec, t + 1), _main_pos(spec, t)
        u[lab == 1] = nxt[1] - cur[1]
        v[lab == 1] = nxt[0] - cur[0]
        for i, obj in enumerate(spec.distractors):
            nxt, cur = _distractor_pos(spec, obj, t + 1), _distractor_pos(spec, obj, t)
            u[lab == i + 2] = nxt[1] - cur[1]
            v[lab == i + 2] = nxt[0] - cur[0]
        flows[t, ..., 0] = u
        flows[t, ..., 1] = v

    masks = labels == 1
    prop_rng = np.random.default_rng([spec.seed, 1])
    proposals: list[list[dict]] = []
    for t in range(T):
        frame_props = []
        main = masks[t]
        if spec.corrupt_proposals:
            main = _corrupt(main, prop_rng)
        frame_props.append({"mask": main, "objectness": float(prop_rng.uniform(0.7, 1.0)),
                            "box": box_of(main), "label": 1})
        for i in range(len(spec.distractors)):
            m = labels[t] == i + 2
            score = float(prop_rng.uniform(0.3, 0.9))
            if m.any():
                frame_props.append({"mask": m, "objectness": score, "box": box_of(m), "label": i + 2})
        proposals.append(frame_props)
    return GeneratedSequence(frames, masks, flows, labels, proposals)


def _object_palette(rng: np.random.Generator):
    base = rng.uniform(0.15, 0.95, size=3)
    lo = np.clip(base - rng.uniform(0.3, 0.45), 0.0, 1.0)
    hi = np.clip(base + rng.uniform(0.3, 0.45), 0.0, 1.0)
    return tuple(float(v) for v in lo), tuple(float(v) for v in hi)


def random_scene(seed: int, height: int = 64, width: int = 64, frames: int = 40,
                 distractors: tuple[int, int] = (1, 3), max_pan: int = 1,
                 corrupt_proposals: bool = False) -> SceneSpec:
    """Sample a valid scene: a moving main object, static distractors and a
    slow camera pan."""
    rng = np.random.default_rng(seed)
    pan = (int(rng.integers(-max_pan, max_pan + 1)), int(rng.integers(-max_pan, max_pan + 1)))
    g = float(rng.uniform(0.3, 0.7))
    bg_lo = tuple(float(v) for v in np.clip(g - 0.12 + rng.uniform(-0.08, 0.08, 3), 0, 1))
    bg_hi = tuple(float(v) for v in np.clip(g + 0.12 + rng.uniform(-0.08, 0.08, 3), 0, 1))

    def obj(lo_size, hi_size, position, velocity=(0, 0), amplitude=(0, 0), period=0):
        lo, hi = _object_palette(rng)
        size = (int(rng.integers(lo_size, hi_size + 1)), int(rng.integers(lo_size, hi_size + 1)))
        return ObjectSpec(shape=SHAPES[int(rng.integers(2))], size=size, position=position,
                          velocity=velocity, amplitude=amplitude, period=period,
                          texture_seed=int(rng.integers(2**31)), color_lo=lo, color_hi=hi)

    for _ in range(1000):
        main = obj(12, 20, (0, 0))
        vel = (int(rng.integers(-1, 2)), int(rng.integers(-1, 2)))
        amp = (int(rng.integers(0, 6)), int(rng.integers(0, 6)))
        period = int(rng.integers(12, 31)) if max(amp) > 0 else 0
        if vel == pan and period == 0:
            continue  # would be static relative to the scene
        main.velocity, main.amplitude, main.period = vel, amp, period
        offs = np.array([main.offset(t) for t in range(frames + 1)])
        lo = MARGIN - offs.min(axis=0)
        hi = np.array([height, width]) - MARGIN - np.array(main.size) - offs.max(axis=0)
        if np.any(hi < lo):
            continue
        main.position = (int(rng.integers(lo[0], hi[0] + 1)), int(rng.integers(lo[1], hi[1] + 1)))
        break
    else:
        raise DataError(f"could not place a main object for seed {seed}")

    n_d = int(rng.integers(distractors[0], distractors[1] + 1))
    dlist = []
    # distractors are static in the scene; place them so they stay mostly visible
    for _ in range(n_d):
        d = obj(8, 16, (0, 0))
        cy = height / 2 - pan[0] * frames / 2
        cx = width / 2 - pan[1] * frames / 2
        d.position = (int(cy + rng.uniform(-0.35, 0.35) * height - d.size[0] / 2),
                      int(cx + rng.uniform(-0.35, 0.35) * width - d.size[1] / 2))
        dlist.append(d)
    spec = SceneSpec(height=height, width=width, frames=frames, seed=int(rng.integers(2**31)), main=main,
                     distractors=dlist, pan=pan, background_lo=bg_lo, background_hi=bg_hi,
                     corrupt_proposals=corrupt_proposals)
    validate_spec(spec)
    return spec


def preprocess(frame: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """uint8 [H,W,3] and (u,v) [H,W,2] to network inputs [3,H,W] and [2,H,W].

    RGB maps to ``value / 127.5 - 1``; the flow is divided by its largest
    per-pixel magnitude in the frame (left alone when that is zero).
    """
    rgb = np.asarray(frame, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)
    f = np.asarray(flow, dtype=np.float32)
    peak = float(np.sqrt((f.astype(np.float64) ** 2).sum(axis=-1)).max()) if f.size else 0.0
    if peak > 0.0:
        f = (f / np.float32(peak)).astype(np.float32)
    return np.ascontiguousarray(rgb.transpose(2, 0, 1)), np.ascontiguousarray(f.transpose(2, 0, 1))


# -- dataset layout ---------------------------------------------------------

@dataclass
class LoadedSequence:
    name: str
    frames: np.ndarray
    flows: np.ndarray
    masks: np.ndarray
    proposals: list[list[dict]]  # per frame, each with a loaded "mask" array


def write_sequence(seq_dir, spec: SceneSpec, seq: GeneratedSequence) -> None:
    import json

    seq_dir = Path(seq_dir)
    records = []
    for t in range(spec.frames):
        ppm_write(seq_dir / "frames" / f"{t:05d}.ppm", seq.frames[t])
        flo_write(seq_dir / "flows" / f"{t:05d}.flo", seq.flows[t])
        mask_write(seq_dir / "masks" / f"{t:05d}.pgm", seq.masks[t])
        for i, p in enumerate(seq.proposals[t]):
            rel = f"proposals/{t:05d}_{i:02d}.pgm"
            mask_write(seq_dir / rel, p["mask"])
            records.append({"frame": t, "mask": rel, "objectness": p["objectness"], "box": p["box"]})
    write_proposals(seq_dir / "proposals.jsonl", records)
    (seq_dir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")


def _numbered(d: Path, suffix: str) -> list[Path]:
    if not d.is_dir():
        raise DataError(f"missing directory {d}")
    files = sorted(d.glob(f"*{suffix}"))
    for i, f in enumerate(files):
        if f.stem != f"{i:05d}":
            raise DataError(f"{d}: expected {i:05d}{suffix}, found {f.name}")
    return files


def load_sequence(seq_dir, with_proposals: bool = True) -> LoadedSequence:
    seq_dir = Path(seq_dir)
    frame_files = _numbered(seq_dir / "frames", ".ppm")
    flow_files = _numbered(seq_dir / "flows", ".flo")
    mask_files = _numbered(seq_dir / "masks", ".pgm")
    if not frame_files:
        raise DataError(f"{seq_dir}: no frames")
    if not (len(frame_files) == len(flow_files) == len(mask_files)):
        raise DataError(f"{seq_dir}: frame/flow/mask counts differ "
                        f"({len(frame_files)}/{len(flow_files)}/{len(mask_files)})")
    frames = np.stack([ppm_read(f) for f in frame_files])
    flows = np.stack([flo_read(f) for f in flow_files])
    masks = np.stack([mask_read(f) for f in mask_files])
    proposals: list[list[dict]] = [[] for _ in frame_files]
    if with_proposals and (seq_dir / "proposals.jsonl").exists():
        for rec in read_proposals(seq_dir / "proposals.jsonl"):
            t = int(rec["frame"])
            if not 0 <= t < len(frame_files):
                raise DataError(f"{seq_dir}: proposal for frame {t} out of range")
            proposals[t].append({**rec, "mask": mask_read(seq_dir / rec["mask"]), "path": rec["mask"]})
    return LoadedSequence(seq_dir.name, frames, flows, masks, proposals)


def list_sequences(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    seqs = sorted(p for p in root.iterdir() if (p / "frames").is_dir())
    if not seqs:
        raise DataError(f"no sequences under {root}")
    return seqs


def generate_dataset(root, count: int, seed: int, height: int = 64, width: int = 64, frames: int = 40,
                     distractors: tuple[int, int] = (1, 3), corrupt_proposals: bool = False,
                     prefix: str = "seq") -> list[Path]:
    root = Path(root)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        spec = random_scene(int(rng.integers(2**31)), height, width, frames, distractors,
                            corrupt_proposals=corrupt_proposals)
        d = root / f"{prefix}{i:03d}"
        write_sequence(d, spec, generate_sequence(spec))
        out.append(d)
    return out
