"""File formats: Middlebury .flo, binary PGM/PPM, proposal JSON Lines and
model checkpoints.

All readers raise :class:`FormatError` with the file path and, where it makes
sense, the byte offset at which the content stopped making sense.
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from streamseg.errors import DataError, FormatError

FLO_MAGIC = 202021.25
CKPT_MAGIC = b"SSEGCKPT"


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read file ({exc.strerror})") from exc


def _write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        # write-then-rename so a crash never leaves a half-written file behind
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise FormatError(path, f"cannot write file ({exc.strerror})") from exc


# -- optical flow -----------------------------------------------------------

def flo_write(path, flow: np.ndarray) -> None:
    """Write an [H, W, 2] (u, v) field in Middlebury format."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DataError(f"flow must have shape [H, W, 2], got {flow.shape}")
    h, w = flow.shape[:2]
    header = struct.pack("<fii", FLO_MAGIC, w, h)
    _write_bytes(path, header + flow.astype("<f4").tobytes())


def flo_read(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(path, "truncated magic", len(raw))
    (magic,) = struct.unpack_from("<f", raw, 0)
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(path, f"bad magic {magic!r}", 0)
    if len(raw) < 12:
        raise FormatError(path, "truncated size header", len(raw))
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0:
        raise FormatError(path, f"invalid dimensions {w}x{h}", 4)
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise FormatError(path, f"truncated payload: expected {need} bytes, found {len(raw)}", len(raw))
    if len(raw) > need:
        raise FormatError(path, f"{len(raw) - need} trailing bytes after payload", need)
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


# -- netpbm -----------------------------------------------------------------

def _netpbm_header(raw: bytes, path, expected: str) -> tuple[int, int, int, int]:
    """Parse ``magic width height maxval`` and return them with the data offset."""
    if raw[:2] != expected.encode():
        raise FormatError(path, f"expected {expected} netpbm file, found {raw[:2]!r}", 0)
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < len(raw) and (raw[pos:pos + 1].isspace() or raw[pos:pos + 1] == b"#"):
            if raw[pos:pos + 1] == b"#":
                end = raw.find(b"\n", pos)
                pos = len(raw) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(path, "malformed header", start)
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(path, "missing whitespace after header", pos)
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise FormatError(path, f"invalid dimensions {w}x{h}", 2)
    return w, h, maxval, pos + 1


def mask_write(path, values: np.ndarray, depth: int = 8) -> None:
    """Write a single-channel map as binary PGM.

    ``depth=8``: binary mask, stored as 0 / 255. ``depth=16``: probability map
    in [0, 1], stored big-endian as ``floor(p * 65535 + 0.5)``.
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {values.shape}")
    h, w = values.shape
    if depth == 8:
        if values.dtype != bool and not np.isin(values, (0, 1)).all():
            raise DataError("binary mask must contain only 0 and 1")
        payload = np.where(values.astype(bool), 255, 0).astype(np.uint8).tobytes()
        maxval = 255
    elif depth == 16:
        v = values.astype(np.float64)
        if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
            raise DataError("probability map values must lie in [0, 1]")
        payload = np.floor(v * 65535.0 + 0.5).astype(">u2").tobytes()
        maxval = 65535
    else:
        raise DataError(f"depth must be 8 or 16, got {depth}")
    _write_bytes(path, f"P5\n{w} {h}\n{maxval}\n".encode() + payload)


def mask_read(path) -> np.ndarray:
    """Read a P5 map: bool array for maxval 255, float64 in [0, 1] for 65535."""
    raw = _read_bytes(path)
    w, h, maxval, off = _netpbm_header(raw, path, "P5")
    if maxval == 255:
        dtype, bpp = np.uint8, 1
    elif maxval == 65535:
        dtype, bpp = np.dtype(">u2"), 2
    else:
        raise FormatError(path, f"unsupported maxval {maxval} (expected 255 or 65535)", off - 1)
    need = off + w * h * bpp
    if len(raw) != need:
        raise FormatError(path, f"payload size mismatch: expected {need} bytes, found {len(raw)}",
                          min(len(raw), need))
    data = np.frombuffer(raw, dtype=dtype, offset=off).reshape(h, w)
    if maxval == 255:
        bad = (data != 0) & (data != 255)
        if bad.any():
            raise FormatError(path, "binary mask holds values other than 0 and 255", off + int(np.argmax(bad)))
        return data == 255
    return data.astype(np.float64) / 65535.0


def ppm_write(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DataError(f"frame must be uint8 [H, W, 3], got {rgb.dtype} {rgb.shape}")
    h, w = rgb.shape[:2]
    _write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def ppm_read(path) -> np.ndarray:
    raw = _read_bytes(path)
    w, h, maxval, off = _netpbm_header(raw, path, "P6")
    if maxval != 255:
        raise FormatError(path, f"unsupported maxval {maxval}", off - 1)
    need = off + 3 * w * h
    if len(raw) != need:
        raise FormatError(path, f"payload size mismatch: expected {need} bytes, found {len(raw)}",
                          min(len(raw), need))
    return np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(h, w, 3).copy()


# -- proposals --------------------------------------------------------------

PROPOSAL_KEYS = ("frame", "mask", "objectness", "box")


def write_proposals(path, records) -> None:
    lines = []
    for r in records:
        rec = {k: r[k] for k in PROPOSAL_KEYS}
        rec["frame"] = int(rec["frame"])
        rec["objectness"] = float(rec["objectness"])
        rec["box"] = [int(v) for v in rec["box"]]
        lines.append(json.dumps(rec))
    _write_bytes(path, ("\n".join(lines) + "\n" if lines else "").encode())


def read_proposals(path) -> list[dict]:
    raw = _read_bytes(path)
    out = []
    offset = 0
    for line in raw.splitlines(keepends=True):
        text = line.strip()
        if text:
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise FormatError(path, f"invalid JSON ({exc.msg})", offset + exc.pos) from exc
            if not isinstance(rec, dict) or set(rec) != set(PROPOSAL_KEYS):
                raise FormatError(path, f"proposal must have exactly the keys {PROPOSAL_KEYS}", offset)
            box = rec["box"]
            if not (isinstance(box, list) and len(box) == 4):
                raise FormatError(path, "box must be a list of 4 integers", offset)
            if not 0.0 <= float(rec["objectness"]) <= 1.0:
                raise FormatError(path, "objectness outside [0, 1]", offset)
            out.append(rec)
        offset += len(line)
    return out


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, state: "OrderedDict[str, np.ndarray]", meta: dict | None = None) -> None:
    """Magic, uint32 little-endian header length, JSON header, float32 payloads.

    The header lists ``{"name", "shape"}`` per parameter in payload order,
    plus any extra ``meta`` (e.g. the model configuration) under ``"meta"``.
    """
    header = {"params": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
              "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<I", len(hbytes)), hbytes]
    chunks.extend(np.asarray(v, dtype="<f4").tobytes() for v in state.values())
    _write_bytes(path, b"".join(chunks))


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    raw = _read_bytes(path)
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(path, "bad checkpoint magic", 0)
    if len(raw) < 12:
        raise FormatError(path, "truncated header length", len(raw))
    (hlen,) = struct.unpack_from("<I", raw, 8)
    if len(raw) < 12 + hlen:
        raise FormatError(path, "truncated header", len(raw))
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        entries = [(e["name"], tuple(int(s) for s in e["shape"])) for e in header["params"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(path, f"malformed header ({exc})", 12) from exc
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    pos = 12 + hlen
    for name, shape in entries:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise FormatError(path, f"truncated payload for {name!r}", len(raw))
        state[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise FormatError(path, f"{len(raw) - pos} trailing bytes after payload", pos)
    return state, header.get("meta", {})
