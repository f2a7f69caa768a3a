"""JSON run configuration with strict key checking.

Sections: ``model``, ``train``, ``crf``, ``tracker``, ``data`` and ``paths``.
Every section is optional; missing keys take their defaults and unknown
keys are an error.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from streamseg.crf import CrfConfig
from streamseg.errors import ConfigError
from streamseg.instance import COAST_LIMIT, GATE_IOU
from streamseg.streams import ModelConfig
from streamseg.training import TrainConfig


@dataclass
class TrackerConfig:
    gate_iou: float = GATE_IOU
    coast_limit: int = COAST_LIMIT

    def __post_init__(self):
        if not 0.0 <= self.gate_iou <= 1.0:
            raise ConfigError(f"tracker.gate_iou must lie in [0, 1], got {self.gate_iou}")
        if self.coast_limit < 0:
            raise ConfigError("tracker.coast_limit must be non-negative")


@dataclass
class DataConfig:
    sequences: int = 3
    height: int = 64
    width: int = 64
    frames: int = 40
    distractors: list[int] = field(default_factory=lambda: [1, 3])
    corrupt_proposals: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.sequences < 1 or self.frames < 1:
            raise ConfigError("data.sequences and data.frames must be positive")
        if len(self.distractors) != 2 or self.distractors[0] > self.distractors[1] or self.distractors[0] < 0:
            raise ConfigError(f"data.distractors must be [min, max], got {self.distractors}")


@dataclass
class PathsConfig:
    data: str | None = None
    checkpoint: str | None = None
    output: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    crf: CrfConfig = field(default_factory=CrfConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _build(section: str, cls, values) -> object:
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    for key, val in values.items():
        default = getattr(cls(), key) if key in known else None
        if isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"{section}.{key} must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{section}.{key} must be a number")
            if isinstance(default, int) and not isinstance(val, int):
                raise ConfigError(f"{section}.{key} must be an integer")
        if isinstance(default, list) and not isinstance(val, list):
            raise ConfigError(f"{section}.{key} must be a list")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {}
    for f in dataclasses.fields(RunConfig):
        cls = type(f.default_factory())
        parts[f.name] = _build(f.name, cls, doc.get(f.name, {}))
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read configuration ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(doc)
