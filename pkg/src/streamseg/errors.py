"""Exception hierarchy.

Every error carries a short ``kind`` string; the CLI prints
``<kind>: <message>`` on a single line and exits with status 1.
"""
from __future__ import annotations


class StreamSegError(Exception):
    kind = "error"


class ShapeError(StreamSegError, ValueError):
    kind = "shape_error"

    def __init__(self, op: str, message: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) if s is not None else None for s in shapes)
        shape_txt = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: {message}" + (f" ({shape_txt})" if shape_txt else ""))


class ResolutionError(ShapeError):
    kind = "resolution_error"


class PreconditionError(StreamSegError, ValueError):
    kind = "precondition_error"


class NonFiniteError(StreamSegError, FloatingPointError):
    kind = "non_finite"


class CapacityError(StreamSegError, MemoryError):
    kind = "capacity_error"


class FormatError(StreamSegError, ValueError):
    kind = "format_error"

    def __init__(self, path, message: str, offset: int | None = None):
        self.path = str(path)
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{self.path}: {message}{where}")


class ConfigError(StreamSegError, ValueError):
    kind = "config_error"


class DataError(StreamSegError, ValueError):
    kind = "data_error"
