from __future__ import annotations


class GazeQAError(Exception):
    """Base class for every domain error raised by gazeqa."""


class ShapeError(GazeQAError, ValueError):
    pass


class ParameterError(GazeQAError, ValueError):
    pass


class EmptyInputError(GazeQAError, ValueError):
    pass


class PreconditionError(GazeQAError, ValueError):
    pass


class FileFormatError(GazeQAError, ValueError):
    pass


class MarkerParseError(GazeQAError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class GenerationFormatError(GazeQAError):
    pass


class SpanRangeError(GazeQAError, IndexError):
    pass


class ChunkFormatError(GazeQAError, ValueError):
    pass


class InjectionError(ChunkFormatError):
    pass


class BackendError(GazeQAError):
    """Retriable failure of a remote backend."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{message} [{key}]" if key else message)
        self.key = key


class CannedLookupError(GazeQAError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class VerdictParseError(GazeQAError):
    pass


def shape_of(a) -> str:
    return "×".join(str(n) for n in getattr(a, "shape", ()))
