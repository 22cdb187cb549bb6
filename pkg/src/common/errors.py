from typing import Optional


class MigrsimError(Exception):
    """Base class for every error raised by the simulator."""


class ArgumentError(MigrsimError, ValueError):
    """Invalid handle, missing attribute or out-of-range value."""


class ResourceError(MigrsimError):
    """An identifier range or queue is exhausted."""


class StateError(MigrsimError):
    """Operation not allowed in the object's current state."""


class CollisionError(MigrsimError):
    """A restored object could not keep its original identifier."""

    def __init__(self, kind: str, wanted: int, got: Optional[int] = None):
        self.kind = kind
        self.wanted = wanted
        self.got = got
        detail = f", got {got:#x}" if got is not None else ""
        super().__init__(f"{kind} {wanted:#x} is occupied{detail}")


class PacketError(MigrsimError):
    """Wire bytes that do not decode to a packet."""


class ImageError(MigrsimError):
    """Dump image bytes that do not decode."""


class ScenarioError(MigrsimError):
    """Scenario parse or validation failure, anchored to a key and line."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        self.message = message
        super().__init__(self.diagnostic())

    def diagnostic(self, path: Optional[str] = None) -> str:
        where = path or "<scenario>"
        if self.line is not None:
            where = f"{where}:{self.line}"
        if self.key:
            return f"{where}: {self.key}: {self.message}"
        return f"{where}: {self.message}"
