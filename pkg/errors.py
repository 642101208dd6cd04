"""
Error types and fabric result markers for the disaggregated KV simulator.
Exceptions are raised for broken runs; FAIL / OUT_OF_MEMORY travel as values.
"""


class DmkvError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigError(DmkvError):
    """Invalid scenario or geometry. The CLI maps it to exit code 2."""


class LivenessError(DmkvError):
    """A spin budget was exceeded or no actor can make progress."""


class RecoveryBlocked(DmkvError):
    """An object needed by recovery has no alive replica."""


class OutOfMemory(DmkvError):
    """No memory node could grant a block."""


class TooLarge(DmkvError):
    """The object does not fit the largest size class."""


class TraceFormatError(DmkvError):
    """A trace file could not be parsed."""


class _Marker:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return self.name

    def __reduce__(self):
        return self.name


FAIL = _Marker("FAIL")
OUT_OF_MEMORY = _Marker("OUT_OF_MEMORY")
