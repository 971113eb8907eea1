"""Exception hierarchy shared by every powshift module."""


class PowshiftError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class BadMagic(PowshiftError):
    def __init__(self, expected, got=b""):
        super().__init__(f"bad magic: expected {expected!r}, got {bytes(got)!r}")
        self.expected = expected


class VersionUnsupported(PowshiftError):
    pass


class TruncatedRecord(PowshiftError):
    def __init__(self, offset):
        super().__init__(f"truncated record at byte offset {offset}")
        self.offset = offset


class CorruptRecord(PowshiftError):
    def __init__(self, offset, reason):
        super().__init__(f"corrupt record at byte offset {offset}: {reason}")
        self.offset = offset


class OutOfBounds(PowshiftError):
    def __init__(self, x, y, width, height, where=None):
        loc = f" ({where})" if where is not None else ""
        super().__init__(f"event ({x},{y}) outside {width}x{height} sensor{loc}")
        self.x, self.y = x, y


class NonMonotoneTimestamp(PowshiftError):
    def __init__(self, index, prev, cur):
        super().__init__(f"timestamp {cur} at event {index} precedes {prev}")
        self.index = index


class MalformedRow(PowshiftError):
    def __init__(self, line_no, reason=""):
        super().__init__(f"malformed row at line {line_no}" + (f": {reason}" if reason else ""))
        self.line_no = line_no


class BadDirection(PowshiftError):
    pass


class EmptyCalibrationSet(PowshiftError):
    pass


class ShapeMismatch(PowshiftError):
    pass


class OutOfRange(PowshiftError):
    pass


class AccumulatorOverflow(PowshiftError, OverflowError):
    pass


class CorruptSection(PowshiftError):
    def __init__(self, offset, reason="truncated"):
        super().__init__(f"corrupt section at byte offset {offset}: {reason}")
        self.offset = offset


class ValidationFailed(PowshiftError):
    pass


class UnsupportedLayer(PowshiftError):
    pass


class UnsupportedEngine(PowshiftError):
    pass


class NonFiniteLoss(PowshiftError):
    pass


class MissingBaseline(PowshiftError):
    pass


class CorrectnessMismatch(PowshiftError):
    pass
