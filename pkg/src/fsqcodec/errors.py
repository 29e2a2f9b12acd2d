"""Exception types shared across the package.

Every error derives from :class:`FsqError` so callers (and the CLI) can
catch the whole family at once. Most are also ``ValueError`` subclasses
since they signal bad arguments or bad data.
"""


class FsqError(Exception):
    """Base class for all package errors."""


class InvalidLevelCount(FsqError, ValueError):
    pass


class InvalidInput(FsqError, ValueError):
    pass


class InvalidNoise(FsqError, ValueError):
    pass


class ShapeError(FsqError, ValueError):
    pass


class OffLatticeError(FsqError, ValueError):
    pass


class OutOfRangeError(FsqError, ValueError):
    pass


class InvalidConfig(FsqError, ValueError):
    pass


class ResidualUnsupported(FsqError, ValueError):
    pass


class CapacityError(FsqError, ValueError):
    pass


class DecodeError(FsqError, ValueError):
    pass


class NoData(FsqError, ValueError):
    pass


class CoverageError(FsqError, ValueError):
    pass


class InvalidCodebook(FsqError, ValueError):
    pass


class NonInvertibleConfig(InvalidConfig):
    pass


class UndefinedReference(FsqError, ValueError):
    pass


class SaturatedMeasurement(FsqError, RuntimeError):
    pass


class UnsupportedFormat(FsqError, ValueError):
    pass


class ResampleRequired(FsqError, ValueError):
    pass


class ParseError(FsqError, ValueError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
