"""Exception hierarchy shared across the package."""


class CmmaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CmmaError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(CmmaError, FloatingPointError):
    """A computation produced NaN or infinity."""


class FormatError(CmmaError, ValueError):
    """A persisted file could not be decoded."""


class VersionError(FormatError):
    def __init__(self, expected, found):
        super().__init__(f"unsupported format version: expected {expected}, found {found}")
        self.expected = expected
        self.found = found


class MagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class RangeError(FormatError):
    """Decoded values fall outside their documented range."""
