"""Exception types shared across the package."""


class M2dError(Exception):
    """Base class for domain errors; the CLI maps these to exit code 1."""


class ShapeError(M2dError):
    """Operands have incompatible shapes; the message names both."""


class NumericsError(M2dError):
    """Non-finite values or a degenerate numeric condition."""


class CorpusFormatError(M2dError):
    """Malformed corpus input; the message carries the line number."""
