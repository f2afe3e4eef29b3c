"""Exception types raised across the package."""


class CatintellError(Exception):
    """Base class for every error raised by catintell."""


class NotFoundError(CatintellError, FileNotFoundError):
    pass


class DecodeError(CatintellError):
    pass


class IoError(CatintellError, OSError):
    pass


class ShapeError(CatintellError, ValueError):
    pass


class RangeError(CatintellError, ValueError):
    pass


class ConfigError(CatintellError, ValueError):
    pass


class EmptyCorpusError(CatintellError):
    pass


class TooFewImagesError(CatintellError):
    pass


class DegenerateLabelsError(CatintellError):
    pass


class PairingError(CatintellError):
    pass


class PhaseError(CatintellError):
    pass


class NumericalError(CatintellError, ArithmeticError):
    """Non-finite loss or input; ``diagnostics`` holds the offending values."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
