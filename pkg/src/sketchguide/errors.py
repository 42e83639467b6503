"""Exception types shared across the package."""


class SketchGuideError(Exception):
    """Base class for all package errors."""


class ConfigError(SketchGuideError, ValueError):
    """Invalid configuration value or unknown named component."""


class InputError(SketchGuideError, ValueError):
    """Invalid data passed to an operation (shape, range, emptiness)."""


class IncompatibleError(SketchGuideError):
    """Two artifacts (backbone taps, feature layout, LEP input) do not fit together."""


class NumericalError(SketchGuideError, ArithmeticError):
    """Non-finite or otherwise unusable numbers appeared mid-computation."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
