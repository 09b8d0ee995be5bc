"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Numerically invalid input (NaN logits, zero-norm vector, ...)."""


class TapeError(RuntimeError):
    """Misuse of a differentiation tape (e.g. a second backward pass)."""


class FormatError(ValueError):
    """Malformed external data (WAV header, feature file, checkpoint)."""


class InputError(ValueError):
    """Semantically invalid input value (bad label, too-short audio, ...)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""
