"""Exception types shared across the package."""


class PhrasegroundError(Exception):
    """Base class for package-specific errors."""


class DimensionError(PhrasegroundError, ValueError):
    """Operand shapes or sizes violate an operation's contract."""


class NumericError(PhrasegroundError, ArithmeticError):
    """A computation produced or received non-finite values."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""


class ConfigError(PhrasegroundError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(PhrasegroundError, ValueError):
    """Malformed dataset, manifest, vocabulary, or checkpoint content."""


class ConstraintError(DataError):
    """A sentence holds more phrases than there are proposal boxes."""
