"""Exception types shared across modules."""


class ConfigError(ValueError):
    """A configuration is invalid or cannot be satisfied."""


class NumericalError(FloatingPointError):
    """An optimization produced a non-finite value."""


class QuarantineError(PermissionError):
    """Attempt to read target-domain training labels outside the supervised bound."""
