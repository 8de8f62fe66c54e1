"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent run configuration."""


class DomainError(ValueError):
    """Argument outside the domain of a function (e.g. y <= 0 for the conjugate)."""

    def __init__(self, message, count=None):
        super().__init__(message)
        self.count = count


class NumericalError(ArithmeticError):
    """A numerical procedure failed; ``last_iterate`` holds its final state."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate
