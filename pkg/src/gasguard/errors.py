class GasGuardError(Exception):
    pass


class DomainError(GasGuardError, ValueError):
    """Input outside the physical domain of an operation."""


class SaturationError(DomainError):
    """ADC code at full scale; the concentration is out of measurable range."""


class UsageError(GasGuardError, ValueError):
    pass


class ConfigurationError(GasGuardError):
    pass
