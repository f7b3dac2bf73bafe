"""Exception types raised across the package."""


class CorrNoiseError(Exception):
    """Base class for all package errors."""


class ParameterDomainError(CorrNoiseError, ValueError):
    """A distribution or privacy parameter is outside its valid domain."""


class InputDomainError(CorrNoiseError, ValueError):
    """A user input is outside the range the protocol accepts."""


class ConfigurationError(CorrNoiseError, ValueError):
    """Arguments are individually valid but inconsistent with each other."""


class TruncationError(CorrNoiseError, RuntimeError):
    """A pmf could not be truncated within the iteration budget."""


class CapacityError(CorrNoiseError, RuntimeError):
    """An exact computation would exceed the configured size cap."""


class EncodingError(CorrNoiseError, ValueError):
    """A message cannot be encoded or decoded."""


class ConstructionError(CorrNoiseError, RuntimeError):
    """An internally constructed object failed its own verification."""


class InfeasibleError(CorrNoiseError, RuntimeError):
    """No parameter in the searched range satisfies the privacy target."""
