"""Exception taxonomy shared by all modules.

The CLI maps DataError to exit code 1 and ConfigError to exit code 2;
everything else is a programming error and propagates.
"""


class SpvsError(Exception):
    """Base class for all package errors."""


class DimensionError(SpvsError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(SpvsError):
    """Input value outside the mathematical domain (e.g. log of x <= 0)."""


class NumericsError(SpvsError):
    """An operation produced NaN or Inf."""


class ContractError(SpvsError):
    """A documented precondition was violated by the caller."""


class CapacityError(SpvsError):
    """A fixed capacity (e.g. positional table length) was exceeded."""


class ConfigError(SpvsError):
    """Invalid configuration value or combination."""


class DataError(SpvsError):
    """Malformed input data (dataset records, score dumps, ...)."""


class VocabularyError(DataError):
    """Token id outside the embedding table."""


class FormatError(DataError):
    """Corrupt or unsupported serialized file (checkpoint, dataset)."""
