"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config problems exit 2, data problems
exit 3, anything else that escapes exits 4.
"""


class PneumonetError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(PneumonetError, ValueError):
    """Tensor or layer shapes are incompatible with the requested operation."""


class ContractError(PneumonetError, ValueError):
    """An argument violates a documented precondition."""


class ValidationError(PneumonetError, ValueError):
    """A model spec or shape chain is internally inconsistent."""


class ProtocolError(PneumonetError, RuntimeError):
    """A dataset or experiment protocol requirement is not met."""


class SchemaError(PneumonetError, ValueError):
    """A structured input file (CSV, config) is missing required fields."""


class ConfigError(PneumonetError, ValueError):
    """An experiment configuration file is invalid."""


class WeightsFormatError(PneumonetError, ValueError):
    """A weights file has a bad header, version, or incompatible contents."""
