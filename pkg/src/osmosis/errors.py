"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numerics 4).
"""


class OsmosisError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(OsmosisError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataError(OsmosisError, RuntimeError):
    """Unreadable, malformed, or out-of-contract input data."""


class FormationDomainError(DataError):
    """Input outside the domain of the image formation model."""


class NumericalError(OsmosisError, RuntimeError):
    """Non-finite values or other numerical failure during computation."""


class ContractError(OsmosisError, TypeError):
    """A pluggable component violated its interface contract."""
