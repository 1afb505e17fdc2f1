"""Exception types shared across the package."""


class CsiAuthError(Exception):
    """Base class for all library errors."""


class ConfigError(CsiAuthError, ValueError):
    """Invalid configuration value or violated operation precondition."""


class ContractError(CsiAuthError, ValueError):
    """Inputs violate a call contract (dimension mismatch, non-finite data, ...)."""


class FormatError(CsiAuthError, ValueError):
    """Malformed trace, snapshot, or config file content."""


class FitError(CsiAuthError, RuntimeError):
    """Mixture fitting failed."""


class DegenerateComponentError(FitError):
    """A mixture component received numerically zero responsibility mass."""
