"""Exception types shared across the package."""


class EinetError(Exception):
    pass


class ConfigError(EinetError, ValueError):
    """Invalid or inconsistent configuration."""


class InputError(EinetError, ValueError):
    """Malformed or out-of-domain input data."""


class LoadError(EinetError):
    """A file or directory could not be turned into a valid record set."""


class ContractError(EinetError, ValueError):
    """Shapes or structures handed between components do not agree."""


class NumericError(EinetError, FloatingPointError):
    """A NaN/Inf showed up where finite values are required."""


class DivergenceWarning(UserWarning):
    """Model output left its expected domain (usually undertrained params)."""


class PairingError(ContractError):
    """Reference and converted sets do not cover the same utterances."""
