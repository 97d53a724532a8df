"""Exception hierarchy shared across the package."""


class ShbcfError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ShbcfError, ValueError):
    """A hyperparameter or run option is out of its allowed range."""


class InputError(ShbcfError, ValueError):
    """User-supplied data has the wrong shape, type or content."""


class DegenerateDataError(InputError):
    """Data is well-formed but carries no usable signal (constant outcome, single class...)."""


class MissingPropensityError(InputError):
    """A propensity column is required but was not supplied."""
