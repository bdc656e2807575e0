"""Exception types shared across the package."""


class GradleakError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(GradleakError, ValueError):
    """Array dimensions do not match the declared layer geometry."""


class NumericsError(GradleakError, ArithmeticError):
    """Non-finite values or a failed numerical routine."""


class AmbiguityError(GradleakError, ValueError):
    """Label recovery found no unique sign-consistent row."""


class NotInvertibleError(GradleakError, ValueError):
    """A closed-form layer inversion has no usable pivot."""


class UsageError(GradleakError, ValueError):
    """Operation called on a layer kind it does not support."""


class CatalogError(GradleakError, KeyError):
    """Unknown architecture name."""


class ConfigError(GradleakError, ValueError):
    """Invalid experiment configuration."""
