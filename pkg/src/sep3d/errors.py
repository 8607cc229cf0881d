"""Exception types shared across the package."""


class Sep3dError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(Sep3dError, ValueError):
    """Raised for invalid or incompatible tensor shapes."""


class FormatError(Sep3dError, ValueError):
    """Raised for malformed clip or weight files."""


class ConfigError(Sep3dError, ValueError):
    """Raised for invalid network or training configuration."""


class ConfigWarning(UserWarning):
    """Emitted for legal but suspicious configurations, e.g. a dilated
    branch whose filter extent exceeds the feature map it runs on."""
