"""Exception types shared across the kit."""


class AttnKitError(Exception):
    """Base class for all kit errors."""


class ShapeMismatchError(AttnKitError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(AttnKitError):
    """Non-finite or otherwise unusable numeric input."""


class ConfigError(AttnKitError):
    """A configuration value is missing, inconsistent, or unsupported."""


class RoutingError(AttnKitError):
    """A mechanism variant was sent to the wrong entry point."""


class IntegrityError(AttnKitError):
    """Sharded state failed a consistency check."""
