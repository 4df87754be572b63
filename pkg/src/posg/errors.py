"""Exception hierarchy shared by every module."""


class PosgError(Exception):
    """Base class for all errors raised by this package."""


class MalformedInputError(PosgError, ValueError):
    """Inputs have the wrong shape, dimension or range."""


class ConfigError(PosgError, ValueError):
    """A configuration value or combination of values is invalid."""


class DivergenceError(PosgError, FloatingPointError):
    """A NaN or Inf appeared in losses, gradients or parameters."""


class ContractViolation(PosgError, RuntimeError):
    """An object was used outside its lifecycle (e.g. stepping a finished episode)."""


class LayoutError(PosgError, ValueError):
    """A grid layout failed parsing or reachability validation."""


class StateOnlyViolation(PosgError, ValueError):
    """A demonstration record carries action data."""
