"""Exception types raised across the package."""


class LomoeError(Exception):
    """Base class for all package errors."""


class ShapeError(LomoeError, ValueError):
    pass


class ConfigError(LomoeError, ValueError):
    pass


class ContractError(LomoeError, ValueError):
    """A precondition of an operation was violated by the caller."""


class RoutingError(LomoeError, KeyError):
    pass


class StateError(LomoeError, RuntimeError):
    """An operation was invoked while the object was in the wrong state."""


class NumericalError(LomoeError, FloatingPointError):
    """NaN or Inf appeared where finite values are required."""


class FreezeViolation(LomoeError, RuntimeError):
    """A frozen tensor changed."""


class ParseError(LomoeError, ValueError):
    def __init__(self, message, *, path=None, offset=None):
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"byte offset={offset}")
        super().__init__("; ".join(parts))
        self.path = path
        self.offset = offset


class ValidationError(LomoeError, ValueError):
    pass
