"""Exception hierarchy shared by every subsystem."""


class CrosstalkError(Exception):
    """Base class for all package errors."""


class ShapeError(CrosstalkError, ValueError):
    pass


class DomainError(CrosstalkError, ValueError):
    """A value lies outside an operation's mathematical domain (or is non-finite)."""


class TapeError(CrosstalkError, RuntimeError):
    pass


class LabelError(CrosstalkError, ValueError):
    pass


class ConfigError(CrosstalkError, ValueError):
    pass


class LengthError(CrosstalkError, ValueError):
    pass


class StateError(CrosstalkError, RuntimeError):
    pass


class FormatError(CrosstalkError, ValueError):
    pass


class IoError(CrosstalkError, OSError):
    pass


class EmptyError(CrosstalkError, ValueError):
    pass


class DivergenceError(CrosstalkError, ArithmeticError):
    pass


class UsageError(CrosstalkError):
    pass
