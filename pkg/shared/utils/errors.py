"""Exception hierarchy shared by the lab's library and entry points."""


class LabError(Exception):
    """Base class for every error raised deliberately by the lab."""


class ShapeError(LabError, ValueError):
    """Operand shapes do not fit together."""


class DomainError(LabError, ValueError):
    """A precondition on values (not shapes) is violated."""


class NumericError(LabError, ArithmeticError):
    """Non-finite values, training divergence or a failed oracle check."""


class ConfigError(LabError):
    """Config or manifest could not be read or validated."""


def shape_of(t) -> tuple:
    return tuple(getattr(t, "shape", ()))
