"""Exception hierarchy shared by every ipakit module."""


class IpaError(Exception):
    """Base class for all errors raised by ipakit."""


class ShapeError(IpaError, ValueError):
    """Operand dimensions do not agree."""


class NonFiniteError(IpaError, ValueError):
    """An input or a computed result contains NaN or Inf."""


class ConvergenceError(IpaError, RuntimeError):
    """An iterative routine hit its iteration cap."""


class DegenerateRankError(IpaError, ValueError):
    """Feature data has lower numerical rank than the requested subspace."""


class DivergenceError(IpaError, RuntimeError):
    """Training or a Hebbian update produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class BindingError(IpaError, ValueError):
    """An artifact was produced from a different model than the one supplied."""


class FormatError(IpaError, ValueError):
    """A container file or configuration document is malformed."""
