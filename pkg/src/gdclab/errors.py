"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes or ranks are incompatible with the operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(ValueError):
    """A serialized object has a bad magic number, version or field."""


class StreamError(ValueError):
    """A byte stream is truncated or inconsistent with its header."""


class IdentityError(AssertionError):
    """An exact information identity failed beyond tolerance.

    Carries the offending distribution so a failing sweep can be replayed.
    """

    def __init__(self, message, joint=None):
        super().__init__(message)
        self.joint = joint


class TrainingError(RuntimeError):
    """Training produced a non-finite loss; records the step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
