"""Exception hierarchy shared by every zol module."""


class ZolError(Exception):
    """Base class for all errors raised by zol."""


class NumericError(ZolError, ArithmeticError):
    """Non-finite value, division by zero or a singular system."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class ShapeError(ZolError, ValueError):
    pass


class ConfigError(ZolError, ValueError):
    pass


class PreconditionError(ZolError, ValueError):
    pass


class DegenerateError(ZolError, ValueError):
    pass


class FormatError(ZolError, ValueError):
    """Malformed binary file. ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DivergedTrainingError(NumericError):
    def __init__(self, step, message="training diverged", diagnostics=None):
        super().__init__(f"{message} at step {step}", diagnostics)
        self.step = step
