"""Exception hierarchy shared by all modules."""


class DemoProgError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DemoProgError, ValueError):
    pass


class FormatError(DemoProgError):
    """Malformed or version-mismatched file."""


# geometry
class InvalidScene(DemoProgError, ValueError):
    pass


class BehindCamera(DemoProgError):
    pass


class DegenerateHull(DemoProgError):
    pass


# belief maps
class OutOfFrame(DemoProgError):
    pass


class ShapeError(DemoProgError, ValueError):
    pass


class NoDetection(DemoProgError):
    pass


# metrics
class EmptyInput(DemoProgError, ValueError):
    pass


# neural
class NumericError(DemoProgError, ArithmeticError):
    pass


# relationship
class IncompleteDetection(DemoProgError):
    pass


class DiagonalError(DemoProgError, ValueError):
    pass


class TooFewObjects(DemoProgError, ValueError):
    pass


# program / executor
class InvalidGoal(DemoProgError):
    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class ObjectReferenceError(DemoProgError, LookupError):
    """A program mentions an object the state does not contain."""


class ActionRejected(DemoProgError):
    pass
