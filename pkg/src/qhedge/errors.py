"""Exception types raised across the package."""


class QHedgeError(Exception):
    """Base class for all package errors."""


class InvalidParameter(QHedgeError, ValueError):
    pass


class MomentUndefined(QHedgeError, ValueError):
    pass


class EmptyMixture(QHedgeError, ValueError):
    pass


class ShapeMismatch(QHedgeError, ValueError):
    pass


class NotScalar(QHedgeError, ValueError):
    pass


class TapeConsumed(QHedgeError, RuntimeError):
    pass


class NonpositiveValue(QHedgeError, ArithmeticError):
    """A direct-scheme path reached a stock or wealth value <= 0."""


class LogArgumentNonpositive(NonpositiveValue):
    """gamma0 * pi * J + 1 <= 0 under the logarithmic scheme."""


class DivisionByZeroWealth(QHedgeError, ZeroDivisionError):
    pass


class ZeroVolatility(QHedgeError, ValueError):
    pass


class TruncationNotConverged(QHedgeError, ArithmeticError):
    pass


class UnsupportedModel(QHedgeError, ValueError):
    """The requested route is not defined for this market model."""


class NonFiniteLoss(QHedgeError, FloatingPointError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class CheckpointMismatch(QHedgeError, ValueError):
    pass


class ConfigInvalid(QHedgeError, ValueError):
    pass
