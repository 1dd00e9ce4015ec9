"""Exception and warning types raised across the package."""


class SwrveError(Exception):
    """Base class for all package errors."""


class InvalidDimension(SwrveError, ValueError):
    pass


class UnbalancedDesign(SwrveError, ValueError):
    pass


class IndexOutOfRange(SwrveError, IndexError):
    pass


class InvalidSpec(SwrveError, ValueError):
    pass


class InfeasibleIcc(InvalidSpec):
    """The requested ICC pair implies a negative random-intervention variance."""


class NotPositiveDefinite(SwrveError, ArithmeticError):
    pass


class SingularDesign(SwrveError, ArithmeticError):
    pass


class NonConvergence(SwrveError, RuntimeError):
    pass


class NotConverged(SwrveError, RuntimeError):
    """A downstream computation was requested on a failed fit."""


class UndefinedCorrection(SwrveError, ValueError):
    pass


class SingularLeverage(SwrveError, ArithmeticError):
    pass


class InvalidDof(SwrveError, ValueError):
    pass


class NonPositiveDof(InvalidDof):
    pass


class TooFewConverged(SwrveError, RuntimeError):
    pass


class DegenerateSample(SwrveError, ValueError):
    pass


class SchemaError(SwrveError, ValueError):
    pass


class ConfigError(SwrveError, ValueError):
    pass


class DegenerateAdjustment(RuntimeWarning):
    """A CR2 adjustment needed a pseudo-inverse square root."""
