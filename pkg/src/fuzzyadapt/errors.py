"""Exception hierarchy shared across the package."""


class FuzzyAdaptError(Exception):
    pass


class InvalidInputError(FuzzyAdaptError, ValueError):
    pass


class DivergedError(FuzzyAdaptError, ArithmeticError):
    """Raised when a loss turns non-finite during training."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class AssumptionViolatedError(FuzzyAdaptError):
    """A noise matrix is not clean-labels-dominant."""


class ResolutionError(FuzzyAdaptError):
    """Simplex grid too coarse to certify a brute-force minimum."""


class ParseError(FuzzyAdaptError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class UnsupportedVersionError(FuzzyAdaptError):
    pass


class ConfigError(FuzzyAdaptError, ValueError):
    pass
