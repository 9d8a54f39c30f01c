"""Exception types raised across the package."""


class HyperkernelError(Exception):
    pass


class DimensionMismatch(HyperkernelError, ValueError):
    pass


class InvalidCov(HyperkernelError, ValueError):
    pass


class SingularSystem(HyperkernelError, ArithmeticError):
    pass


class InvalidIndex(HyperkernelError, ValueError):
    pass


class TooLarge(HyperkernelError, ValueError):
    pass


class KinkProximity(HyperkernelError, ValueError):
    """A pre-activation sits too close to the ReLU kink for derivatives to be trusted."""


class UnsupportedShape(HyperkernelError, ValueError):
    pass


class NonFiniteLoss(HyperkernelError, FloatingPointError):
    pass


class BadMagic(HyperkernelError, ValueError):
    pass


class Truncated(HyperkernelError, ValueError):
    pass


class ConfigError(HyperkernelError, ValueError):
    pass
