"""Exception hierarchy shared across the package."""


class IceppError(Exception):
    """Base class for all package errors."""


class ShapeError(IceppError):
    """Tensor dimensions do not line up."""


class DomainError(IceppError):
    """Input outside an operation's mathematical domain (log of non-positive,
    fully masked softmax row, ...)."""


class ContractError(IceppError):
    """A documented precondition was violated by the caller."""


class ConfigError(IceppError):
    """Invalid or unusable configuration. CLI maps this to exit code 2."""


class ExplosionError(IceppError):
    """Simulation exceeded its event cap; the generating process is unstable."""


class NumericalError(IceppError):
    """Non-finite value or non-convergent numerical routine."""


class DataError(IceppError):
    """Dataset parsing, validation, integrity, or capacity failure."""
