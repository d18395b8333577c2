"""Exception types shared across the package."""


class NsegError(Exception):
    """Base class for every error raised by ``nseg``."""


class ConfigurationError(NsegError, ValueError):
    """A structural setting is invalid (bad kernel size, channel mismatch, fold count...)."""


class ContractError(NsegError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class LoadError(NsegError, OSError):
    """A dataset or checkpoint on disk could not be read."""


class NumericalError(NsegError, ArithmeticError):
    """Training produced a non-finite value."""


class LeakageError(NsegError, AssertionError):
    """An augmented copy of a held-out sample reached the training set."""
