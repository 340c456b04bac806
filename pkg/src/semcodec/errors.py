"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration problems exit 1,
data/model incompatibilities exit 2, numerical divergence exits 3.
"""


class SemcodecError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SemcodecError):
    """Invalid configuration: bad values, unknown keys, missing prerequisites."""


class ContractViolation(SemcodecError):
    """An operation was called with inputs that break its preconditions."""


class IncompatibleModelError(SemcodecError):
    """A bitstream or checkpoint does not match the model it is used with."""


class CorruptStreamError(SemcodecError):
    """A bitstream failed structural or checksum validation."""


class InsufficientSamplesError(SemcodecError):
    """A statistic was requested over too few samples."""


class DivergenceError(SemcodecError):
    """Training produced a non-finite loss."""
