# errors.py
"""Exception hierarchy shared by every stage of the search pipeline."""


class DnsRecError(Exception):
    """Base class for errors the CLI reports as a one-line reason."""


class ConfigError(DnsRecError):
    """A configuration key or hyperparameter is invalid."""


class DimensionError(DnsRecError):
    """Tensor shapes do not line up for an operation."""


class DataFormatError(DnsRecError):
    """An interaction file or a batch does not have the expected content."""


class TapeError(DnsRecError):
    """The gradient tape was used incorrectly."""


class NumericalError(DnsRecError):
    """A primitive produced NaN or Inf from finite inputs."""


class InvariantError(DnsRecError):
    """An internal invariant was violated."""


class CheckpointError(DnsRecError):
    """A checkpoint file is malformed or does not match the descriptor."""


class DivergenceError(DnsRecError):
    """Training produced a non-finite loss.

    ``state`` holds a JSON-serialisable snapshot of the loop at the failing
    iteration so the caller can dump it next to the run outputs.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
