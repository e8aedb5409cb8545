"""Exception hierarchy.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3. Everything raised by this package derives from
PersearchError.
"""


class PersearchError(Exception):
    pass


class ContractViolation(PersearchError):
    """A caller broke an operation's precondition (bad index, dim mismatch, ...)."""


class ConfigError(PersearchError):
    """Invalid run configuration or command usage."""


class DataError(PersearchError):
    """Malformed or inconsistent input data (datasets, specs, stores)."""


class CorruptPayloadError(DataError):
    """Embedding payload bytes disagree with the manifest."""


class SplitInfeasibleError(DataError):
    """No train/val assignment of components can hit the target fraction."""


class NumericalError(PersearchError):
    """Numerical failure (divergence, degenerate values) during computation."""


class DegenerateInputError(NumericalError):
    """Zero-norm or non-finite embedding where a direction is required."""


class TrainingDivergenceError(NumericalError):
    """Loss became non-finite during training."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
