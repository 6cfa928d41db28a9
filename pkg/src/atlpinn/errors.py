"""Exception types shared across the package."""


class AtlPinnError(Exception):
    """Base class for all package errors."""


class ContractError(AtlPinnError, ValueError):
    """A caller violated an operation's precondition."""


class EvaluationError(AtlPinnError, ArithmeticError):
    """Forward evaluation produced an invalid value.

    ``batch_index`` points at the first offending batch row when known.
    """

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class UnsupportedOrderError(ContractError):
    pass


class SpecError(ContractError):
    """An architecture or problem specification is internally inconsistent."""


class ConfigError(AtlPinnError, ValueError):
    pass


class FormatError(AtlPinnError, ValueError):
    """A grid or checkpoint file failed validation."""


class TrainingError(AtlPinnError, RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class MetricError(AtlPinnError, ValueError):
    """A metric is undefined for the given inputs."""


class AggregationError(AtlPinnError, ValueError):
    def __init__(self, message, orphans=()):
        super().__init__(message)
        self.orphans = tuple(orphans)
