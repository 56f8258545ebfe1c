"""Exception types shared across the package."""


class VlffdError(Exception):
    """Base class for all package errors."""


class ShapeError(VlffdError, ValueError):
    pass


class ConfigError(VlffdError, ValueError):
    pass


class DataError(VlffdError, ValueError):
    pass


class ContractError(VlffdError, ValueError):
    """A caller violated an operation precondition."""


class NumericDomainError(VlffdError, ArithmeticError):
    pass


class DeterminismError(VlffdError, RuntimeError):
    pass


class PipelineOrderError(VlffdError, RuntimeError):
    """A training stage was requested before its prerequisite checkpoints exist."""


class DivergenceError(VlffdError, RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class UpstreamError(VlffdError, RuntimeError):
    """The language-model client kept failing; carries the request transcript."""

    def __init__(self, message: str, transcript: list | None = None):
        super().__init__(message)
        self.transcript = list(transcript or [])


class UndefinedMetricError(VlffdError, ValueError):
    pass
