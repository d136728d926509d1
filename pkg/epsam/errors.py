from typing import Dict, Iterable, Optional


class EpsamError(Exception):
    """Base class for every error raised by epsam."""

    exit_code: int = 3


class ConfigurationError(EpsamError):
    exit_code = 2


class GenerationError(EpsamError):
    pass


class ShapeError(EpsamError):
    pass


class DomainError(EpsamError):
    pass


class SamplingError(EpsamError):
    pass


class PromptError(EpsamError):
    pass


class TrainingError(EpsamError):
    def __init__(self, message: str, epoch: Optional[int] = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class SelectionError(EpsamError):
    def __init__(self, threshold: float, percentiles: Dict[int, float]):
        spread = ", ".join(f"p{p}={v:.3f}" for p, v in percentiles.items())
        super().__init__(
            f"no pseudo-label passed IDS > {threshold}; IDS distribution: {spread or 'empty'}"
        )
        self.threshold = threshold
        self.percentiles = percentiles


class EvaluationError(EpsamError):
    def __init__(self, missing: Iterable[str]):
        self.missing = sorted(missing)
        super().__init__(
            f"predicted and ground-truth patch ids differ: {', '.join(self.missing)}"
        )


class StageError(EpsamError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        if isinstance(cause, ConfigurationError):
            self.exit_code = ConfigurationError.exit_code
