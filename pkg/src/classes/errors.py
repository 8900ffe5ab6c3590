from typing import Any, List, Optional


class MultiIdError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MultiIdError, ValueError):
    """Array shapes do not agree."""


class ConfigurationError(MultiIdError, ValueError):
    """Inputs are well-formed but describe an unusable configuration."""


class FullyMaskedRowError(ConfigurationError):
    """An attention query has no visible key."""

    def __init__(self, query_index: int):
        super().__init__(f"attention query {query_index} has every key excluded by its bias")
        self.query_index = query_index


class ScheduleError(MultiIdError, ValueError):
    """A timestep index falls outside the DDIM schedule."""


class ValidationError(MultiIdError, ValueError):
    """
    A value violates a documented invariant.

    Attributes:
        code: Stable error code (for example ``E_INVALID_BOX``)
    """

    def __init__(self, message: str, code: str = "E_INVALID"):
        super().__init__(f"{code}: {message}")
        self.code = code


class BenchmarkValidationError(ValidationError):
    """One or more benchmark samples failed validation."""

    def __init__(self, issues: List[Any]):
        self.issues = list(issues)
        first = self.issues[0] if self.issues else None
        code = getattr(first, 'code', 'E_INVALID')
        summary = f"{len(self.issues)} validation issue(s), first: {first}"
        super().__init__(summary, code)


class AdapterError(MultiIdError, RuntimeError):
    """
    A backend adapter failed.

    Attributes:
        stage: Pipeline stage that called the adapter
        step: Denoising or inversion step index, when known
        identity: Identity index, when known
    """

    def __init__(self, stage: str, cause: BaseException, step: Optional[int] = None,
                 identity: Optional[int] = None):
        context = [f"stage={stage}"]
        if step is not None:
            context.append(f"step={step}")
        if identity is not None:
            context.append(f"identity={identity}")
        super().__init__(f"adapter failure ({', '.join(context)}): {cause}")
        self.stage = stage
        self.step = step
        self.identity = identity
        self.__cause__ = cause


class StageError(MultiIdError, RuntimeError):
    """
    A benchmark construction stage could not complete.

    Attributes:
        stage: Name of the failing stage
        transcript: Raw client response that triggered the failure, if any
    """

    def __init__(self, stage: str, message: str, transcript: Optional[str] = None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.transcript = transcript
