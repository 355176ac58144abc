"""Exception hierarchy shared across the package."""


class SceneGrowError(Exception):
    """Base class for all scenegrow errors."""


class ConfigError(SceneGrowError):
    """Invalid or contradictory run configuration."""


class DimensionMismatchError(SceneGrowError):
    """Array dimensions disagree with the camera or with each other."""

    def __init__(self, message: str, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ProviderError(SceneGrowError):
    """A generative provider failed (transport, protocol, or contract)."""

    def __init__(self, message: str, attempts: int | None = None, last_error=None):
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


class PoseOutsideWorldError(SceneGrowError):
    """Requested a synthetic-world render from a pose outside the room."""


class PipelineError(SceneGrowError):
    """A construction step failed; carries partial progress for persistence."""

    def __init__(self, message: str, step: int | None = None, records=None):
        super().__init__(message)
        self.step = step
        self.records = records if records is not None else []


class NoCorrespondenceError(PipelineError):
    """Scale fitting found no overlapping valid pixels to anchor the scale."""


class OptimizerError(SceneGrowError):
    """Splat optimization hit a non-finite state; carries the last good scene."""

    def __init__(self, message: str, last_scene=None, history=None):
        super().__init__(message)
        self.last_scene = last_scene
        self.history = history if history is not None else []


class EmptyCloudError(SceneGrowError):
    """An operation requiring points received an empty cloud."""


class EmptyMaskError(SceneGrowError):
    """A masked operation received a mask with no valid pixels."""


class OutputError(SceneGrowError):
    """Reading or writing an artifact file failed."""

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path
