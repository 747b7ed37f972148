"""Exception hierarchy shared across the package."""


class UvapError(Exception):
    """Base class for package errors."""


class InvalidAttributeError(UvapError):
    """An attribute word is not a member of its closed vocabulary."""


class ConfigError(UvapError):
    """A configuration value violates its documented bounds."""


class TokenizationError(UvapError):
    """A prompt contains a token missing from the vocabulary."""


class ShapeMismatchError(UvapError):
    """Array arguments have incompatible shapes or sizes."""


class ValidationError(UvapError):
    """A sample or request fails a structural precondition."""


class TrainingDivergedError(UvapError):
    """The training loss became non-finite."""


class CheckpointFormatError(UvapError):
    """A checkpoint file has a bad magic, version, or structure."""


class CheckpointIntegrityError(UvapError):
    """A checkpoint file is truncated or carries non-finite tensors."""


class TransportError(UvapError):
    """An external endpoint could not be reached."""


class EvaluationError(UvapError):
    """An evaluation input cannot be interpreted."""


class StageError(UvapError):
    """A pipeline stage was requested before its prerequisites."""

    def __init__(self, required_stage: str, message: str | None = None):
        self.required_stage = required_stage
        super().__init__(message or f"requires stage: {required_stage}")


class ShortfallError(UvapError):
    """Curation cannot fill the requested number of samples."""
