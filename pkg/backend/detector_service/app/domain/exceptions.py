"""
Domain Layer: Error hierarchy

Every failure the toolkit reports on purpose derives from ToolDetectError.
The command line maps the families below to exit codes.
"""


class ToolDetectError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(ToolDetectError, ValueError):
    """An argument violates a shape, range or structural precondition."""


class GraphStateError(ToolDetectError, RuntimeError):
    """Backward was requested without a recorded (or with an already consumed) forward pass."""


class NumericError(ToolDetectError, ArithmeticError):
    """A non-finite value was produced."""


class ConfigError(ToolDetectError):
    """The run configuration is invalid. `key_path` names the offending key."""

    def __init__(self, message: str, key_path: str = ""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class DataError(ToolDetectError):
    """Input files are missing or malformed."""


class CheckpointLoadError(DataError):
    """A checkpoint lacks parameters the network needs."""

    def __init__(self, missing: list[str]):
        super().__init__(f"checkpoint is missing {len(missing)} parameter(s): {', '.join(missing)}")
        self.missing = missing


class EvaluationError(ToolDetectError):
    """Evaluation could not produce any result."""


class ClassSkipped(ToolDetectError):
    """A class has no positives or no negatives after masking; its AUC is undefined."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason
