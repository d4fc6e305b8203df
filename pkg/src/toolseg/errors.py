"""Exception types shared across the toolkit.

Argument-contract violations raise plain ``ValueError`` (aliased as
``InvalidArgumentError``); everything with a distinct recovery path gets
its own class so callers can branch on it.
"""


class ToolsegError(Exception):
    """Base class for toolkit-specific failures."""


InvalidArgumentError = ValueError


class MissingAnnotationError(ToolsegError):
    """An image frame has no matching mask file."""


class InvalidLabelError(ToolsegError):
    """A mask contains a class ID outside {0 .. C-1}."""


class CheckpointIncompatibleError(ToolsegError):
    """Stored tensors or format version do not match what the model expects."""


class CorruptCheckpointError(ToolsegError):
    """Checkpoint file is truncated or structurally unreadable."""


class TrainingDivergedError(ToolsegError):
    """Training loss became non-finite."""

    def __init__(self, iteration: int, message: str | None = None):
        self.iteration = iteration
        super().__init__(message or f"training diverged at iteration {iteration}")
