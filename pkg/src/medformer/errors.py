"""Exception types raised across the package."""


class MedformerError(Exception):
    """Base class for all package errors."""


class ShapeError(MedformerError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class FormatError(MedformerError, ValueError):
    """A checkpoint or dataset file is malformed, truncated or of an unknown version."""


class ConfigError(MedformerError, ValueError):
    """A configuration value is missing, malformed or out of range."""


class TrainingDiverged(MedformerError, FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class ResourceLimitError(MedformerError, MemoryError):
    """A workload exceeds a configured size cap."""
