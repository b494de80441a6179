"""Exception hierarchy shared by every module of the package."""


class InfoDropError(Exception):
    """Base class for all package errors."""


class DimensionError(InfoDropError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class DomainError(InfoDropError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class NonFiniteError(InfoDropError, FloatingPointError):
    """A forward pass produced NaN or Inf."""


class DegenerateBatchError(InfoDropError, ValueError):
    """Batch statistics are undefined (e.g. batch of one in train mode)."""


class ContractError(InfoDropError, RuntimeError):
    """A call violated an API precondition (e.g. backward of a non-scalar)."""


class ConfigError(InfoDropError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(InfoDropError, ValueError):
    """Malformed binary file."""


class QueryError(InfoDropError, KeyError):
    """Unknown variable name in an information query."""


class DataError(InfoDropError, ValueError):
    """Dataset lacks a required field."""


class CheckpointError(InfoDropError, ValueError):
    """Checkpoint is incompatible with the requested use."""


class TopologyError(InfoDropError, ValueError):
    """Operation is not supported for this network topology."""


class TrainingDivergedError(InfoDropError, FloatingPointError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, batch: int, message: str = ""):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}" + (f": {message}" if message else ""))
