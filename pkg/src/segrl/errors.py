"""Exception types shared across the package.

The CLI maps these onto distinct process exit codes (see ``segrl.cli``).
"""


class ConfigError(ValueError):
    """Invalid configuration: bad value, bad combination, or unknown key."""


class ShapeError(ValueError):
    """Tensor shape incompatible with what an operation requires."""


class DataIOError(OSError):
    """A file could not be read, parsed, or written."""


class CheckpointIntegrityError(DataIOError):
    """Checkpoint file is corrupt: bad magic bytes or checksum mismatch."""


class CheckpointVersionError(DataIOError):
    """Checkpoint was written by an incompatible format version."""


class TrainingDiverged(RuntimeError):
    """A non-finite loss value was encountered during training."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(
            f"non-finite loss ({value!r}) at epoch {epoch}, batch {batch}; "
            "aborting training"
        )
        self.epoch = epoch
        self.batch = batch
        self.value = value
