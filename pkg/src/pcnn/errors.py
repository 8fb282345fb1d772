"""Exception types raised across the package."""


class PcnnError(Exception):
    """Base class for every error raised by this package."""


class InvalidShape(PcnnError, ValueError):
    pass


class NonScalarLoss(PcnnError, ValueError):
    pass


class NonDeterministic(PcnnError, RuntimeError):
    pass


class DegenerateBatch(PcnnError, ValueError):
    pass


class InvalidLabel(PcnnError, ValueError):
    pass


class ImageTooSmall(PcnnError, ValueError):
    pass


class TargetTooSmall(PcnnError, ValueError):
    pass


class InvalidConfig(PcnnError, ValueError):
    pass


class MalformedRow(PcnnError, ValueError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}")
        self.row = row
        self.reason = reason


class EmptyDataset(PcnnError, ValueError):
    pass


class DivergenceDetected(PcnnError, RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value


class UnsupportedVersion(PcnnError, ValueError):
    pass


class CorruptCheckpoint(PcnnError, ValueError):
    pass
