"""Exception hierarchy shared by every module of the engine."""

from typing import Optional


class LowBitError(Exception):
    """Base class for all engine errors"""


class ConfigError(LowBitError):
    """Unreadable or malformed run configuration"""


# Tensor engine

class ShapeError(LowBitError, ValueError):
    pass


class NonFiniteError(LowBitError, FloatingPointError):
    """An op produced NaN or Inf"""

    def __init__(self, op: str):
        super().__init__(f"Non-finite value produced by op '{op}'")
        self.op = op


class TapeError(LowBitError, RuntimeError):
    pass


# Quantization

class DegenerateScale(LowBitError, ValueError):
    """The layer scale gamma would be zero (all-zero weights)"""


# Data

class DatasetFormatError(LowBitError):
    pass


# Training

class TrainingDiverged(LowBitError):
    def __init__(self, epoch: int, batch_index: int, detail: Optional[str] = None):
        message = f"Training diverged at epoch {epoch}, batch {batch_index}"
        if detail:
            message += f": {detail}"
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


# Packed model files

class PackedFormatError(LowBitError):
    pass


class BadMagic(PackedFormatError):
    pass


class UnsupportedVersion(PackedFormatError):
    pass


class TruncatedFile(PackedFormatError):
    pass


class CorruptPayload(PackedFormatError):
    pass


class OffGridValue(PackedFormatError, ValueError):
    def __init__(self, index: int, value: float, n_values: int):
        super().__init__(f"Weight {value!r} at flat index {index} is not on the {n_values}-value grid")
        self.index = index
        self.value = value
        self.n_values = n_values
