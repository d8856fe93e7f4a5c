"""
errors.py - Exception hierarchy for slotpolicy
"""


class SlotPolicyError(Exception):
    """Base class for all slotpolicy errors."""


class ConfigError(SlotPolicyError, ValueError):
    """Unknown key, bad value or missing required field in a configuration."""


class ShapeError(SlotPolicyError, ValueError):
    """Operand shapes (or dtypes) are incompatible for an op."""


class TapeError(SlotPolicyError, RuntimeError):
    """Misuse of the gradient tape, e.g. running backward twice."""


class NonFiniteError(SlotPolicyError, FloatingPointError):
    """NaN or Inf where finite values are required."""


class CheckpointError(SlotPolicyError, ValueError):
    """Malformed or unsupported checkpoint file."""


class DatasetError(SlotPolicyError, IOError):
    """Shard read/write failure or invalid episode record."""


class CorruptEpisodeError(DatasetError):
    """Episode payload does not match its stored CRC32."""


class PlacementError(SlotPolicyError, RuntimeError):
    """Scene sampling could not place all objects without overlap."""


class SimulationError(SlotPolicyError, ValueError):
    """Invalid action or step on a finished episode."""


class ExpertTimeout(SlotPolicyError, RuntimeError):
    """A scripted expert phase exceeded its step budget."""


class FrozenEncoderError(SlotPolicyError, RuntimeError):
    """An encoder parameter received a gradient while frozen."""
