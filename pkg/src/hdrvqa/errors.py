"""Exception hierarchy.

Every error carries a short machine-parsable ``code`` so the command line
can report ``ERROR <CODE>: <detail>`` on a single line.
"""


class HdrVqaError(Exception):
    code = "ERROR"


class GeometryError(HdrVqaError, ValueError):
    code = "BAD_GEOMETRY"


class FrameIndexError(HdrVqaError, IndexError):
    code = "FRAME_INDEX"


class TransferDomainError(HdrVqaError, ValueError):
    code = "TRANSFER_DOMAIN"


class MetadataError(HdrVqaError, ValueError):
    """Operation applied to a frame whose layout/transfer/primaries it does not accept."""

    code = "BAD_METADATA"


class ClipError(HdrVqaError, ValueError):
    code = "BAD_CLIP"


class EncoderError(HdrVqaError, RuntimeError):
    code = "ENCODER_FAILED"


class LossRoutingError(HdrVqaError, ValueError):
    """An anchor in a contrastive batch has no usable positive."""

    code = "UNROUTABLE_ANCHOR"


class CheckpointError(HdrVqaError, ValueError):
    code = "CKPT_INVALID"


class CheckpointNotFound(CheckpointError, FileNotFoundError):
    code = "CKPT_NOT_FOUND"


class TrainingDiverged(HdrVqaError, FloatingPointError):
    code = "NON_FINITE_LOSS"


class BankError(HdrVqaError, ValueError):
    code = "BANK_INVALID"


class BankVersionError(BankError):
    code = "BANK_VERSION"


class UndefinedMetricError(HdrVqaError, ValueError):
    code = "UNDEFINED_METRIC"


class ProtocolError(HdrVqaError, ValueError):
    code = "PROTOCOL"


class ConfigError(HdrVqaError, ValueError):
    code = "BAD_CONFIG"
