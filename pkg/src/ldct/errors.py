"""Exception hierarchy shared across the workbench."""


class LdctError(Exception):
    """Base class for all workbench errors."""


class ContractViolation(LdctError, ValueError):
    """An operation was called with arguments that break its contract.

    The message names the offending dimension or field.
    """


class CheckpointError(LdctError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """File is not a checkpoint (bad magic) or its header is unparseable."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint payload is shorter than its header promises."""


class CheckpointShapeError(CheckpointError):
    """Header parameter shapes disagree with the architecture config."""


class ImageIOError(LdctError):
    """Base class for image file failures."""


class UnknownImageFormatError(ImageIOError):
    """Unrecognized magic bytes or file extension."""


class ImageDimensionError(ImageIOError):
    """Image dimensions exceed what the format can encode."""


class TruncatedImageError(ImageIOError):
    """Payload ends before height*width values."""


class ManifestError(LdctError):
    """Pair manifest is malformed or references missing files."""


class TrainingDivergedError(LdctError):
    """Loss became non-finite; message names the epoch and step."""


class UndefinedCorrelationError(LdctError, ValueError):
    """Correlation of a zero-variance sample is undefined."""


class InfinitePsnrError(LdctError, ArithmeticError):
    """PSNR of identical images; signaled as an outcome, never as a float."""


class StudyError(LdctError):
    """Reader-study protocol violation (missing files, bad token, bad score)."""
