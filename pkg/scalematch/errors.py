"""Exception types raised across the matching pipeline."""


class MatchError(Exception):
    """Base class for all pipeline errors."""


class ShapeError(MatchError, ValueError):
    """Input tensor has a shape the pipeline cannot process."""


class EmptyKeyError(MatchError):
    """Every key of an attention level is masked out."""


class DegeneratePruningError(MatchError):
    """Pruning removed every patch of an image."""


class GeometryError(MatchError, ValueError):
    """Ground-truth geometry is invalid (singular homography, non-rotation matrix, ...)."""


class OracleInputError(MatchError, ValueError):
    """Input to the exact MI oracle is not a valid distribution or MI list."""


class DatasetError(MatchError):
    """A dataset entry is missing or malformed."""


class CheckpointError(MatchError):
    """Base class for checkpoint persistence errors."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written with an unsupported format version."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint file is truncated or corrupted."""


class ShapeMismatchError(CheckpointError):
    """Checkpoint arrays do not fit the model they are loaded into."""


class NoPoseError(MatchError):
    """Relative pose could not be estimated from the given matches."""


class NonFiniteLossError(MatchError):
    """Training produced a NaN or infinite loss."""
