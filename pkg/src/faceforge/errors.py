"""Exception hierarchy shared across the package."""


class FaceforgeError(Exception):
    """Base class for every error raised by this package."""


class NumericError(FaceforgeError, ArithmeticError):
    """A forward computation produced or received non-finite values."""


class StructuralError(FaceforgeError, ValueError):
    """Shapes, graph structure, or record layout are inconsistent."""


class UsageError(FaceforgeError, ValueError):
    """An operation was called outside its contract (mode/config mismatch)."""


class IngestionError(FaceforgeError, ValueError):
    """Corpus or file input could not be read or is empty/malformed."""


class DegenerateFrequencyError(FaceforgeError, ValueError):
    """A frequency table cannot support weight derivation (empty or single-token)."""


class MetricError(FaceforgeError, ValueError):
    """A metric was requested on an empty or unusable response set."""


class TrainingDivergedError(FaceforgeError, RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint (if any) is kept."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
