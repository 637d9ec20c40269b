"""Exception types shared across the seedcl pipeline."""


class SeedclError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(SeedclError):
    """Invalid or inconsistent configuration (usage error, CLI exit code 2)."""


class NoForegroundFound(SeedclError):
    """Thresholding a photo produced no foreground component."""


class AmbiguousForeground(SeedclError):
    """The largest thresholded component covers too much of the photo."""


class PlacementFailure(SeedclError):
    """A cutout could not be placed on the canvas within the retry budget."""


class IoFailure(SeedclError):
    """Dataset or checkpoint files could not be written or read."""


class ShapeMismatch(SeedclError):
    """Array dimensions do not match the declared contract."""


class UnknownHead(SeedclError):
    """Requested head kind is not present in the parameter store."""


class UnknownLabel(SeedclError):
    """A label outside the declared class set was encountered."""


class ZeroVector(SeedclError):
    """A similarity or normalization was requested on a zero-norm vector."""


class EmptyQueue(SeedclError):
    """MoCo InfoNCE was asked for negatives from an empty key queue."""


class BatchTooLarge(SeedclError):
    """More keys pushed at once than the queue capacity."""


class InsufficientData(SeedclError):
    """Not enough records to satisfy the requested label split."""


class AllDiverged(SeedclError):
    """Every step of the learning-rate sweep increased the loss."""


class EmptyMatrix(SeedclError):
    """A classification report was requested for an empty confusion matrix."""


class NumericFailure(SeedclError):
    """Training hit a non-finite loss; carries the offending step index."""
