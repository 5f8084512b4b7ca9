"""Exception types shared across the package."""


class FusionLabError(Exception):
    """Base class for all package errors."""


class ShapeError(FusionLabError, ValueError):
    """Operand dimensions are incompatible."""


class DegenerateInputError(FusionLabError, ValueError):
    """Input is structurally valid but degenerate for the operation
    (zero row before normalization, batch too small, empty pair set, ...)."""


class ConfigurationError(FusionLabError, ValueError):
    """A configuration value violates a precondition."""


class FormatError(FusionLabError, ValueError):
    """A binary or text payload does not match its declared format."""


class TapeError(FusionLabError, RuntimeError):
    """Misuse of the autodiff tape (foreign variable, non-scalar loss, ...)."""


class UnsupportedError(FusionLabError, ValueError):
    """The request is outside the supported desk-scale envelope."""


class TrainingDiverged(FusionLabError, RuntimeError):
    """Training produced a non-finite loss; carries the last finite epoch."""

    def __init__(self, epoch, message=""):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")
