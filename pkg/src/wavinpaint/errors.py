"""Exception types shared across the package."""


class WavInpaintError(Exception):
    """Base class for all domain errors raised by this package."""


class ValidationError(WavInpaintError, ValueError):
    """An input violates a documented invariant (NaN voxels, bad parameters, ...)."""


class ShapeError(ValidationError):
    """Array dimensions are incompatible with the requested operation."""


class DegenerateInputError(ValidationError):
    """The input carries no usable dynamic range (e.g. a constant volume)."""


class FormatError(WavInpaintError, ValueError):
    """A file does not follow the expected binary layout."""


class VolumeIOError(WavInpaintError, OSError):
    """A file could not be read or written, or its payload is truncated."""


class GenerationError(WavInpaintError, RuntimeError):
    """Synthetic data generation failed after the allowed number of retries."""
