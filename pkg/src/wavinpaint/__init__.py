"""Few-step 3D wavelet-domain diffusion inpainting."""

from wavinpaint.errors import (
    DegenerateInputError,
    FormatError,
    GenerationError,
    ShapeError,
    ValidationError,
    VolumeIOError,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateInputError",
    "FormatError",
    "GenerationError",
    "ShapeError",
    "ValidationError",
    "VolumeIOError",
    "__version__",
]
