"""Cross-domain fetal brain tissue segmentation with Fourier content/style codes."""

from .estimator import C2DASegmenter
from .fourier import FourierDecomposer, extract_codes, reconstruct
from .registration import AffineRegistration, AffineTransform
from .volume import LabelMap, Volume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "C2DASegmenter",
    "FourierDecomposer",
    "AffineRegistration",
    "AffineTransform",
    "Volume",
    "LabelMap",
    "load_volume",
    "save_volume",
    "extract_codes",
    "reconstruct",
]
