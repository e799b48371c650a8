"""Autoregressive mask generation toolkit.

Masks are encoded as discrete tokens by a patch-based vector quantizer,
predicted token-by-token by a small causal transformer conditioned on image
and text, and scored with IoU plus average-Hausdorff-distance contour
metrics. Includes a synthetic-shapes dataset generator and a detection/mask
annotation pipeline with replayable external-model clients.
"""

__version__ = "0.1.0"

from .codec import Codebook, MaskTokenizer, train_codebook
from .metrics import EvalPair, MahdReport, ahd, boundary_points, c_iou, iou, m_ahd, m_iou
from .validation import MaskgenError, UndefinedDistanceError, ValidationError

__all__ = [
    "Codebook",
    "EvalPair",
    "MahdReport",
    "MaskTokenizer",
    "MaskgenError",
    "UndefinedDistanceError",
    "ValidationError",
    "__version__",
    "ahd",
    "boundary_points",
    "c_iou",
    "iou",
    "m_ahd",
    "m_iou",
    "train_codebook",
]
