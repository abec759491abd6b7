"""Grounded visual chain-of-thought at desk scale.

A small multimodal autoregressive model emits a region-of-interest box
as plain text mid-generation; the harness parses it, re-engages visual
evidence for that region (by re-encoding the crop or re-sampling cached
patch tokens), injects the resulting visual tokens, and lets generation
continue with the grounded context in scope.
"""

from .boxes import BBox, PaddingPlan, expand_box, iou, parse_box, serialize_box
from .errors import VischainError

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "PaddingPlan",
    "VischainError",
    "__version__",
    "expand_box",
    "iou",
    "parse_box",
    "serialize_box",
]
