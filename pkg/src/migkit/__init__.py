"""migkit: desk-scale multi-instance layout-to-image kit.

Layout DSL and geometry, a minimal autograd tensor engine, mask-driven
spatial conditioning, low-rank adapter plug-ins over toy UNet/DiT
denoisers, time-gated guided DDIM sampling, dataset curation scoring, and
a synthetic-shapes evaluation harness with an independent detector oracle.
"""

__version__ = "0.1.0"

from .layout import BBox, InstanceSpec, Layout, bbox_iou, parse_layout_text, serialize_layout
from .tensor import Tensor

__all__ = [
    "BBox", "InstanceSpec", "Layout", "Tensor",
    "bbox_iou", "parse_layout_text", "serialize_layout",
    "__version__",
]
