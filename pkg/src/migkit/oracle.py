"""Rule-based detector: color thresholding plus connected components.

Independent of every model path — this is the measurement instrument, so
it shares no code with rendering beyond the palette definition. For each
palette color, pixels within a fixed RGB distance are thresholded, 4-connected
components are extracted, components smaller than the minimum pixel count
are dropped (sampler speckle), and each survivor reports its tight bounding
box in normalized coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import BBox

DEFAULT_COLOR_DISTANCE = 60.0
DEFAULT_MIN_COMPONENT = 9


@dataclass(frozen=True)
class Detection:
    color: str
    bbox: BBox
    pixels: int


def _components(mask: np.ndarray) -> list[np.ndarray]:
    """4-connected components of a boolean [H,W] mask, as index arrays."""
    h, w = mask.shape
    labels = np.full((h, w), -1, dtype=np.int32)
    comps: list[list[tuple[int, int]]] = []
    for r, c in np.argwhere(mask):
        if labels[r, c] != -1:
            continue
        cid = len(comps)
        stack = [(int(r), int(c))]
        labels[r, c] = cid
        members = []
        while stack:
            rr, cc = stack.pop()
            members.append((rr, cc))
            for nr, nc in ((rr - 1, cc), (rr + 1, cc), (rr, cc - 1), (rr, cc + 1)):
                if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and labels[nr, nc] == -1:
                    labels[nr, nc] = cid
                    stack.append((nr, nc))
        comps.append(members)
    return [np.array(m) for m in comps]


def oracle_detect(image: np.ndarray,
                  palette: tuple[tuple[str, tuple[int, int, int]], ...],
                  color_distance: float = DEFAULT_COLOR_DISTANCE,
                  min_component: int = DEFAULT_MIN_COMPONENT) -> list[Detection]:
    """image: uint8 [H, W, 3] -> detections (possibly empty)."""
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    out: list[Detection] = []
    for name, rgb in palette:
        dist = np.sqrt(((img - np.asarray(rgb, dtype=np.float64)) ** 2).sum(axis=2))
        mask = dist <= color_distance
        for members in _components(mask):
            if len(members) < min_component:
                continue
            rows, cols = members[:, 0], members[:, 1]
            box = BBox(cols.min() / w, rows.min() / h,
                       (cols.max() + 1) / w, (rows.max() + 1) / h)
            out.append(Detection(color=name, bbox=box, pixels=len(members)))
    return out
