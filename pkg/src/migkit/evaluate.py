"""Layout-adherence measurement against the detector oracle.

Detections are keyed to ground-truth instances by color first (removing
identity ambiguity so the score isolates spatial adherence), then matched
greedily by descending IoU; the matching is injective and unmatched
instances score zero. success@0.5 is the fraction of instances whose match
reaches IoU 0.5.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .curation import classify_complexity
from .layout import Layout, bbox_iou
from .oracle import Detection, oracle_detect
from .synth import SyntheticSceneSpec, upsample_nearest


@dataclass(frozen=True)
class InstanceResult:
    layout_index: int
    caption: str
    iou: float
    complexity: str


@dataclass(frozen=True)
class EvalReport:
    mean_iou: float
    success_at_05: float
    per_instance: tuple[InstanceResult, ...]
    by_complexity: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "success_at_0.5": self.success_at_05,
            "instances": [
                {"layout": r.layout_index, "caption": r.caption,
                 "iou": r.iou, "complexity": r.complexity}
                for r in self.per_instance
            ],
            "by_complexity": self.by_complexity,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def match_instances(layout: Layout, detections: list[Detection]) -> list[float]:
    """Per active instance IoU under color-keyed greedy injective matching."""
    ious = [0.0] * layout.active_count
    used: set[int] = set()
    pairs = []
    for gi, inst in enumerate(layout.active):
        color = inst.caption.split()[0]
        for di, det in enumerate(detections):
            if det.color != color:
                continue
            pairs.append((bbox_iou(inst.bbox, det.bbox), gi, di))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    matched_gt: set[int] = set()
    for iou, gi, di in pairs:
        if gi in matched_gt or di in used or iou <= 0.0:
            continue
        matched_gt.add(gi)
        used.add(di)
        ious[gi] = iou
    return ious


def build_report(layouts: list[Layout], per_layout_ious: list[list[float]]) -> EvalReport:
    rows: list[InstanceResult] = []
    for li, (lay, ious) in enumerate(zip(layouts, per_layout_ious)):
        cls = classify_complexity(lay.active_count)
        for inst, iou in zip(lay.active, ious):
            rows.append(InstanceResult(layout_index=li, caption=inst.caption,
                                       iou=iou, complexity=cls))
    if not rows:
        return EvalReport(mean_iou=0.0, success_at_05=0.0, per_instance=())
    all_ious = np.array([r.iou for r in rows])
    by_class: dict[str, dict] = {}
    for cls in sorted({r.complexity for r in rows}):
        sub = np.array([r.iou for r in rows if r.complexity == cls])
        by_class[cls] = {
            "count": int(sub.size),
            "mean_iou": float(sub.mean()),
            "success_at_0.5": float((sub >= 0.5).mean()),
        }
    return EvalReport(
        mean_iou=float(all_ious.mean()),
        success_at_05=float((all_ious >= 0.5).mean()),
        per_instance=tuple(rows),
        by_complexity=by_class,
    )


SamplerFn = Callable[[list[Layout]], np.ndarray]  # layouts -> float [-1,1] [B,3,h,w]


def layout_adherence(sampler_fn: SamplerFn, layouts: list[Layout],
                     spec: SyntheticSceneSpec, batch: int = 16) -> EvalReport:
    """Sample one image per layout, detect, match, aggregate."""
    per_layout: list[list[float]] = []
    for lo in range(0, len(layouts), batch):
        chunk = layouts[lo:lo + batch]
        imgs = sampler_fn(chunk)
        for lay, img in zip(chunk, imgs):
            rgb = upsample_nearest(img, spec.canvas) if img.shape[-1] != spec.canvas \
                else np.round(np.clip((img + 1) * 0.5, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
            dets = oracle_detect(rgb, spec.palette)
            per_layout.append(match_instances(lay, dets))
    return build_report(layouts, per_layout)


def render_layout_overlay(layout: Layout, spec: SyntheticSceneSpec) -> np.ndarray:
    """Box outlines on the gray background, for contact sheets."""
    s = spec.canvas
    img = np.empty((s, s, 3), dtype=np.uint8)
    img[:] = spec.background
    for inst in layout.active:
        rgb = spec.color_of(inst.caption.split()[0])
        b = inst.bbox
        r1, r2 = int(b.y1 * s), min(int(b.y2 * s), s - 1)
        c1, c2 = int(b.x1 * s), min(int(b.x2 * s), s - 1)
        img[r1:r2 + 1, [c1, c2]] = rgb
        img[[r1, r2], c1:c2 + 1] = rgb
    return img


def contact_sheet(pairs: list[tuple[np.ndarray, np.ndarray]],
                  columns: int = 4, margin: int = 2) -> np.ndarray:
    """Grid of (overlay, sample) uint8 tiles -> one uint8 image."""
    if not pairs:
        raise ValueError("contact sheet of zero pairs")
    th, tw, _ = pairs[0][0].shape
    cell_w = 2 * tw + 3 * margin
    cell_h = th + 2 * margin
    rows = (len(pairs) + columns - 1) // columns
    sheet = np.full((rows * cell_h, columns * cell_w, 3), 255, dtype=np.uint8)
    for i, (left, right) in enumerate(pairs):
        r, c = divmod(i, columns)
        y, x = r * cell_h + margin, c * cell_w + margin
        sheet[y:y + th, x:x + tw] = left
        sheet[y:y + th, x + tw + margin:x + 2 * tw + margin] = right
    return sheet
