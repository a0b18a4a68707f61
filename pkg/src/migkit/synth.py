"""Synthetic shapes benchmark: layout generation and exact rendering.

Scenes are colored squares and circles on a gray background, rendered by
the same pixel-center rule the mask rasterizer uses, so a rendered scene
realizes its layout exactly. Placement is rejection-sampled: every box
respects the minimum side, the pairwise IoU bound, and a clearance margin
between same-color instances (two touching same-color shapes would merge
into one connected component and blind the detector oracle).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import BBox, InstanceSpec, Layout, bbox_iou
from .rng import Rng

DEFAULT_PALETTE = (
    ("red", (200, 40, 40)),
    ("green", (40, 170, 60)),
    ("blue", (50, 80, 220)),
    ("yellow", (230, 200, 50)),
)

GRAY = (128, 128, 128)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    canvas: int = 64
    palette: tuple[tuple[str, tuple[int, int, int]], ...] = DEFAULT_PALETTE
    shapes: tuple[str, ...] = ("square", "circle")
    min_instances: int = 1
    max_instances: int = 3
    min_side: float = 0.25
    max_side: float = 0.55
    max_pair_iou: float = 0.05
    same_color_gap: float = 0.04
    background: tuple[int, int, int] = GRAY
    n_max: int = 10

    def color_of(self, name: str) -> tuple[int, int, int]:
        for cname, rgb in self.palette:
            if cname == name:
                return rgb
        raise KeyError(f"unknown palette color {name!r}")


@dataclass(frozen=True)
class SceneSample:
    image: np.ndarray  # uint8 [H, W, 3]
    layout: Layout


class PlacementError(RuntimeError):
    pass


def _boxes_conflict(spec: SyntheticSceneSpec, a: tuple[str, BBox], b: tuple[str, BBox]) -> bool:
    (ca, ba), (cb, bb) = a, b
    if bbox_iou(ba, bb) > spec.max_pair_iou:
        return True
    if ca == cb:
        g = spec.same_color_gap
        sep = (ba.x2 + g <= bb.x1 or bb.x2 + g <= ba.x1
               or ba.y2 + g <= bb.y1 or bb.y2 + g <= ba.y1)
        if not sep:
            return True
    return False


def generate_layout(spec: SyntheticSceneSpec, rng: Rng) -> Layout:
    """One random layout; raises PlacementError after 1000 rejections."""
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    placed: list[tuple[str, str, BBox]] = []
    for k in range(n):
        ok = False
        for _ in range(1000):
            side_x = float(rng.uniform(spec.min_side, spec.max_side))
            side_y = float(rng.uniform(spec.min_side, spec.max_side))
            x1 = float(rng.uniform(0.0, 1.0 - side_x))
            y1 = float(rng.uniform(0.0, 1.0 - side_y))
            box = BBox(x1, y1, x1 + side_x, y1 + side_y).quantized(3)
            color = spec.palette[rng.choice(len(spec.palette))][0]
            shape = spec.shapes[rng.choice(len(spec.shapes))]
            if any(_boxes_conflict(spec, (color, box), (c, b)) for c, _, b in placed):
                continue
            placed.append((color, shape, box))
            ok = True
            break
        if not ok:
            raise PlacementError(
                f"could not place instance {k} of {n} after 1000 rejections "
                f"(min_side={spec.min_side}, max_pair_iou={spec.max_pair_iou}, "
                f"same_color_gap={spec.same_color_gap})")
    instances = tuple(
        InstanceSpec(caption=f"{color} {shape}", bbox=box) for color, shape, box in placed
    )
    return Layout(global_caption=f"a scene with {n} shapes",
                  instances=instances, n_max=spec.n_max)


def render_scene(layout: Layout, spec: SyntheticSceneSpec) -> np.ndarray:
    """Exact raster of the layout: uint8 [canvas, canvas, 3]."""
    s = spec.canvas
    img = np.empty((s, s, 3), dtype=np.uint8)
    img[:] = spec.background
    xs = (np.arange(s) + 0.5) / s
    ys = (np.arange(s) + 0.5) / s
    for inst in layout.active:
        color_name, shape = inst.caption.split()[:2]
        rgb = spec.color_of(color_name)
        b = inst.bbox
        if shape == "square":
            inside = ((ys[:, None] >= b.y1) & (ys[:, None] < b.y2)
                      & (xs[None, :] >= b.x1) & (xs[None, :] < b.x2))
        elif shape == "circle":
            cx, cy = (b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0
            rx, ry = (b.x2 - b.x1) / 2.0, (b.y2 - b.y1) / 2.0
            inside = (((xs[None, :] - cx) / rx) ** 2 + ((ys[:, None] - cy) / ry) ** 2) <= 1.0
        else:
            raise ValueError(f"unknown shape {shape!r}")
        img[inside] = rgb
    return img


def generate_synthetic_dataset(spec: SyntheticSceneSpec, n: int, rng: Rng
                               ) -> list[SceneSample]:
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    out = []
    for k in range(n):
        layout = generate_layout(spec, rng.split(f"scene/{k}"))
        out.append(SceneSample(image=render_scene(layout, spec), layout=layout))
    return out


def downsample_to_latent(rgb: np.ndarray, h: int, w: int) -> np.ndarray:
    """uint8 [H,W,3] -> float64 [3,h,w] in [-1,1] by exact block averaging."""
    big_h, big_w, _ = rgb.shape
    if big_h % h or big_w % w:
        raise ValueError(f"canvas {big_h}x{big_w} not divisible by latent {h}x{w}")
    fh, fw = big_h // h, big_w // w
    x = rgb.astype(np.float64).reshape(h, fh, w, fw, 3).mean(axis=(1, 3))
    return (x / 255.0 * 2.0 - 1.0).transpose(2, 0, 1)


def upsample_nearest(img: np.ndarray, canvas: int) -> np.ndarray:
    """float [-1,1] [3,h,w] -> uint8 [canvas, canvas, 3] by pixel replication."""
    _, h, w = img.shape
    if canvas % h or canvas % w:
        raise ValueError(f"canvas {canvas} not divisible by {h}x{w}")
    fh, fw = canvas // h, canvas // w
    big = np.repeat(np.repeat(img, fh, axis=1), fw, axis=2)
    return np.round(np.clip((big + 1.0) * 0.5, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
