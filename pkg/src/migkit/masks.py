"""Binary mask rasterization, the conv coordinate embedding, layout latents.

A box rasterizes by the pixel-center rule: pixel (r, c) of an HxW grid is
inside iff its center ((c+0.5)/W, (r+0.5)/H) lies in [x1,x2) x [y1,y2); the
x2 = 1.0 / y2 = 1.0 boundary is closed (pixel centers never reach 1.0, so
the full-image box covers everything). A valid box thinner than the pixel
pitch can fall entirely between centers; that yields an all-zero mask and a
warning rather than an error.

The coordinate embedding is a three-layer conv stack over the mask
(channels 1 -> 16 -> 32 -> 64, kernel 3, stride 2, pad 1) with SiLU after
the first two layers and none after the third. The third layer's weights
and bias start at zero, so the embedding is exactly zero at attach time and
the spatial branch is a strict no-op until trained.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layout import BBox, Layout, validate_bbox
from .nn import Conv2d, Module
from .rng import Rng
from .tensor import Tensor, bilinear_interp, silu


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray  # uint8 {0,1}, shape [H, W]

    @property
    def h(self) -> int:
        return self.bits.shape[0]

    @property
    def w(self) -> int:
        return self.bits.shape[1]


def rasterize_mask(box: BBox, h: int, w: int) -> BinaryMask:
    """Rasterize a valid box onto an HxW grid by pixel-center containment."""
    verdict = validate_bbox(box)
    if not verdict.ok:
        raise ValueError(f"invalid bbox {box}: {verdict.reason}")
    if h < 1 or w < 1:
        raise ValueError(f"grid extents must be >= 1, got {h}x{w}")
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    col = (xs >= box.x1) & (xs < box.x2)
    row = (ys >= box.y1) & (ys < box.y2)
    bits = (row[:, None] & col[None, :]).astype(np.uint8)
    if not bits.any():
        warnings.warn(
            f"box {box} spans no pixel centers on a {h}x{w} grid (sub-pixel box)",
            stacklevel=2,
        )
    return BinaryMask(bits=bits)


def mask_to_pgm(mask: BinaryMask, path: str | Path) -> None:
    """Debug dump as binary PGM (P5), 0/255."""
    from .imageio import write_pgm
    write_pgm(path, (mask.bits * 255).astype(np.uint8))


class BBoxEncoder(Module):
    """Conv coordinate embedding of a binary mask; /8 spatial reduction."""

    CHANNELS = (16, 32, 64)

    def __init__(self, rng: Rng):
        super().__init__()
        self.conv1 = Conv2d(1, 16, rng.split("conv1"), stride=2, pad=1)
        self.conv2 = Conv2d(16, 32, rng.split("conv2"), stride=2, pad=1)
        self.conv3 = Conv2d(32, 64, rng.split("conv3"), stride=2, pad=1, init="zero")

    def __call__(self, mask: Tensor) -> Tensor:
        """mask [1,H,W] or [N,1,H,W] with H,W divisible by 8 -> [.,64,H/8,W/8]."""
        h, w = mask.shape[-2], mask.shape[-1]
        if h % 8 or w % 8:
            raise ValueError(f"mask extents must be divisible by 8, got {h}x{w}")
        x = silu(self.conv1(mask))
        x = silu(self.conv2(x))
        return self.conv3(x)


def encode_bbox(encoder: BBoxEncoder, mask: BinaryMask) -> Tensor:
    return encoder(Tensor(mask.bits[None].astype(np.float64)))


@dataclass(frozen=True)
class LayoutLatent:
    """Per-slot spatial conditioning, padded to n_max all-zero slots."""

    slots: np.ndarray  # [n_max, h, w] float64 in [0,1]
    active_count: int

    @property
    def n_max(self) -> int:
        return self.slots.shape[0]


def build_layout_latent(layout: Layout, h: int, w: int,
                        raster_scale: int = 8) -> LayoutLatent:
    """Interpolated mask slots for each active instance.

    Slot i is the instance's binary mask rasterized at (raster_scale*h,
    raster_scale*w) and bilinearly resized down to (h, w); slots beyond the
    active count stay zero.
    """
    padded = layout.padded()
    slots = np.zeros((layout.n_max, h, w), dtype=np.float64)
    count = 0
    for i, inst in enumerate(padded.instances):
        if inst.is_padding:
            continue
        mask = rasterize_mask(inst.bbox, raster_scale * h, raster_scale * w)
        t = bilinear_interp(Tensor(mask.bits.astype(np.float64)), h, w)
        slots[i] = t.data
        count += 1
    return LayoutLatent(slots=slots, active_count=count)
