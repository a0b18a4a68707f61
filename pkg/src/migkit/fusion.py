"""Per-instance feature fusion: sum, average, and mask-guided combination.

The mask strategy resizes each instance's binary mask to the feature
resolution, weights features inside their own regions, and normalizes each
pixel by its total mask coverage:

    fused = sum_i m_i * (w_i * F_i) / sum_i m_i        where coverage > 0
    fused = (1/n) sum_i F_i                            where coverage = 0

A literal elementwise product across instances (prod_i m_i * F_i) is kept
behind literal_product=True for comparison; it zeroes every pixel not
covered by all instances at once, so disjoint layouts collapse to zero
under it, which is why the normalized sum is the default realization.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .tensor import Tensor, add, bilinear_interp, mul


class FusionStrategy(str, Enum):
    SUM = "sum"
    AVG = "avg"
    MASK = "mask"


def _level_masks(base_masks: list[np.ndarray], h: int, w: int) -> list[np.ndarray]:
    out = []
    for m in base_masks:
        t = bilinear_interp(Tensor(np.asarray(m, dtype=np.float64)), h, w)
        out.append(t.data)
    return out


def combine_level(features: list[Tensor], base_masks: list[np.ndarray] | None,
                  weights: list[float] | None, strategy: FusionStrategy,
                  literal_product: bool = False) -> Tensor:
    """Fuse one pyramid level; features are [C,h,w] or [N?,C,h,w]-free maps
    of identical shape, one per active instance."""
    n = len(features)
    if n == 0:
        raise ValueError("combine of zero instances")
    shape = features[0].shape
    for f in features[1:]:
        if f.shape != shape:
            raise ValueError(f"fusion shape mismatch: {f.shape} vs {shape}")
    if weights is None:
        weights = [1.0] * n
    if len(weights) != n:
        raise ValueError("one weight per instance required")

    if strategy == FusionStrategy.SUM:
        out = mul(features[0], float(weights[0]))
        for f, w in zip(features[1:], weights[1:]):
            out = add(out, mul(f, float(w)))
        return out

    if strategy == FusionStrategy.AVG:
        out = features[0]
        for f in features[1:]:
            out = add(out, f)
        return mul(out, 1.0 / n)

    if strategy != FusionStrategy.MASK:
        raise ValueError(f"unknown strategy {strategy!r}")
    if base_masks is None or len(base_masks) != n:
        raise ValueError("mask fusion requires one mask per instance")
    h, w = shape[-2], shape[-1]
    masks = _level_masks(base_masks, h, w)

    if literal_product:
        out = mul(features[0], Tensor(np.broadcast_to(masks[0], shape).copy()))
        for f, m in zip(features[1:], masks[1:]):
            out = mul(out, mul(f, Tensor(np.broadcast_to(m, shape).copy())))
        return out

    coverage = np.zeros((h, w), dtype=np.float64)
    for m in masks:
        coverage += m
    inv = np.where(coverage > 0.0, 1.0 / np.where(coverage > 0.0, coverage, 1.0), 0.0)
    hole = (coverage <= 0.0).astype(np.float64)

    num = mul(features[0], Tensor(np.broadcast_to(weights[0] * masks[0], shape).copy()))
    for f, m, wt in zip(features[1:], masks[1:], weights[1:]):
        num = add(num, mul(f, Tensor(np.broadcast_to(wt * m, shape).copy())))
    covered = mul(num, Tensor(np.broadcast_to(inv, shape).copy()))

    fallback = features[0]
    for f in features[1:]:
        fallback = add(fallback, f)
    fallback = mul(mul(fallback, 1.0 / n), Tensor(np.broadcast_to(hole, shape).copy()))
    return add(covered, fallback)


def combine(pyramids: list[list[Tensor]], base_masks: list[np.ndarray] | None,
            weights: list[float] | None, strategy: FusionStrategy,
            literal_product: bool = False) -> list[Tensor]:
    """Fuse whole per-instance pyramids level by level (skips plus mid)."""
    if not pyramids:
        raise ValueError("combine of zero instances")
    levels = len(pyramids[0])
    return [
        combine_level([p[lvl] for p in pyramids], base_masks, weights, strategy,
                      literal_product=literal_product)
        for lvl in range(levels)
    ]
