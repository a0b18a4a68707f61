"""Toy UNet denoiser with the divide / conquer / combine conditioning path.

The base network is a 2-level residual UNet with self-attention (plus a
learned 2-D relative-position logit bias) and cross-attention to caption
tokens in every block. The plug-in adds: one layout channel on the stem, a
conv coordinate-embedding branch added after the stem, identity-initialized
fusion projections at the mid level and both skip levels, and low-rank
adapters on the encoder attention projections.

Guided forward: each active instance runs the encoder separately on
(noise latent ++ its interpolated mask slot) cross-attending to its own
sub-caption; the per-instance pyramids fuse (sum / avg / mask) at the mid
and skip levels; the shared mid + decoder consumes the fused pyramid and
cross-attends to the global caption. With guidance off the pass is a single
encoder run on a zeroed layout channel with no coordinate branch and no
fusion, which is exactly the frozen base network when adapters are zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fusion import FusionStrategy, combine_level
from .layout import Layout
from .masks import BBoxEncoder, build_layout_latent, rasterize_mask
from .nn import Conv2d, Linear, Module, channel_linear
from .rng import Rng
from .tensor import (Tensor, add, add_channel_bias, attention, bilinear_interp,
                     channel_rmsnorm, concat, embedding, narrow, reshape, silu,
                     stack, transpose)
from .text import ToyTextEmbedder

PLUGIN_PREFIXES = ("ebbox", "relpos", "text.")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    widths: tuple[int, int] = (32, 64)
    d_text: int = 32
    time_dim: int = 32
    n_max: int = 10
    latent_h: int = 16
    latent_w: int = 16
    relpos: bool = True
    raster_scale: int = 8   # mask raster resolution = raster_scale * latent
    # self-attention runs at levels >= this index (full-resolution pixel
    # self-attention is quadratic in h*w; cross-attention stays everywhere)
    self_attn_min_level: int = 1

    def __post_init__(self):
        if self.latent_h % 4 or self.latent_w % 4:
            raise ValueError("latent extents must be divisible by 4 (two stride-2 stages)")


def time_features(t: np.ndarray, dim: int, t_total: int) -> np.ndarray:
    """Sinusoidal features of normalized timesteps; [B, dim] constant."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = (t[:, None] / t_total) * 1000.0 * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if feats.shape[1] < dim:
        feats = np.pad(feats, ((0, 0), (0, dim - feats.shape[1])))
    return feats


def _tokens(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N, H*W, C]."""
    n, c, h, w = x.shape
    return transpose(reshape(x, (n, c, h * w)), (0, 2, 1))


def _untokens(x: Tensor, h: int, w: int) -> Tensor:
    n, hw, c = x.shape
    return reshape(transpose(x, (0, 2, 1)), (n, c, h, w))


_REL_INDEX_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _relative_index(h: int, w: int) -> np.ndarray:
    """[h*w, h*w] indices into a (2h-1)*(2w-1) relative-offset table."""
    key = (h, w)
    if key not in _REL_INDEX_CACHE:
        rows = np.arange(h * w) // w
        cols = np.arange(h * w) % w
        dr = rows[:, None] - rows[None, :] + (h - 1)
        dc = cols[:, None] - cols[None, :] + (w - 1)
        _REL_INDEX_CACHE[key] = (dr * (2 * w - 1) + dc).astype(np.int64)
    return _REL_INDEX_CACHE[key]


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, rng: Rng):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, rng.split("conv1"))
        self.conv2 = Conv2d(c_out, c_out, rng.split("conv2"))
        self.temb = Linear(time_dim, c_out, rng.split("temb"))
        self.skip = Linear(c_in, c_out, rng.split("skip"), bias=False) if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(silu(channel_rmsnorm(x)))
        h = add_channel_bias(h, self.temb(silu(temb)))
        h = self.conv2(silu(channel_rmsnorm(h)))
        base = x if self.skip is None else channel_linear(self.skip, x)
        return add(base, h)


class SelfAttention(Module):
    """Single-head pixel self-attention with an optional learned 2-D
    relative-position logit bias (zero-initialized, part of the plug-in)."""

    def __init__(self, c: int, h: int, w: int, rng: Rng, relpos: bool):
        super().__init__()
        self.h, self.w = h, w
        self.q = Linear(c, c, rng.split("q"))
        self.k = Linear(c, c, rng.split("k"))
        self.v = Linear(c, c, rng.split("v"))
        self.out = Linear(c, c, rng.split("out"))
        self.relpos = Tensor(np.zeros(((2 * h - 1) * (2 * w - 1), 1)),
                             requires_grad=True) if relpos else None

    def _bias(self) -> Tensor | None:
        if self.relpos is None:
            return None
        idx = _relative_index(self.h, self.w)
        table = embedding(self.relpos, idx.reshape(-1))
        return reshape(table, (idx.shape[0], idx.shape[0]))

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        t = _tokens(channel_rmsnorm(x))
        y = attention(self.q(t), self.k(t), self.v(t), bias=self._bias())
        return add(x, _untokens(self.out(y), h, w))


class CrossAttention(Module):
    """Pixel queries attending to caption token embeddings."""

    def __init__(self, c: int, d_text: int, rng: Rng):
        super().__init__()
        self.q = Linear(c, c, rng.split("q"))
        self.k = Linear(d_text, c, rng.split("k"))
        self.v = Linear(d_text, c, rng.split("v"))
        self.out = Linear(c, c, rng.split("out"))

    def __call__(self, x: Tensor, kv: Tensor, kv_mask: np.ndarray) -> Tensor:
        n, c, h, w = x.shape
        t = _tokens(channel_rmsnorm(x))
        y = attention(self.q(t), self.k(kv), self.v(kv), mask=kv_mask)
        return add(x, _untokens(self.out(y), h, w))


class UNetLevel(Module):
    def __init__(self, c_in: int, c_out: int, h: int, w: int, cfg: UNetConfig,
                 rng: Rng, self_attn: bool = True):
        super().__init__()
        self.res = ResBlock(c_in, c_out, cfg.time_dim, rng.split("res"))
        self.attn = (SelfAttention(c_out, h, w, rng.split("attn"), cfg.relpos)
                     if self_attn else None)
        self.xattn = CrossAttention(c_out, cfg.d_text, rng.split("xattn"))

    def __call__(self, x: Tensor, temb: Tensor, kv: Tensor, kv_mask: np.ndarray) -> Tensor:
        x = self.res(x, temb)
        if self.attn is not None:
            x = self.attn(x)
        return self.xattn(x, kv, kv_mask)


class FuseProjections(Module):
    """Identity-initialized per-level linear layers applied after fusion;
    their low-rank adapters are the trainable part."""

    def __init__(self, widths: tuple[int, int], rng: Rng):
        super().__init__()
        w0, w1 = widths
        self.skip0 = Linear(w0, w0, rng.split("skip0"), bias=False, init="identity")
        self.skip1 = Linear(w1, w1, rng.split("skip1"), bias=False, init="identity")
        self.mid = Linear(w1, w1, rng.split("mid"), bias=False, init="identity")


class ToyUNet(Module):
    def __init__(self, cfg: UNetConfig, rng: Rng, vocab=None):
        super().__init__()
        self.cfg = cfg
        w0, w1 = cfg.widths
        h, w = cfg.latent_h, cfg.latent_w
        self.text = (ToyTextEmbedder(cfg.d_text, rng.split("text"))
                     if vocab is None else ToyTextEmbedder(cfg.d_text, rng.split("text"), vocab))
        self.tmlp1 = Linear(cfg.time_dim, cfg.time_dim, rng.split("tmlp1"))
        self.tmlp2 = Linear(cfg.time_dim, cfg.time_dim, rng.split("tmlp2"))

        self.stem = Conv2d(cfg.in_channels + 1, w0, rng.split("stem"))
        self.ebbox = BBoxEncoder(rng.split("ebbox"))
        self.ebbox_proj = Linear(64, w0, rng.split("ebbox_proj"), bias=False)

        sa0 = cfg.self_attn_min_level <= 0
        self.enc0 = UNetLevel(w0, w0, h, w, cfg, rng.split("enc0"), self_attn=sa0)
        self.down0 = Conv2d(w0, w1, rng.split("down0"), stride=2)
        self.enc1 = UNetLevel(w1, w1, h // 2, w // 2, cfg, rng.split("enc1"))
        self.down1 = Conv2d(w1, w1, rng.split("down1"), stride=2)

        self.fuse = FuseProjections(cfg.widths, rng.split("fuse"))

        self.mid1 = ResBlock(w1, w1, cfg.time_dim, rng.split("mid1"))
        self.midattn = SelfAttention(w1, h // 4, w // 4, rng.split("midattn"), cfg.relpos)
        self.midx = CrossAttention(w1, cfg.d_text, rng.split("midx"))
        self.mid2 = ResBlock(w1, w1, cfg.time_dim, rng.split("mid2"))

        self.up1 = Conv2d(w1, w1, rng.split("up1"))
        self.dec1 = UNetLevel(2 * w1, w1, h // 2, w // 2, cfg, rng.split("dec1"))
        self.up0 = Conv2d(w1, w0, rng.split("up0"))
        self.dec0 = UNetLevel(2 * w0, w0, h, w, cfg, rng.split("dec0"), self_attn=sa0)
        self.head = Conv2d(w0, cfg.in_channels, rng.split("head"))

    # --- conditioning helpers -------------------------------------------
    def time_embed(self, t: np.ndarray, t_total: int) -> Tensor:
        feats = Tensor(time_features(t, self.cfg.time_dim, t_total))
        return self.tmlp2(silu(self.tmlp1(feats)))

    def caption_kv(self, captions: list[str | None]) -> tuple[Tensor, np.ndarray]:
        """Pad tokenized captions to a common length; mask covers real tokens."""
        ids_list = [self.text.unconditional_ids() if c is None else self.text.token_ids(c)
                    for c in captions]
        lmax = max(len(i) for i in ids_list)
        ids = np.zeros((len(ids_list), lmax), dtype=np.int64)
        mask = np.zeros((len(ids_list), lmax), dtype=bool)
        for r, row in enumerate(ids_list):
            ids[r, :len(row)] = row
            mask[r, :len(row)] = True
        return self.text.table(ids), mask

    # --- core passes -----------------------------------------------------
    def encode(self, inputs: Tensor, kv: Tensor, kv_mask: np.ndarray,
               temb: Tensor, ebbox: Tensor | None) -> tuple[Tensor, Tensor, Tensor]:
        """inputs [N, C+1, h, w] -> (skip0, skip1, mid) feature maps."""
        x = self.stem(inputs)
        if ebbox is not None:
            x = add(x, channel_linear(self.ebbox_proj, ebbox))
        x = self.enc0(x, temb, kv, kv_mask)
        skip0 = x
        x = self.down0(x)
        x = self.enc1(x, temb, kv, kv_mask)
        skip1 = x
        mid = self.down1(x)
        return skip0, skip1, mid

    def decode(self, skip0: Tensor, skip1: Tensor, mid: Tensor,
               kv: Tensor, kv_mask: np.ndarray, temb: Tensor) -> Tensor:
        h, w = self.cfg.latent_h, self.cfg.latent_w
        x = self.mid1(mid, temb)
        x = self.midattn(x)
        x = self.midx(x, kv, kv_mask)
        x = self.mid2(x, temb)
        x = self.up1(bilinear_interp(x, h // 2, w // 2))
        x = concat([x, skip1], axis=1)
        x = self.dec1(x, temb, kv, kv_mask)
        x = self.up0(bilinear_interp(x, h, w))
        x = concat([x, skip0], axis=1)
        x = self.dec0(x, temb, kv, kv_mask)
        return self.head(silu(channel_rmsnorm(x)))

    def denoise_base(self, z: Tensor, t: np.ndarray, t_total: int,
                     global_captions: list[str | None]) -> Tensor:
        """Layout-free pass: zero layout channel, no coordinate branch,
        no fusion. This is the frozen base network's function."""
        n = z.shape[0]
        inputs = concat([z, Tensor(np.zeros((n, 1, self.cfg.latent_h, self.cfg.latent_w)))], axis=1)
        kv, kv_mask = self.caption_kv(global_captions)
        temb = self.time_embed(t, t_total)
        skip0, skip1, mid = self.encode(inputs, kv, kv_mask, temb, ebbox=None)
        return self.decode(skip0, skip1, mid, kv, kv_mask, temb)

    def prepare_guided(self, layouts: list[Layout]) -> dict:
        """Precompute the z-independent conditioning for a fixed layout
        batch: mask rasters, slot channels, the coordinate-branch output,
        and instance caption embeddings. Valid while the weights are fixed
        (inference); the training path recomputes everything so gradients
        reach the layout branch."""
        cfg = self.cfg
        h, w = cfg.latent_h, cfg.latent_w
        counts = [lay.active_count for lay in layouts]
        if any(c == 0 for c in counts):
            raise ValueError("guided pass requires at least one active instance per layout")
        slots: list[np.ndarray] = []
        inst_masks: list[np.ndarray] = []
        inst_caps: list[str] = []
        rows: list[int] = []
        for s, lay in enumerate(layouts):
            lat = build_layout_latent(lay, h, w, raster_scale=cfg.raster_scale)
            for i, inst in enumerate(lay.padded().instances):
                if inst.is_padding:
                    continue
                slots.append(lat.slots[i][None, None])
                raster = rasterize_mask(inst.bbox, cfg.raster_scale * h, cfg.raster_scale * w)
                inst_masks.append(raster.bits.astype(np.float64))
                if not inst.caption:
                    raise ValueError(f"layout {s}: active instance {i} has empty caption")
                inst_caps.append(inst.caption)
                rows.append(s)
        ebbox = self.ebbox(Tensor(np.stack(inst_masks)[:, None]))
        kv_i, kv_mask_i = self.caption_kv(inst_caps)
        return {
            "counts": counts, "rows": rows, "masks": inst_masks,
            "slots": slots, "ebbox_data": ebbox.data,
            "kv_data": kv_i.data, "kv_mask": kv_mask_i,
        }

    def denoise_guided(self, z: Tensor, t: np.ndarray, t_total: int,
                       layouts: list[Layout],
                       strategy: FusionStrategy = FusionStrategy.SUM,
                       weights: list[list[float]] | None = None,
                       literal_product: bool = False,
                       precomp: dict | None = None) -> Tensor:
        """Batched divide/conquer/combine pass; z [B,C,h,w].

        precomp (from prepare_guided over the same layout batch) is an
        inference-only shortcut: it replays the cached coordinate-branch
        output and caption embeddings as constants, so it must not be used
        when training the layout branch.
        """
        cached = precomp is not None
        if not cached:
            precomp = self.prepare_guided(layouts)
        counts = precomp["counts"]
        rows = precomp["rows"]
        inst_masks = precomp["masks"]
        if cached:
            ebbox = Tensor(precomp["ebbox_data"])
            kv_i, kv_mask_i = Tensor(precomp["kv_data"]), precomp["kv_mask"]
        else:
            # recompute through the live parameters so gradients flow
            ebbox = self.ebbox(Tensor(np.stack(inst_masks)[:, None]))
            kv_i, kv_mask_i = self.caption_kv(
                [i.caption for lay in layouts for i in lay.active])
        inst_inputs = []
        for slot, s in zip(precomp["slots"], rows):
            zb = narrow(z, 0, s, 1)
            inst_inputs.append(concat([zb, Tensor(slot)], axis=1))
        stacked = concat(inst_inputs, axis=0)                       # [sumN, C+1, h, w]
        t_rows = np.asarray(t, dtype=np.float64)[rows]
        temb_rows = self.time_embed(t_rows, t_total)
        s0, s1, mid = self.encode(stacked, kv_i, kv_mask_i, temb_rows, ebbox)

        fused_levels: list[list[Tensor]] = [[], [], []]
        offset = 0
        for s, cnt in enumerate(counts):
            feats = [
                [reshape(narrow(lvl, 0, offset + i, 1), lvl.shape[1:]) for i in range(cnt)]
                for lvl in (s0, s1, mid)
            ]
            masks = inst_masks[offset:offset + cnt]
            wts = None if weights is None else weights[s]
            for li, lvl_feats in enumerate(feats):
                fused_levels[li].append(
                    combine_level(lvl_feats, masks, wts, strategy,
                                  literal_product=literal_product))
            offset += cnt

        f0 = stack(fused_levels[0], axis=0)
        f1 = stack(fused_levels[1], axis=0)
        fm = stack(fused_levels[2], axis=0)
        f0 = channel_linear(self.fuse.skip0, f0)
        f1 = channel_linear(self.fuse.skip1, f1)
        fm = channel_linear(self.fuse.mid, fm)

        kv_g, kv_mask_g = self.caption_kv([lay.global_caption or None for lay in layouts])
        temb = self.time_embed(np.asarray(t, dtype=np.float64), t_total)
        return self.decode(f0, f1, fm, kv_g, kv_mask_g, temb)

    def denoise(self, z: Tensor, t: np.ndarray, t_total: int,
                layouts: list[Layout], guidance_on: bool,
                strategy: FusionStrategy = FusionStrategy.SUM,
                weights: list[list[float]] | None = None,
                text_cond: bool = True,
                literal_product: bool = False,
                precomp: dict | None = None) -> Tensor:
        if guidance_on:
            return self.denoise_guided(z, t, t_total, layouts, strategy, weights,
                                       literal_product=literal_product,
                                       precomp=precomp)
        caps: list[str | None] = [
            (lay.global_caption or None) if text_cond else None for lay in layouts
        ]
        return self.denoise_base(z, t, t_total, caps)

    def freeze_base(self) -> None:
        """Freeze everything except the plug-in (coordinate branch, relative
        position tables, text embedder); adapters attach as trainable later."""
        for name, p in self.named_parameters():
            p.requires_grad = any(
                name.startswith(pref) or f".{pref}" in name for pref in PLUGIN_PREFIXES
            )

    def default_lora_targets(self) -> tuple[str, ...]:
        return ("enc*.attn.*", "enc*.xattn.*", "fuse.*")


# --- single-sample operations (the module-level surface) -------------------

def divide(layout: Layout, z_t: Tensor, h: int, w: int,
           raster_scale: int = 8) -> list[Tensor]:
    """Per-instance inputs: the shared noise latent with that instance's
    interpolated mask slot appended as a channel."""
    lat = build_layout_latent(layout, h, w, raster_scale=raster_scale)
    out = []
    for i, inst in enumerate(layout.padded().instances):
        if inst.is_padding:
            continue
        out.append(concat([z_t, Tensor(lat.slots[i][None])], axis=0))
    return out


def conquer(model: ToyUNet, inputs: list[Tensor], captions: list[str],
            t: float, t_total: int,
            layout: Layout | None = None) -> list[tuple[Tensor, Tensor, Tensor]]:
    """Encode each instance input with its own sub-caption; returns one
    (skip0, skip1, mid) pyramid per instance.

    When the layout is given, the conv coordinate branch runs on each
    instance's full-resolution mask raster, matching the guided pass
    exactly; without it the branch is skipped (identical behavior at
    initialization, where the branch is a strict no-op).
    """
    if len(inputs) != len(captions):
        raise ValueError("one caption per instance input required")
    for i, c in enumerate(captions):
        if not c:
            raise ValueError(f"active instance {i} has empty caption")
    stacked = stack(inputs, axis=0)
    kv, kv_mask = model.caption_kv(list(captions))
    temb = model.time_embed(np.full(len(inputs), t), t_total)
    ebbox = None
    if layout is not None:
        cfg = model.cfg
        rasters = [
            rasterize_mask(inst.bbox, cfg.raster_scale * cfg.latent_h,
                           cfg.raster_scale * cfg.latent_w).bits.astype(np.float64)
            for inst in layout.active
        ]
        if len(rasters) != len(inputs):
            raise ValueError("layout active count must match instance inputs")
        ebbox = model.ebbox(Tensor(np.stack(rasters)[:, None]))
    s0, s1, mid = model.encode(stacked, kv, kv_mask, temb, ebbox)
    return [
        tuple(reshape(narrow(lvl, 0, i, 1), lvl.shape[1:]) for lvl in (s0, s1, mid))
        for i in range(len(inputs))
    ]


def unet_forward(model: ToyUNet, layout: Layout, z_t: Tensor, t: float,
                 t_total: int = 1000, captions: list[str] | None = None,
                 strategy: FusionStrategy = FusionStrategy.SUM,
                 guidance_on: bool = True,
                 weights: list[float] | None = None,
                 literal_product: bool = False) -> Tensor:
    """Single-sample denoiser call; z_t [C,h,w] -> predicted noise [C,h,w]."""
    if captions is not None:
        acts = layout.active
        if len(captions) != len(acts):
            raise ValueError("caption override must match active instance count")
        from dataclasses import replace
        layout = Layout(
            global_caption=layout.global_caption,
            instances=tuple(replace(inst, caption=cap) for inst, cap in zip(acts, captions)),
            n_max=layout.n_max,
        )
    zb = reshape(z_t, (1, *z_t.shape))
    out = model.denoise(zb, np.array([t]), t_total, [layout], guidance_on,
                        strategy=strategy,
                        weights=None if weights is None else [list(weights)],
                        literal_product=literal_product)
    return reshape(out, z_t.shape)
