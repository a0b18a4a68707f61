"""Toy diffusion transformer with joint attention over text, layout and
image tokens.

The latent is patchified (patch 2) into image tokens; the global caption
contributes text tokens; each active instance contributes exactly one
layout token (a linear projection of its flattened interpolated mask slot,
plus its pooled sub-caption embedding and the layout type embedding) and
one pooled sub-caption token appended to the text sequence. Padded slots
carry an excluded attention mask and are physically dropped before the
blocks run, so they cannot perturb image-token outputs even at the
last-bit level. With guidance off, every layout-derived token (layout
slots and the appended pooled captions) is masked, which reproduces the
text-only base network exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import Layout
from .masks import LayoutLatent, build_layout_latent
from .nn import Linear, Module, ModuleList, fanin_uniform
from .rng import Rng
from .tensor import (Tensor, add, add_last_bias, attention, concat, narrow,
                     reshape, rmsnorm, silu, stack, tmean, transpose)
from .text import ToyTextEmbedder
from .unet import time_features

PLUGIN_PREFIXES = ("layout_proj", "type_layout", "text.")

MAX_TEXT_TOKENS = 16


@dataclass(frozen=True)
class DiTConfig:
    in_channels: int = 3
    patch: int = 2
    d_model: int = 96
    depth: int = 3
    d_text: int = 32
    time_dim: int = 32
    n_max: int = 10
    latent_h: int = 16
    latent_w: int = 16
    ffn_mult: int = 4

    def __post_init__(self):
        if self.latent_h % self.patch or self.latent_w % self.patch:
            raise ValueError("latent extents must be divisible by the patch size")

    @property
    def n_image_tokens(self) -> int:
        return (self.latent_h // self.patch) * (self.latent_w // self.patch)


class JointAttention(Module):
    def __init__(self, d: int, rng: Rng):
        super().__init__()
        self.q = Linear(d, d, rng.split("q"))
        self.k = Linear(d, d, rng.split("k"))
        self.v = Linear(d, d, rng.split("v"))
        self.out = Linear(d, d, rng.split("out"))

    def __call__(self, x: Tensor) -> Tensor:
        t = rmsnorm(x)
        y = attention(self.q(t), self.k(t), self.v(t))
        return add(x, self.out(y))


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng: Rng):
        super().__init__()
        self.fc1 = Linear(d, mult * d, rng.split("fc1"))
        self.fc2 = Linear(mult * d, d, rng.split("fc2"))

    def __call__(self, x: Tensor) -> Tensor:
        return add(x, self.fc2(silu(self.fc1(rmsnorm(x)))))


class DiTBlock(Module):
    def __init__(self, d: int, mult: int, rng: Rng):
        super().__init__()
        self.attn = JointAttention(d, rng.split("attn"))
        self.ffn = FeedForward(d, mult, rng.split("ffn"))

    def __call__(self, x: Tensor) -> Tensor:
        return self.ffn(self.attn(x))


class ToyDiT(Module):
    def __init__(self, cfg: DiTConfig, rng: Rng, vocab=None):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        p = cfg.patch
        self.text = (ToyTextEmbedder(cfg.d_text, rng.split("text"))
                     if vocab is None else ToyTextEmbedder(cfg.d_text, rng.split("text"), vocab))
        self.patch_proj = Linear(cfg.in_channels * p * p, d, rng.split("patch_proj"))
        self.txt_proj = Linear(cfg.d_text, d, rng.split("txt_proj"))
        self.layout_proj = Linear(cfg.latent_h * cfg.latent_w, d,
                                  rng.split("layout_proj"), bias=False)
        self.pos_img = fanin_uniform(rng.split("pos_img"), (cfg.n_image_tokens, d), d)
        self.pos_txt = fanin_uniform(rng.split("pos_txt"), (MAX_TEXT_TOKENS, d), d)
        self.type_text = fanin_uniform(rng.split("type_text"), (d,), d)
        self.type_image = fanin_uniform(rng.split("type_image"), (d,), d)
        self.type_layout = Tensor(np.zeros(d), requires_grad=True)
        self.tmlp1 = Linear(cfg.time_dim, d, rng.split("tmlp1"))
        self.tmlp2 = Linear(d, d, rng.split("tmlp2"))
        self.blocks = ModuleList(
            DiTBlock(d, cfg.ffn_mult, rng.split(f"block{i}")) for i in range(cfg.depth)
        )
        self.head = Linear(d, cfg.in_channels * p * p, rng.split("head"))

    # --- token construction ----------------------------------------------
    def _patchify(self, z: Tensor) -> Tensor:
        c, h, w = z.shape
        p = self.cfg.patch
        x = reshape(z, (c, h // p, p, w // p, p))
        x = transpose(x, (1, 3, 0, 2, 4))
        return reshape(x, ((h // p) * (w // p), c * p * p))

    def _unpatchify(self, tokens: Tensor) -> Tensor:
        cfg = self.cfg
        p, c = cfg.patch, cfg.in_channels
        gh, gw = cfg.latent_h // p, cfg.latent_w // p
        x = reshape(tokens, (gh, gw, c, p, p))
        x = transpose(x, (2, 0, 3, 1, 4))
        return reshape(x, (c, cfg.latent_h, cfg.latent_w))

    def _text_tokens(self, caption: str | None) -> Tensor:
        emb = self.text.embed_tokens(caption)            # [L, d_text]
        n = emb.shape[0]
        if n > MAX_TEXT_TOKENS:
            raise ValueError(f"caption longer than {MAX_TEXT_TOKENS} tokens")
        tok = self.txt_proj(emb)
        tok = add(tok, narrow(self.pos_txt, 0, 0, n))
        return add(tok, _tile(self.type_text, n))

    def build_layout_tokens(self, layout: Layout, latent: LayoutLatent
                            ) -> tuple[Tensor, np.ndarray]:
        """One token per slot, padded slots zero with an excluded mask.

        token_i = layout_proj(flatten(slot_i)) + txt_proj(pooled caption_i)
                  + layout type embedding, for active slots.
        """
        cfg = self.cfg
        padded = layout.padded()
        mask = np.zeros(layout.n_max, dtype=bool)
        rows: list[Tensor] = []
        for i, inst in enumerate(padded.instances):
            if inst.is_padding:
                rows.append(Tensor(np.zeros(cfg.d_model)))
                continue
            mask[i] = True
            flat = Tensor(latent.slots[i].reshape(-1))
            tok = self.layout_proj(reshape(flat, (1, -1)))
            pooled = tmean(self.text.embed_tokens(inst.caption), axis=0)
            tok = add(reshape(tok, (cfg.d_model,)),
                      reshape(self.txt_proj(reshape(pooled, (1, -1))), (cfg.d_model,)))
            rows.append(add(tok, self.type_layout))
        return stack(rows, axis=0), mask

    def _pooled_caption_tokens(self, layout: Layout) -> list[Tensor]:
        """Per-instance pooled sub-caption embeddings appended to the global
        text sequence (no positional term, so slot order carries no signal)."""
        toks = []
        for inst in layout.active:
            pooled = tmean(self.text.embed_tokens(inst.caption), axis=0)
            tok = reshape(self.txt_proj(reshape(pooled, (1, -1))), (self.cfg.d_model,))
            toks.append(add(tok, self.type_text))
        return toks

    # --- forward -----------------------------------------------------------
    def forward_single(self, layout: Layout, z: Tensor, t: float, t_total: int,
                       guidance_on: bool, text_cond: bool = True) -> Tensor:
        cfg = self.cfg
        caption = layout.global_caption if (text_cond and layout.global_caption) else None
        txt = self._text_tokens(caption)
        segments = [txt]
        if guidance_on and layout.active_count > 0:
            latent = build_layout_latent(layout, cfg.latent_h, cfg.latent_w)
            lay_tokens, lay_mask = self.build_layout_tokens(layout, latent)
            active_rows = [
                reshape(narrow(lay_tokens, 0, i, 1), (cfg.d_model,))
                for i in range(layout.n_max) if lay_mask[i]
            ]
            segments.extend(stack([tok], axis=0) for tok in self._pooled_caption_tokens(layout))
            segments.append(stack(active_rows, axis=0))
        img = self.patch_proj(self._patchify(z))
        img = add(img, self.pos_img)
        img = add(img, _tile(self.type_image, cfg.n_image_tokens))
        segments.append(img)
        x = concat(segments, axis=0)

        feats = Tensor(time_features(np.array([t]), cfg.time_dim, t_total))
        temb = reshape(self.tmlp2(silu(self.tmlp1(feats))), (cfg.d_model,))
        x = add_last_bias(x, temb)
        for block in self.blocks:
            x = block(x)
        n_img = cfg.n_image_tokens
        img_out = narrow(x, 0, x.shape[0] - n_img, n_img)
        return self._unpatchify(self.head(rmsnorm(img_out)))

    def denoise(self, z: Tensor, t: np.ndarray, t_total: int,
                layouts: list[Layout], guidance_on: bool,
                text_cond: bool = True, **_ignored) -> Tensor:
        outs = []
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        for s, lay in enumerate(layouts):
            zs = reshape(narrow(z, 0, s, 1), z.shape[1:])
            outs.append(self.forward_single(lay, zs, float(t[s]), t_total,
                                            guidance_on, text_cond=text_cond))
        return stack(outs, axis=0)

    def denoise_base(self, z: Tensor, t: np.ndarray, t_total: int,
                     global_captions: list[str | None]) -> Tensor:
        outs = []
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        for s, cap in enumerate(global_captions):
            zs = reshape(narrow(z, 0, s, 1), z.shape[1:])
            lay = Layout(global_caption=cap or "", instances=(), n_max=self.cfg.n_max)
            outs.append(self.forward_single(lay, zs, float(t[s]), t_total,
                                            guidance_on=False, text_cond=cap is not None))
        return stack(outs, axis=0)

    def freeze_base(self) -> None:
        for name, p in self.named_parameters():
            p.requires_grad = any(
                name.startswith(pref) or f".{pref}" in name for pref in PLUGIN_PREFIXES
            )

    def default_lora_targets(self) -> tuple[str, ...]:
        return ("blocks.*.attn.*", "blocks.*.ffn.*")


def _tile(vec: Tensor, n: int) -> Tensor:
    """[d] -> [n, d] by stacking (gradient sums over rows)."""
    return stack([vec] * n, axis=0)


def dit_forward(model: ToyDiT, layout: Layout, z_t: Tensor, t: float,
                t_total: int = 1000, captions: list[str] | None = None,
                guidance_on: bool = True) -> Tensor:
    """Single-sample DiT denoiser call; z_t [C,h,w] -> noise prediction."""
    if captions is not None:
        from dataclasses import replace
        acts = layout.active
        if len(captions) != len(acts):
            raise ValueError("caption override must match active instance count")
        layout = Layout(
            global_caption=layout.global_caption,
            instances=tuple(replace(i, caption=c) for i, c in zip(acts, captions)),
            n_max=layout.n_max,
        )
    return model.forward_single(layout, z_t, t, t_total, guidance_on)
