"""Wiring: build backbones from a RunConfig, dataset I/O, training loop.

Checkpoints hold the full named-parameter state (base + plug-in + adapter
tensors); loading rebuilds the same architecture from the resolved config
and then restores arrays, so a checkpoint plus its run_config.txt is a
complete model description.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import lora
from .checkpoint import load_arrays, save_arrays
from .config import RunConfig
from .diffusion import GuidanceSchedule, NoiseSchedule, SamplerConfig, sample, training_step
from .fusion import FusionStrategy
from .imageio import read_png, write_png
from .layout import Layout, layout_from_json, layout_to_json
from .optim import AdamW
from .rng import Rng
from .synth import (SceneSample, SyntheticSceneSpec, downsample_to_latent,
                    generate_synthetic_dataset)
from .text import load_vocab
from .unet import ToyUNet, UNetConfig
from .dit import DiTConfig, ToyDiT


def scene_spec_from_config(cfg: RunConfig) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(
        canvas=cfg.canvas,
        min_instances=cfg.min_instances,
        max_instances=cfg.max_instances,
        min_side=cfg.min_side,
        max_side=cfg.max_side,
        max_pair_iou=cfg.max_pair_iou,
        same_color_gap=cfg.same_color_gap,
        n_max=cfg.n_max,
    )


def build_backbone(cfg: RunConfig, seed: int | None = None, adapters: bool = True):
    """Construct the configured backbone; optionally freeze the base and
    attach adapters (adapters=False yields the raw trainable base, which the
    pretraining phase uses before freezing).

    Returns (model, registry | None). Reconstruction with the same config
    and seed is bit-identical, which is what makes checkpoints portable.
    """
    rng = Rng(cfg.seed if seed is None else seed)
    vocab = load_vocab(cfg.vocab_file) if cfg.vocab_file else None
    if cfg.backbone == "unet":
        mc = UNetConfig(widths=cfg.widths, d_text=cfg.d_text, time_dim=cfg.time_dim,
                        n_max=cfg.n_max, latent_h=cfg.latent_h, latent_w=cfg.latent_w,
                        relpos=cfg.relpos, self_attn_min_level=cfg.self_attn_min_level)
        model = ToyUNet(mc, rng.split("unet"), vocab=vocab)
    elif cfg.backbone == "dit":
        mc = DiTConfig(patch=cfg.patch, d_model=cfg.d_model, depth=cfg.depth,
                       d_text=cfg.d_text, time_dim=cfg.time_dim, n_max=cfg.n_max,
                       latent_h=cfg.latent_h, latent_w=cfg.latent_w,
                       ffn_mult=cfg.ffn_mult)
        model = ToyDiT(mc, rng.split("dit"), vocab=vocab)
    else:
        raise ValueError(f"unknown backbone {cfg.backbone!r}")
    if not adapters:
        return model, None
    model.freeze_base()
    targets = cfg.targets or model.default_lora_targets()
    lcfg = lora.LoRAConfig(rank=cfg.rank, alpha=cfg.alpha or None, targets=tuple(targets))
    registry = lora.attach(model, lcfg, rng.split("lora"))
    return model, registry


def attach_plugin(model, cfg: RunConfig, seed: int | None = None):
    """Freeze the (possibly pretrained) base and attach fresh adapters."""
    rng = Rng(cfg.seed if seed is None else seed)
    model.freeze_base()
    targets = cfg.targets or model.default_lora_targets()
    lcfg = lora.LoRAConfig(rank=cfg.rank, alpha=cfg.alpha or None, targets=tuple(targets))
    return lora.attach(model, lcfg, rng.split("lora"))


def save_model(model, path: str | Path) -> None:
    save_arrays(path, model.state_arrays())


def load_model(cfg: RunConfig, path: str | Path, seed: int | None = None):
    model, registry = build_backbone(cfg, seed=seed)
    model.load_state_arrays(load_arrays(path))
    return model, registry


# --- dataset on disk --------------------------------------------------------

def write_dataset(samples: list[SceneSample], out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "layouts.jsonl", "w") as fh:
        for k, s in enumerate(samples):
            write_png(out / "images" / f"{k:05d}.png", s.image)
            fh.write(layout_to_json(s.layout) + "\n")


def read_dataset(data_dir: str | Path, n_max: int = 10) -> list[SceneSample]:
    data = Path(data_dir)
    layouts = [layout_from_json(line, n_max=n_max)
               for line in (data / "layouts.jsonl").read_text().splitlines() if line.strip()]
    out = []
    for k, lay in enumerate(layouts):
        img = read_png(data / "images" / f"{k:05d}.png")
        out.append(SceneSample(image=img, layout=lay))
    return out


def gen_dataset_cmd(cfg: RunConfig, n: int, out_dir: str | Path, seed: int) -> None:
    spec = scene_spec_from_config(cfg)
    samples = generate_synthetic_dataset(spec, n, Rng(seed, "gen-data"))
    write_dataset(samples, out_dir)
    meta = {"n": n, "seed": seed, "canvas": spec.canvas,
            "instances": [spec.min_instances, spec.max_instances]}
    Path(out_dir, "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


# --- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    steps: int
    final_loss: float
    checkpoint: Path
    loss_csv: Path


def _phase(model, phase_name: str, steps: int, lr: float, cfg: RunConfig,
           x0: np.ndarray, layouts: list[Layout], sched: NoiseSchedule,
           strategy: FusionStrategy, rng: Rng, writer, fh, t_start: float,
           layout_dropout: float, log_every: int, quiet: bool,
           ckpt_path: Path, model_save) -> float:
    trainables = [p for _, p in model.named_parameters() if p.requires_grad]
    opt = AdamW(trainables, lr=lr, weight_decay=cfg.weight_decay,
                grad_clip=cfg.grad_clip)
    running = 0.0
    last = 0.0
    for step in range(1, steps + 1):
        idx = rng.split(f"batch/{step}").integers(0, len(layouts), cfg.batch)
        batch_x0 = x0[idx]
        batch_lay = [layouts[int(i)] for i in idx]
        opt.zero_grad()
        loss = training_step(model, batch_x0, batch_lay, sched,
                             rng.split(f"step/{step}"), strategy=strategy,
                             cfg_dropout=cfg.cfg_dropout,
                             layout_dropout=layout_dropout)
        loss.backward()
        opt.step()
        last = loss.item()
        running += last
        if step % log_every == 0 or step == steps:
            avg = running / (step % log_every or log_every)
            writer.writerow([phase_name, step, f"{avg:.6f}",
                             f"{time.time() - t_start:.1f}"])
            fh.flush()
            if not quiet:
                print(f"{phase_name} {step}/{steps} loss {avg:.4f}", flush=True)
            running = 0.0
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            model_save(model, ckpt_path)
    return last


def train_loop(cfg: RunConfig, data_dir: str | Path, out_dir: str | Path,
               log_every: int = 50, quiet: bool = False) -> TrainResult:
    """Two-phase training.

    Phase 1 ("base"): all parameters train a layout-free text-conditional
    denoiser — the desk-scale stand-in for a pretrained backbone checkpoint.
    Phase 2 ("plugin"): the base freezes; adapters attach; only the low-rank
    deltas, the layout branch, and the text embedder keep training, now with
    the guided divide/conquer/combine path active.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = read_dataset(data_dir, n_max=cfg.n_max)
    x0 = np.stack([downsample_to_latent(s.image, cfg.latent_h, cfg.latent_w)
                   for s in samples])
    layouts = [s.layout for s in samples]

    model, _ = build_backbone(cfg, adapters=False)
    sched = NoiseSchedule(t_train=cfg.t_train)
    strategy = FusionStrategy(cfg.strategy)
    rng = Rng(cfg.seed, "train")

    loss_csv = out / "train_loss.csv"
    ckpt_path = out / "model.ckpt"
    t_start = time.time()
    with open(loss_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "step", "loss", "elapsed_s"])
        if cfg.pretrain_steps:
            # layout_dropout = 1.0: never guided, text kept (minus CFG dropout)
            _phase(model, "base", cfg.pretrain_steps, cfg.pretrain_lr, cfg,
                   x0, layouts, sched, strategy, rng.split("base"), writer, fh,
                   t_start, layout_dropout=1.0, log_every=log_every,
                   quiet=quiet, ckpt_path=ckpt_path, model_save=save_model)
        attach_plugin(model, cfg)
        final = _phase(model, "plugin", cfg.train_steps, cfg.lr, cfg,
                       x0, layouts, sched, strategy, rng.split("plugin"),
                       writer, fh, t_start, layout_dropout=cfg.layout_dropout,
                       log_every=log_every, quiet=quiet, ckpt_path=ckpt_path,
                       model_save=save_model)
    save_model(model, ckpt_path)
    return TrainResult(steps=cfg.pretrain_steps + cfg.train_steps,
                       final_loss=final, checkpoint=ckpt_path, loss_csv=loss_csv)


# --- sampling wrapper ---------------------------------------------------------

def make_sampler(model, cfg: RunConfig, tau: float | None = None,
                 seed: int | None = None):
    """Batch sampler closure for evaluation: layouts -> [B,3,h,w] in [-1,1].

    Each call advances a chunk counter so successive batches draw distinct
    initial noise; the whole sequence is still a pure function of (config,
    seed, call order).
    """
    sampler = SamplerConfig(cfg_scale=cfg.cfg_scale,
                            seed=cfg.seed if seed is None else seed)
    guidance = GuidanceSchedule(tau=cfg.tau if tau is None else tau,
                                t_sample=cfg.steps)
    sched = NoiseSchedule(t_train=cfg.t_train)
    strategy = FusionStrategy(cfg.strategy)
    state = {"chunk": 0}

    def fn(layouts: list[Layout]) -> np.ndarray:
        rng = Rng(sampler.seed, f"sampler/chunk{state['chunk']}")
        state["chunk"] += 1
        return sample(model, layouts, sampler, guidance, sched,
                      strategy=strategy,
                      use_instance_weights=cfg.use_instance_weights,
                      rng=rng)

    return fn
