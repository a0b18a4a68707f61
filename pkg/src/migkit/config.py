"""Run configuration: a flat key = value file plus flag overrides.

The file format is one `key = value` per line, `#` comments, unknown keys
rejected. Every run writes its fully resolved config next to its outputs so
results are reproducible from the artifact alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class RunConfig:
    # backbone
    backbone: str = "unet"               # unet | dit
    widths: tuple[int, int] = (32, 64)
    d_text: int = 32
    time_dim: int = 32
    n_max: int = 10
    latent_h: int = 16
    latent_w: int = 16
    relpos: bool = True
    self_attn_min_level: int = 1
    patch: int = 2                       # dit
    d_model: int = 96                    # dit
    depth: int = 3                       # dit
    ffn_mult: int = 4                    # dit
    vocab_file: str = ""
    # adapters
    rank: int = 8
    alpha: float = 0.0                   # 0 -> alpha = rank
    targets: tuple[str, ...] = ()        # empty -> backbone defaults
    # diffusion / sampling
    t_train: int = 1000
    steps: int = 50
    tau: float = 0.7
    cfg_scale: float = 7.5
    seed: int = 0
    strategy: str = "mask"               # sum | avg | mask
    use_instance_weights: bool = True
    # training: phase 1 pretrains the base as a layout-free text-conditional
    # denoiser (full parameters), phase 2 freezes it and trains the plug-in
    lr: float = 2e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch: int = 4
    pretrain_steps: int = 4000
    pretrain_lr: float = 2e-3
    train_steps: int = 3000
    cfg_dropout: float = 0.1
    layout_dropout: float = 0.2
    checkpoint_every: int = 1000
    # synthetic data
    canvas: int = 64
    min_instances: int = 1
    max_instances: int = 3
    min_side: float = 0.25
    max_side: float = 0.55
    max_pair_iou: float = 0.05
    same_color_gap: float = 0.04
    # curation
    threshold: float = 60.0
    lambda_a: float = 0.3
    lambda_o: float = 0.7
    pair_count_norm: bool = False
    # execution
    workers: int = 1


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    default = getattr(RunConfig(), name)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if name == "widths":
            return tuple(int(p) for p in parts)
        return tuple(parts)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    updates = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {ln}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        updates[key] = _parse_value(key, raw)
    return replace(cfg, **updates)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base=base)


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r}: expected key=value")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"override: unknown key {key!r}")
        updates[key] = _parse_value(key, raw)
    return replace(cfg, **updates)


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir) / "run_config.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(config_to_text(cfg))
    return out
