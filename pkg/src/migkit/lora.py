"""Low-rank adapters: injection by name pattern, merging, accounting.

An adapter on a d_in -> d_out linear layer holds A [r, d_in] and B
[d_out, r]; the layer then computes W x + b + (alpha/r) * B (A x). B starts
at zero so a freshly attached model is exactly the base model. Injection
points are addressed by glob patterns over dotted layer paths (as reported
by Module.named_modules), which keeps the wiring explicit and auditable.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .nn import Linear, Module, fanin_uniform
from .rng import Rng
from .tensor import Tensor, linear


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 8
    alpha: float | None = None     # None -> alpha = rank (scale 1)
    targets: tuple[str, ...] = ()

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if not self.targets:
            raise ValueError("LoRAConfig.targets must be non-empty")

    @property
    def scale(self) -> float:
        alpha = self.rank if self.alpha is None else self.alpha
        return alpha / self.rank


class LoRAAdapter(Module):
    """Trainable low-rank delta attached to one linear layer."""

    def __init__(self, d_in: int, d_out: int, rank: int, scale: float, rng: Rng):
        super().__init__()
        self.rank = rank
        self.scale = scale
        self.a = fanin_uniform(rng, (rank, d_in), d_in)
        self.b = Tensor(np.zeros((d_out, rank)), requires_grad=True)

    def delta(self, x: Tensor) -> Tensor:
        return linear(linear(x, self.a), self.b) * self.scale

    def delta_matrix(self) -> np.ndarray:
        return self.scale * (self.b.data @ self.a.data)

    def param_count(self) -> int:
        return self.a.size + self.b.size


@dataclass
class AdapterRegistry:
    config: LoRAConfig
    adapters: dict[str, LoRAAdapter] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.adapters)

    def trainable_parameters(self) -> list[Tensor]:
        out = []
        for ad in self.adapters.values():
            out.extend([ad.a, ad.b])
        return out


def _matched_linears(model: Module, patterns: tuple[str, ...]) -> dict[str, Linear]:
    hits: dict[str, Linear] = {}
    unmatched = set(patterns)
    for path, mod in model.named_modules():
        if not isinstance(mod, Linear):
            continue
        for pat in patterns:
            if fnmatch.fnmatchcase(path, pat):
                hits[path] = mod
                unmatched.discard(pat)
                break
    if unmatched:
        raise ValueError(f"LoRA target patterns matched no linear layer: {sorted(unmatched)}")
    return hits


def attach(model: Module, cfg: LoRAConfig, rng: Rng) -> AdapterRegistry:
    """Inject adapters into every linear layer matching cfg.targets.

    A pattern that matches nothing is a hard error; silently adapting less
    of the model than asked for is forbidden. Layers keep their frozen base
    weights; only the new A/B tensors are trainable.
    """
    registry = AdapterRegistry(config=cfg)
    for path, layer in _matched_linears(model, cfg.targets).items():
        if layer.adapter is not None:
            raise ValueError(f"{path}: adapter already attached")
        if getattr(layer, "_merged", False):
            raise ValueError(f"{path}: layer already merged; detach is not possible")
        ad = LoRAAdapter(layer.d_in, layer.d_out, cfg.rank, cfg.scale,
                         rng.split(f"lora/{path}"))
        layer.adapter = ad
        registry.adapters[path] = ad
    return registry


def merge(model: Module) -> int:
    """Fold every attached adapter into its base weight; returns the count.

    After merging the adapters are gone and a second merge (or a detach) is
    rejected: the base weights are no longer the originals.
    """
    count = 0
    for path, mod in model.named_modules():
        if isinstance(mod, Linear) and mod.adapter is not None:
            mod.w.data = mod.w.data + mod.adapter.delta_matrix()
            mod.adapter = None
            mod._merged = True
            count += 1
    if count == 0:
        if any(getattr(m, "_merged", False) for _, m in model.named_modules()):
            raise ValueError("model already merged; double-merge rejected")
        return 0
    return count


def detach(model: Module) -> int:
    """Remove attached adapters, restoring exact base behavior."""
    count = 0
    for path, mod in model.named_modules():
        if not isinstance(mod, Linear):
            continue
        if getattr(mod, "_merged", False):
            raise ValueError(f"{path}: cannot detach after merge")
        if mod.adapter is not None:
            mod.adapter = None
            # drop the registered child so parameter walks no longer see it
            mod._children.pop("adapter", None)
            count += 1
    return count


def param_count(model: Module) -> tuple[int, int, float]:
    """(base_params, adapter_params, adapter/base ratio)."""
    base = 0
    adapter = 0
    for name, p in model.named_parameters():
        if ".adapter." in name or name.startswith("adapter."):
            adapter += p.size
        else:
            base += p.size
    return base, adapter, (adapter / base if base else 0.0)


def select_rank(dataset_size: int) -> int:
    """Dataset-size-scaled rank: 1K-scale data trains rank 8, full data 256."""
    if dataset_size < 1:
        raise ValueError(f"dataset_size must be >= 1, got {dataset_size}")
    if dataset_size <= 10_000:
        r = 8
    elif dataset_size <= 100_000:
        r = 64
    elif dataset_size <= 1_000_000:
        r = 128
    else:
        r = 256
    return min(max(r, 8), 256)


def save_adapters(registry: AdapterRegistry, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for layer_path, ad in registry.adapters.items():
        arrays[f"lora.{layer_path}.A"] = ad.a.data
        arrays[f"lora.{layer_path}.B"] = ad.b.data
    save_arrays(path, arrays)


def load_adapters(registry: AdapterRegistry, path) -> None:
    arrays = load_arrays(path)
    for layer_path, ad in registry.adapters.items():
        ad.a.data = np.ascontiguousarray(arrays[f"lora.{layer_path}.A"])
        ad.b.data = np.ascontiguousarray(arrays[f"lora.{layer_path}.B"])
