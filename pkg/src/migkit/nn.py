"""Module tree with path-named parameters, plus the two learned layer kinds.

Parameter names are dotted paths ("enc0.attn.q.w") assembled by walking the
attribute tree; adapter injection, freezing, checkpointing and parameter
accounting all address layers by these names.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .rng import Rng
from .tensor import Tensor, conv2d, linear


class Module:
    """Base class; child modules and Tensor attributes register themselves."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield (prefix.rstrip("."), self)
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            a = arrays[name]
            if a.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {a.shape} vs {p.data.shape}")
            p.data = np.ascontiguousarray(a, dtype=np.float64)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items: list[Module] = []
        for m in mods:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def fanin_uniform(rng: Rng, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> Tensor:
    """Default weight init: uniform(-gain/sqrt(fan_in), +gain/sqrt(fan_in))."""
    bound = gain / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Linear(Module):
    """Dense layer y = W x + b with an optional attached low-rank adapter.

    The adapter slot is populated by lora.attach(); when present the layer
    computes W x + b + (alpha/r) * B (A x) and, once merged, W absorbs the
    delta and the slot empties.
    """

    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True,
                 init: str = "fanin"):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        if init == "fanin":
            self.w = fanin_uniform(rng, (d_out, d_in), d_in)
        elif init == "zero":
            self.w = Tensor(np.zeros((d_out, d_in)), requires_grad=True)
        elif init == "identity":
            if d_in != d_out:
                raise ValueError("identity init requires square layer")
            self.w = Tensor(np.eye(d_out), requires_grad=True)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        self.adapter = None  # set by lora.attach()

    def __call__(self, x: Tensor) -> Tensor:
        y = linear(x, self.w, self.b)
        if self.adapter is not None:
            y = y + self.adapter.delta(x)
        return y


class Conv2d(Module):
    """3x3 convolution layer; stride/pad fixed at construction."""

    def __init__(self, c_in: int, c_out: int, rng: Rng, stride: int = 1, pad: int = 1,
                 bias: bool = True, init: str = "fanin"):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.stride, self.pad = stride, pad
        fan_in = c_in * 9
        if init == "fanin":
            self.w = fanin_uniform(rng, (c_out, c_in, 3, 3), fan_in)
        elif init == "zero":
            self.w = Tensor(np.zeros((c_out, c_in, 3, 3)), requires_grad=True)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


def channel_linear(layer: "Linear", x: Tensor) -> Tensor:
    """Apply a Linear over the channel axis of an [N,C,H,W] map (a 1x1 conv)."""
    from .tensor import transpose
    t = transpose(x, (0, 2, 3, 1))
    t = layer(t)
    return transpose(t, (0, 3, 1, 2))


class Embedding(Module):
    """Lookup table [V, d]; rows gathered by integer id."""

    def __init__(self, vocab: int, dim: int, rng: Rng):
        super().__init__()
        self.table = fanin_uniform(rng, (vocab, dim), dim)

    def __call__(self, ids: np.ndarray) -> Tensor:
        from .tensor import embedding
        return embedding(self.table, ids)
