"""Seedable random streams with explicit names, no global state.

Every stochastic operation in the kit receives an Rng instance; derived
streams are keyed by name so that adding a new consumer never perturbs the
draws of an existing one.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

_SEED_ENV = "MIGKIT_SEED"


def resolve_seed(explicit: int | None = None) -> int:
    """Pick a seed: explicit argument, then MIGKIT_SEED env var, then 0."""
    if explicit is not None:
        return int(explicit)
    env = os.environ.get(_SEED_ENV)
    if env is not None:
        return int(env)
    return 0


class Rng:
    """A named 64-bit random stream backed by PCG64.

    `split(name)` derives an independent child stream deterministically from
    (seed, path), so the draw order inside one stream is insulated from every
    other stream.
    """

    def __init__(self, seed: int, path: str = "root"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = path
        digest = hashlib.sha256(f"{self.seed}:{path}".encode()).digest()
        self._gen = np.random.Generator(
            np.random.PCG64(int.from_bytes(digest[:8], "little"))
        )

    def split(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.path}/{name}")

    def normal(self, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def uniform(self, low: float, high: float, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        """Integers in [low, high), matching numpy's half-open convention."""
        return self._gen.integers(low, high, shape)

    def choice(self, n: int) -> int:
        return int(self._gen.integers(0, n))

    def shuffle(self, x: np.ndarray) -> None:
        self._gen.shuffle(x)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"
