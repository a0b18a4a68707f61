"""Minimal dense tensor engine with reverse-mode differentiation.

Double precision only, row-major numpy storage, closure-based tape. The op
set is exactly what the denoiser backbones and the mask branch need; there
is no broadcasting beyond bias-add, no views, no in-place math on tracked
tensors. Keeping the surface small is what makes the finite-difference
audit in `finite_diff_check` practical.

Shape conventions: images are [C,H,W] with an optional leading batch axis
[N,C,H,W]; token blocks are [n,d] or [B,n,d].
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape construction (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return np.ascontiguousarray(a)


class Tensor:
    """Dense float64 value with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: Array) -> None:
        """Add a gradient contribution; copies on first store because the
        caller may hand over a shared array."""
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def _accumulate_owned(self, g: Array) -> None:
        """As _accumulate, but the caller guarantees g is freshly allocated
        and never reused, so the first store can take ownership."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar loss; populates .grad fields."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _make(data: Array, parents: tuple[Tensor, ...], backward: Callable[[Array], None] | None) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# elementwise -------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; the second operand may be a python scalar."""
    a = _coerce(a)
    if isinstance(b, (int, float)):
        def back_s(g: Array) -> None:
            if a.requires_grad:
                a._accumulate_owned(g)
        return _make(a.data + float(b), (a,), back_s)
    b = _coerce(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def back(g: Array) -> None:
        # at most one parent may take ownership of the shared array
        if a.requires_grad and b.requires_grad:
            a._accumulate(g)
            b._accumulate_owned(g)
        elif a.requires_grad:
            a._accumulate_owned(g)
        elif b.requires_grad:
            b._accumulate_owned(g)

    return _make(a.data + b.data, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    a = _coerce(a)
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    b = _coerce(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def back(g: Array) -> None:
        if a.requires_grad:
            a._accumulate_owned(g)      # b's share below is a fresh negation
        if b.requires_grad:
            b._accumulate_owned(-g)

    return _make(a.data - b.data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise (Hadamard) product; scalar second operand allowed."""
    a = _coerce(a)
    if isinstance(b, (int, float)):
        c = float(b)

        def back_s(g: Array) -> None:
            if a.requires_grad:
                a._accumulate_owned(g * c)
        return _make(a.data * c, (a,), back_s)
    b = _coerce(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def back(g: Array) -> None:
        if a.requires_grad:
            a._accumulate_owned(g * b.data)
        if b.requires_grad:
            b._accumulate_owned(g * a.data)

    return _make(a.data * b.data, (a, b), back)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = _coerce(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def back(g: Array) -> None:
        if x.requires_grad:
            x._accumulate_owned(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _make(out, (x,), back)


# shape plumbing ----------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _coerce(x)
    shape = tuple(shape)
    old = x.shape

    def back(g: Array) -> None:
        if x.requires_grad:
            x._accumulate_owned(g.reshape(old))

    return _make(x.data.reshape(shape), (x,), back)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _coerce(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g: Array) -> None:
        if x.requires_grad:
            x._accumulate_owned(np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), back)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                p._accumulate_owned(np.ascontiguousarray(g[tuple(idx)]))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    x = _coerce(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx_t = tuple(idx)

    def back(g: Array) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx_t] = g
            x._accumulate_owned(full)

    return _make(np.ascontiguousarray(x.data[idx_t]), (x,), back)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]

    def back(g: Array) -> None:
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accumulate_owned(np.ascontiguousarray(np.take(g, i, axis=axis)))

    return _make(np.stack([p.data for p in parts], axis=axis), tuple(parts), back)


# reductions --------------------------------------------------------------

def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    x = _coerce(x)
    if axis is None:
        def back_all(g: Array) -> None:
            if x.requires_grad:
                x._accumulate_owned(np.full_like(x.data, float(g.reshape(()))))
        return _make(np.asarray(x.data.sum()), (x,), back_all)

    def back(g: Array) -> None:
        if x.requires_grad:
            x._accumulate_owned(np.ascontiguousarray(np.repeat(np.expand_dims(g, axis), x.shape[axis], axis=axis)))

    return _make(x.data.sum(axis=axis), (x,), back)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _coerce(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return tmean(mul(d, d))


# linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched 3-D matrix product (batch dims must match exactly)."""
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3):
        raise ValueError(f"matmul supports 2-D/3-D operands, got {a.shape} @ {b.shape}")

    def back(g: Array) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if ga.ndim > a.data.ndim:
                ga = ga.sum(axis=0)
            a._accumulate_owned(np.ascontiguousarray(ga))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if gb.ndim > b.data.ndim:
                gb = gb.sum(axis=0)
            b._accumulate_owned(np.ascontiguousarray(gb))

    return _make(np.matmul(a.data, b.data), (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., d_in] @ w[d_out, d_in]^T + b[d_out]."""
    x, w = _coerce(x), _coerce(w)
    d_in = x.shape[-1]
    if w.shape[1] != d_in:
        raise ValueError(f"linear: input dim {d_in} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    y = x2 @ w.data.T
    if b is not None:
        b = _coerce(b)
        y = y + b.data

    parents = (x, w) if b is None else (x, w, b)

    def back(g: Array) -> None:
        g2 = g.reshape(-1, w.shape[0])
        if x.requires_grad:
            x._accumulate_owned((g2 @ w.data).reshape(x.shape))
        if w.requires_grad:
            w._accumulate_owned(g2.T @ x2)
        if b is not None and b.requires_grad:
            b._accumulate_owned(g2.sum(axis=0))

    return _make(y.reshape(*lead, w.shape[0]), parents, back)


def add_last_bias(x: Tensor, b: Tensor) -> Tensor:
    """Bias-add over the last axis: x[..., d] + b[d]."""
    x, b = _coerce(x), _coerce(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"add_last_bias: {x.shape} + {b.shape}")

    def back(g: Array) -> None:
        if x.requires_grad:
            x._accumulate_owned(g)
        if b.requires_grad:
            b._accumulate_owned(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), back)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Bias-add over the channel axis: x[N,C,H,W] + b[C] or b[N,C].

    The one sanctioned broadcast in the engine.
    """
    x, b = _coerce(x), _coerce(b)
    if x.data.ndim != 4:
        raise ValueError(f"add_channel_bias expects [N,C,H,W], got {x.shape}")
    if b.data.ndim == 1:
        bb = b.data[None, :, None, None]
    elif b.data.ndim == 2:
        bb = b.data[:, :, None, None]
    else:
        raise ValueError(f"bias must be [C] or [N,C], got {b.shape}")

    def back(g: Array) -> None:
        if x.requires_grad:
            x._accumulate_owned(g)
        if b.requires_grad:
            if b.data.ndim == 1:
                b._accumulate_owned(g.sum(axis=(0, 2, 3)))
            else:
                b._accumulate_owned(g.sum(axis=(2, 3)))

    return _make(x.data + bb, (x, b), back)


# convolution -------------------------------------------------------------

def _im2col(x: Array, stride: int, pad: int) -> tuple[Array, int, int]:
    """x[N,C,H,W] -> cols[N, H'*W', C*9] for a 3x3 kernel."""
    n, c, h, w = x.shape
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
        xp[:, :, pad:pad + h, pad:pad + w] = x
        x = xp
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - 3) // stride + 1
    wo = (wp - 3) // stride + 1
    cols = np.empty((n, c, 9, ho, wo), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki * 3 + kj] = x[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    return cols.reshape(n, c * 9, ho * wo).transpose(0, 2, 1).copy(), ho, wo


def _col2im(gcols: Array, xshape: tuple[int, ...], stride: int, pad: int) -> Array:
    n, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - 3) // stride + 1
    wo = (wp - 3) // stride + 1
    g = gcols.transpose(0, 2, 1).reshape(n, c, 9, ho, wo)
    xg = np.zeros((n, c, hp, wp), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            xg[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += g[:, :, ki * 3 + kj]
    if pad:
        xg = xg[:, :, pad:hp - pad, pad:wp - pad]
    return np.ascontiguousarray(xg)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 convolution, stride in {1,2}, pad in {0,1}; batched or single image.

    x: [C,H,W] or [N,C,H,W]; w: [K,C,3,3]; b: [K] or None.
    Output spatial extent: floor((H + 2*pad - 3)/stride) + 1.
    """
    x, w = _coerce(x), _coerce(w)
    if w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d kernel must be [K,C,3,3], got {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if pad not in (0, 1):
        raise ValueError(f"pad must be 0 or 1, got {pad}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    n, c, h, wth = xd.shape
    k = w.shape[0]
    if w.shape[1] != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {w.shape}")
    if h + 2 * pad < 3 or wth + 2 * pad < 3:
        raise ValueError(f"conv2d input {h}x{wth} too small for 3x3 kernel with pad {pad}")

    cols, ho, wo = _im2col(xd, stride, pad)            # [N, HoWo, C*9]
    wmat = w.data.reshape(k, c * 9)
    y = cols @ wmat.T                                   # [N, HoWo, K]
    if b is not None:
        b = _coerce(b)
        y = y + b.data
    y = np.ascontiguousarray(y.transpose(0, 2, 1).reshape(n, k, ho, wo))
    if squeeze:
        y = y[0]
    parents = (x, w) if b is None else (x, w, b)

    def back(g: Array) -> None:
        gd = g[None] if squeeze else g
        g2 = np.ascontiguousarray(gd.reshape(n, k, ho * wo).transpose(0, 2, 1))
        if w.requires_grad:
            gw = g2.reshape(-1, k).T @ cols.reshape(-1, c * 9)
            w._accumulate_owned(gw.reshape(k, c, 3, 3))
        if b is not None and b.requires_grad:
            b._accumulate_owned(g2.sum(axis=(0, 1)))
        if x.requires_grad:
            gcols = g2 @ wmat                                # [N, HoWo, C*9]
            gx = _col2im(gcols, (n, c, h, wth), stride, pad)
            x._accumulate_owned(gx[0] if squeeze else np.ascontiguousarray(gx))

    return _make(y, parents, back)


# softmax / normalization -------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along one axis; -inf entries get exactly zero weight."""
    x = _coerce(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)               # guard all-masked rows upstream
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    p = e / s

    def back(g: Array) -> None:
        if x.requires_grad:
            dot = (g * p).sum(axis=axis, keepdims=True)
            x._accumulate_owned(p * (g - dot))

    return _make(p, (x,), back)


def rmsnorm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Root-mean-square normalization over the last axis."""
    x = _coerce(x)
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    y = x.data * inv

    def back(g: Array) -> None:
        if x.requires_grad:
            n = x.shape[-1]
            gy_x = (g * x.data).sum(axis=-1, keepdims=True)
            x._accumulate_owned(inv * g - (inv ** 3 / n) * gy_x * x.data)

    return _make(y, (x,), back)


def channel_rmsnorm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """RMS-normalize each pixel's channel vector of an [N,C,H,W] map."""
    x = _coerce(x)
    if x.data.ndim != 4:
        raise ValueError(f"channel_rmsnorm expects [N,C,H,W], got {x.shape}")
    ms = (x.data * x.data).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    y = x.data * inv

    def back(g: Array) -> None:
        if x.requires_grad:
            c = x.shape[1]
            gy_x = (g * x.data).sum(axis=1, keepdims=True)
            x._accumulate_owned(inv * g - (inv ** 3 / c) * gy_x * x.data)

    return _make(y, (x,), back)


# resampling --------------------------------------------------------------

def _interp_matrix(n_out: int, n_in: int) -> Array:
    """Row-interpolation matrix [n_out, n_in], align-corners=false, edge clamp."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = math.floor(src)
        frac = src - lo
        i0 = min(max(lo, 0), n_in - 1)
        i1 = min(max(lo + 1, 0), n_in - 1)
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


_INTERP_CACHE: dict[tuple[int, int], Array] = {}


def _interp_mat_cached(n_out: int, n_in: int) -> Array:
    key = (n_out, n_in)
    if key not in _INTERP_CACHE:
        _INTERP_CACHE[key] = _interp_matrix(n_out, n_in)
    return _INTERP_CACHE[key]


def bilinear_interp(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Separable bilinear resize of the trailing two axes (align-corners=false).

    Exact identity when the target equals the source shape; linear in x.
    """
    x = _coerce(x)
    if h_out < 1 or w_out < 1:
        raise ValueError(f"target extents must be >= 1, got {h_out}x{w_out}")
    h_in, w_in = x.shape[-2], x.shape[-1]
    if (h_out, w_out) == (h_in, w_in):
        def back_id(g: Array) -> None:
            if x.requires_grad:
                x._accumulate_owned(g)
        return _make(x.data.copy(), (x,), back_id)
    a = _interp_mat_cached(h_out, h_in)                   # [Ho, Hi]
    bm = _interp_mat_cached(w_out, w_in)                  # [Wo, Wi]
    lead = x.shape[:-2]
    xf = x.data.reshape(-1, h_in, w_in)
    # separable resize: y = A x B^T per map
    y = np.matmul(np.matmul(a[None], xf), bm.T[None])

    def back(g: Array) -> None:
        if x.requires_grad:
            gf = g.reshape(-1, h_out, w_out)
            gx = np.matmul(np.matmul(a.T[None], gf), bm[None])
            x._accumulate_owned(np.ascontiguousarray(gx.reshape(x.shape)))

    return _make(np.ascontiguousarray(y.reshape(*lead, h_out, w_out)), (x,), back)


# attention ---------------------------------------------------------------

def _add_broadcast2d(x: Tensor, b: Tensor) -> Tensor:
    """x[B,n,m] + b[n,m], broadcasting b over the batch axis."""
    if x.shape[1:] != b.shape:
        raise ValueError(f"broadcast add mismatch: {x.shape} + {b.shape}")

    def back(g: Array) -> None:
        if x.requires_grad:
            x._accumulate_owned(g)
        if b.requires_grad:
            b._accumulate_owned(g.sum(axis=0))

    return _make(x.data + b.data[None], (x, b), back)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
              bias: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias) v with optional boolean key mask.

    q: [n,d] or [B,n,d]; k, v: [m,d] or [B,m,d]; mask: [m] or [B,m] with True
    meaning the key participates. Masked keys receive logit -inf and exactly
    zero weight. bias, when given, is added to the logits (e.g. a relative
    position table); a 2-D bias broadcasts over the batch axis.
    """
    q, k, v = _coerce(q), _coerce(k), _coerce(v)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    kt = transpose(k, (1, 0)) if k.data.ndim == 2 else transpose(k, (0, 2, 1))
    logits = matmul(mul(q, 1.0 / math.sqrt(d)), kt)
    if bias is not None:
        if bias.data.ndim == 2 and logits.data.ndim == 3:
            logits = _add_broadcast2d(logits, bias)
        else:
            logits = add(logits, bias)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("attention: all keys masked for at least one row")
        neg = np.where(mask, 0.0, -np.inf)
        if logits.data.ndim == 3 and neg.ndim == 1:
            neg = neg[None, None, :]
        elif logits.data.ndim == 3 and neg.ndim == 2:
            neg = neg[:, None, :]
        else:
            neg = neg[None, :] if neg.ndim == 1 else neg
        logits = add(logits, Tensor(np.broadcast_to(neg, logits.shape).copy()))
    p = softmax(logits, axis=-1)
    return matmul(p, v)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table [V,d]; grad scatter-adds."""
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def back(g: Array) -> None:
        if table.requires_grad:
            v, d = table.shape
            flat_ids = ids.reshape(-1)
            # one flattened bincount covers the whole [V, d] scatter
            keys = (flat_ids[:, None] * d + np.arange(d)[None, :]).reshape(-1)
            gt = np.bincount(keys, weights=g.reshape(-1), minlength=v * d)
            table._accumulate_owned(gt.reshape(v, d))

    return _make(out, (table,), back)


# verification ------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor],
                      eps: float = 1e-5, max_coords: int = 64,
                      rng: np.random.Generator | None = None) -> float:
    """Central-difference audit of reverse-mode gradients.

    Runs f once for the analytic gradients, then probes up to `max_coords`
    coordinates per parameter with (f(p+eps e) - f(p-eps e)) / (2 eps).
    Returns the max relative error, |ad - fd| / max(|ad|, |fd|, 1e-2); the
    floor keeps roundoff noise on near-zero gradients from registering as
    disagreement.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    grads = [None if p.grad is None else p.grad.copy() for p in params]
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + eps
            fp = f().item()
            flat[c] = keep - eps
            fm = f().item()
            flat[c] = keep
            fd = (fp - fm) / (2.0 * eps)
            ad = g.reshape(-1)[c]
            err = abs(ad - fd) / max(abs(ad), abs(fd), 1e-2)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
