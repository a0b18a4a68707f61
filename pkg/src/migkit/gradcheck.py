"""Finite-difference audit suite covering every differentiable op plus
end-to-end training-loss slices through both backbones.

Each op is probed on several random instances against central differences
(eps = 1e-5, double precision) with tolerance 1e-6; the end-to-end slices
probe a handful of trainable coordinates through the full loss at 1e-4.
"""

from __future__ import annotations

import numpy as np

from .layout import BBox, InstanceSpec, Layout
from .rng import Rng
from .tensor import (Tensor, add, add_channel_bias, add_last_bias, attention,
                     bilinear_interp, channel_rmsnorm, concat, conv2d, embedding,
                     finite_diff_check, linear, mul, narrow, reshape, rmsnorm,
                     silu, softmax, stack, sub, tmean, transpose, tsum)

OP_TOL = 1e-6
E2E_TOL = 1e-4


def _rand(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _const(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def op_checks(seed: int = 0) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(seed)
    results: list[tuple[str, float, float]] = []

    def check(name: str, make):
        worst = 0.0
        for k in range(5):
            f, params = make(np.random.default_rng(seed * 1000 + k))
            worst = max(worst, finite_diff_check(f, params, max_coords=24,
                                                 rng=np.random.default_rng(k)))
        results.append((name, worst, OP_TOL))

    def mk_add(r):
        a, b = _rand(r, (3, 4)), _rand(r, (3, 4))
        c = _const(r, (3, 4))
        return lambda: tsum(mul(add(a, b), c)), [a, b]

    def mk_sub(r):
        a, b = _rand(r, (3, 4)), _rand(r, (3, 4))
        c = _const(r, (3, 4))
        return lambda: tsum(mul(sub(a, b), c)), [a, b]

    def mk_mul(r):
        a, b = _rand(r, (4, 5)), _rand(r, (4, 5))
        return lambda: tsum(mul(a, b)), [a, b]

    def mk_silu(r):
        x = _rand(r, (4, 6))
        c = _const(r, (4, 6))
        return lambda: tsum(mul(silu(x), c)), [x]

    def mk_linear(r):
        x, w, b = _rand(r, (5, 4)), _rand(r, (3, 4)), _rand(r, (3,))
        c = _const(r, (5, 3))
        return lambda: tsum(mul(linear(x, w, b), c)), [x, w, b]

    def mk_matmul(r):
        a, b = _rand(r, (2, 3, 4)), _rand(r, (2, 4, 5))
        c = _const(r, (2, 3, 5))
        from .tensor import matmul
        return lambda: tsum(mul(matmul(a, b), c)), [a, b]

    def mk_conv_s1(r):
        x, w, b = _rand(r, (2, 5, 5)), _rand(r, (3, 2, 3, 3)), _rand(r, (3,))
        c = _const(r, (3, 5, 5))
        return lambda: tsum(mul(conv2d(x, w, b, 1, 1), c)), [x, w, b]

    def mk_conv_s2(r):
        x, w, b = _rand(r, (1, 2, 6, 6)), _rand(r, (4, 2, 3, 3)), _rand(r, (4,))
        c = _const(r, (1, 4, 3, 3))
        return lambda: tsum(mul(conv2d(x, w, b, 2, 1), c)), [x, w, b]

    def mk_softmax(r):
        x = _rand(r, (3, 6))
        c = _const(r, (3, 6))
        return lambda: tsum(mul(softmax(x), c)), [x]

    def mk_rmsnorm(r):
        x = _rand(r, (3, 8))
        c = _const(r, (3, 8))
        return lambda: tsum(mul(rmsnorm(x), c)), [x]

    def mk_channel_rmsnorm(r):
        x = _rand(r, (2, 4, 3, 3))
        c = _const(r, (2, 4, 3, 3))
        return lambda: tsum(mul(channel_rmsnorm(x), c)), [x]

    def mk_interp(r):
        x = _rand(r, (2, 5, 7))
        c = _const(r, (2, 8, 4))
        return lambda: tsum(mul(bilinear_interp(x, 8, 4), c)), [x]

    def mk_attention(r):
        q, k, v = _rand(r, (4, 8)), _rand(r, (6, 8)), _rand(r, (6, 8))
        c = _const(r, (4, 8))
        mask = np.array([True, True, False, True, True, True])
        return lambda: tsum(mul(attention(q, k, v, mask), c)), [q, k, v]

    def mk_attention_bias(r):
        q, k, v = _rand(r, (2, 4, 8)), _rand(r, (2, 4, 8)), _rand(r, (2, 4, 8))
        bias = _rand(r, (4, 4))
        c = _const(r, (2, 4, 8))
        return lambda: tsum(mul(attention(q, k, v, bias=bias), c)), [q, k, v, bias]

    def mk_embedding(r):
        table = _rand(r, (7, 5))
        ids = np.array([0, 3, 3, 6, 1])
        c = _const(r, (5, 5))
        return lambda: tsum(mul(embedding(table, ids), c)), [table]

    def mk_shapes(r):
        x = _rand(r, (2, 3, 4))
        c = _const(r, (4, 4))
        def f():
            y = transpose(x, (1, 0, 2))        # [3, 2, 4]
            y = reshape(y, (3, 8))
            y = concat([narrow(y, 1, 0, 4), narrow(y, 1, 4, 4)], axis=0)  # [6, 4]
            y = stack([tmean(y, axis=0), tsum(y, axis=0)], axis=0)        # [2, 4]
            z = concat([y, y], axis=0)                                    # [4, 4]
            return tsum(mul(z, c))
        return f, [x]

    def mk_bias_adds(r):
        x = _rand(r, (2, 3, 4, 4))
        b1 = _rand(r, (3,))
        t = _rand(r, (2, 5, 3))
        b2 = _rand(r, (3,))
        c1 = _const(r, (2, 3, 4, 4))
        c2 = _const(r, (2, 5, 3))
        def f():
            return add(tsum(mul(add_channel_bias(x, b1), c1)),
                       tsum(mul(add_last_bias(t, b2), c2)))
        return f, [x, b1, t, b2]

    check("add", mk_add)
    check("sub", mk_sub)
    check("mul", mk_mul)
    check("silu", mk_silu)
    check("linear", mk_linear)
    check("matmul_batched", mk_matmul)
    check("conv2d_stride1", mk_conv_s1)
    check("conv2d_stride2", mk_conv_s2)
    check("softmax", mk_softmax)
    check("rmsnorm", mk_rmsnorm)
    check("channel_rmsnorm", mk_channel_rmsnorm)
    check("bilinear_interp", mk_interp)
    check("attention_masked", mk_attention)
    check("attention_bias", mk_attention_bias)
    check("embedding", mk_embedding)
    check("shape_ops", mk_shapes)
    check("bias_adds", mk_bias_adds)
    return results


def _tiny_layout() -> Layout:
    return Layout(global_caption="a scene with 2 shapes", instances=(
        InstanceSpec("red square", BBox(0.1, 0.15, 0.5, 0.6)),
        InstanceSpec("blue circle", BBox(0.55, 0.5, 0.9, 0.85)),
    ))


def end_to_end_checks(seed: int = 0) -> list[tuple[str, float, float]]:
    from . import lora
    from .diffusion import NoiseSchedule, training_step
    from .dit import DiTConfig, ToyDiT
    from .unet import ToyUNet, UNetConfig

    results = []
    rng = Rng(seed, "gradcheck")
    sched = NoiseSchedule(t_train=100)
    lay = _tiny_layout()
    x0 = np.random.default_rng(seed).standard_normal((2, 3, 8, 8)) * 0.5

    unet = ToyUNet(UNetConfig(widths=(8, 12), d_text=8, time_dim=8,
                              latent_h=8, latent_w=8), rng.split("unet"))
    unet.freeze_base()
    lora.attach(unet, lora.LoRAConfig(rank=2, targets=unet.default_lora_targets()),
                rng.split("lora"))
    params = [p for _, p in unet.named_parameters() if p.requires_grad]
    probe = params[:6] + params[-6:]

    def loss_unet():
        return training_step(unet, x0, [lay, lay], sched, rng.split("fixed"),
                             cfg_dropout=0.0)

    err = finite_diff_check(loss_unet, probe, max_coords=3,
                            rng=np.random.default_rng(1))
    results.append(("end_to_end_unet", err, E2E_TOL))

    dit = ToyDiT(DiTConfig(d_model=16, depth=2, d_text=8, time_dim=8,
                           latent_h=8, latent_w=8), rng.split("dit"))
    dit.freeze_base()
    lora.attach(dit, lora.LoRAConfig(rank=2, targets=dit.default_lora_targets()),
                rng.split("lora2"))
    params = [p for _, p in dit.named_parameters() if p.requires_grad]
    probe = params[:6] + params[-6:]

    def loss_dit():
        return training_step(dit, x0, [lay, lay], sched, rng.split("fixed"),
                             cfg_dropout=0.0)

    err = finite_diff_check(loss_dit, probe, max_coords=3,
                            rng=np.random.default_rng(2))
    results.append(("end_to_end_dit", err, E2E_TOL))
    return results


def run_gradient_suite(seed: int = 0) -> list[tuple[str, float, float]]:
    return op_checks(seed) + end_to_end_checks(seed)
