import numpy as np
import pytest

from migkit import lora
from migkit.dit import DiTConfig, ToyDiT, dit_forward
from migkit.fusion import FusionStrategy, combine, combine_level
from migkit.layout import BBox, InstanceSpec, Layout
from migkit.masks import build_layout_latent, rasterize_mask
from migkit.rng import Rng
from migkit.tensor import Tensor, finite_diff_check, mul, tsum
from migkit.text import ToyTextEmbedder
from migkit.unet import ToyUNet, UNetConfig, conquer, divide, unet_forward

TINY = UNetConfig(widths=(8, 12), d_text=8, time_dim=8, latent_h=8, latent_w=8)
TINY_DIT = DiTConfig(d_model=16, depth=2, d_text=8, time_dim=8, latent_h=8, latent_w=8)


def tiny_unet(seed=3, attach=False, cfg=TINY):
    rng = Rng(seed)
    model = ToyUNet(cfg, rng.split("unet"))
    model.freeze_base()
    if attach:
        lora.attach(model, lora.LoRAConfig(rank=2, targets=model.default_lora_targets()),
                    rng.split("lora"))
    return model


def tiny_dit(seed=3, attach=False, cfg=TINY_DIT):
    rng = Rng(seed)
    model = ToyDiT(cfg, rng.split("dit"))
    model.freeze_base()
    if attach:
        lora.attach(model, lora.LoRAConfig(rank=2, targets=model.default_lora_targets()),
                    rng.split("lora"))
    return model


@pytest.fixture
def layout3():
    return Layout(global_caption="a scene with 3 shapes", instances=(
        InstanceSpec("red square", BBox(0.05, 0.05, 0.4, 0.4)),
        InstanceSpec("blue circle", BBox(0.5, 0.1, 0.9, 0.5)),
        InstanceSpec("green square", BBox(0.2, 0.55, 0.7, 0.95)),
    ))


class TestTextEmbedder:
    def test_unknown_word_maps_to_unk(self, rng):
        emb = ToyTextEmbedder(8, rng)
        ids = emb.token_ids("red zeppelin")
        assert ids[0] != 0 and ids[1] == 0

    def test_pooled_dimension(self, rng):
        emb = ToyTextEmbedder(8, rng)
        assert emb.embed_pooled("red square").shape == (8,)

    def test_empty_caption_rejected(self, rng):
        emb = ToyTextEmbedder(8, rng)
        with pytest.raises(ValueError):
            emb.embed_tokens("")

    def test_unconditional_is_unk(self, rng):
        emb = ToyTextEmbedder(8, rng)
        np.testing.assert_array_equal(emb.embed_tokens(None).data, emb.table.table.data[:1])


class TestDivide:
    def test_counts_and_channels(self, layout3):
        z = Tensor(np.random.default_rng(0).standard_normal((3, 8, 8)))
        inputs = divide(layout3, z, 8, 8)
        assert len(inputs) == 3
        assert all(inp.shape == (4, 8, 8) for inp in inputs)

    def test_latent_channels_identical(self, layout3):
        z = Tensor(np.random.default_rng(0).standard_normal((3, 8, 8)))
        inputs = divide(layout3, z, 8, 8)
        for inp in inputs:
            np.testing.assert_array_equal(inp.data[:3], z.data)

    def test_slot_channel_matches_mask_encoder(self, layout3):
        z = Tensor(np.zeros((3, 8, 8)))
        inputs = divide(layout3, z, 8, 8)
        lat = build_layout_latent(layout3, 8, 8)
        for i, inp in enumerate(inputs):
            np.testing.assert_array_equal(inp.data[3], lat.slots[i])


class TestConquer:
    def test_single_instance_reduces_to_conditional_encoding(self, layout3):
        model = tiny_unet()
        z = Tensor(np.random.default_rng(1).standard_normal((3, 8, 8)))
        single = Layout(global_caption="x", instances=layout3.instances[:1])
        pyrs = conquer(model, divide(single, z, 8, 8), ["red square"], 10.0, 100)
        assert len(pyrs) == 1
        s0, s1, mid = pyrs[0]
        assert s0.shape == (8, 8, 8) and s1.shape == (12, 4, 4) and mid.shape == (12, 2, 2)

    def test_permutation_permutes_features(self, layout3):
        model = tiny_unet()
        z = Tensor(np.random.default_rng(1).standard_normal((3, 8, 8)))
        caps = [i.caption for i in layout3.active]
        fwd = conquer(model, divide(layout3, z, 8, 8), caps, 10.0, 100)
        perm_layout = Layout(global_caption=layout3.global_caption,
                             instances=layout3.instances[::-1])
        rev = conquer(model, divide(perm_layout, z, 8, 8), caps[::-1], 10.0, 100)
        for a, b in zip(fwd, rev[::-1]):
            for la, lb in zip(a, b):
                np.testing.assert_allclose(la.data, lb.data, atol=1e-12)

    def test_empty_caption_on_active_instance_rejected(self, layout3):
        model = tiny_unet()
        z = Tensor(np.zeros((3, 8, 8)))
        with pytest.raises(ValueError, match="empty caption"):
            conquer(model, divide(layout3, z, 8, 8), ["red square", "", "green square"],
                    10.0, 100)


class TestCombine:
    def _pyramids(self, np_rng, n=2):
        return [[Tensor(np_rng.standard_normal((4, 8, 8))),
                 Tensor(np_rng.standard_normal((6, 4, 4)))] for _ in range(n)]

    def test_sum_and_avg_algebra(self, np_rng):
        f = Tensor(np_rng.standard_normal((4, 8, 8)))
        two = [[f], [f]]
        s = combine(two, None, None, FusionStrategy.SUM)[0]
        a = combine(two, None, None, FusionStrategy.AVG)[0]
        np.testing.assert_allclose(s.data, 2 * f.data, atol=1e-14)
        np.testing.assert_allclose(a.data, f.data, atol=1e-14)

    def test_sum_equals_n_times_avg(self, np_rng):
        pyrs = self._pyramids(np_rng, n=3)
        s = combine(pyrs, None, None, FusionStrategy.SUM)
        a = combine(pyrs, None, None, FusionStrategy.AVG)
        for ls, la in zip(s, a):
            np.testing.assert_allclose(ls.data, 3 * la.data, atol=1e-12)

    def test_single_full_mask_identity(self, np_rng):
        f = Tensor(np_rng.standard_normal((4, 8, 8)))
        full = np.ones((16, 16))
        out = combine_level([f], [full], [1.0], FusionStrategy.MASK)
        np.testing.assert_array_equal(out.data, f.data)

    def test_disjoint_masks_select_covering_instance(self, np_rng):
        h = w = 8
        f1 = Tensor(np_rng.standard_normal((3, h, w)))
        f2 = Tensor(np_rng.standard_normal((3, h, w)))
        m1 = np.zeros((h, w)); m1[:, :4] = 1.0
        m2 = np.zeros((h, w)); m2[:, 4:] = 1.0
        out = combine_level([f1, f2], [m1, m2], None, FusionStrategy.MASK).data
        np.testing.assert_array_equal(out[:, :, :4], f1.data[:, :, :4])
        np.testing.assert_array_equal(out[:, :, 4:], f2.data[:, :, 4:])

    def test_mask_fusion_matches_brute_force(self, np_rng):
        # elementwise oracle over random masks/weights, coverage holes included
        for trial in range(50):
            n = int(np_rng.integers(1, 4))
            h = w = 6
            feats = [np_rng.standard_normal((2, h, w)) for _ in range(n)]
            masks = [(np_rng.uniform(size=(h, w)) > 0.5).astype(float) for _ in range(n)]
            weights = list(np_rng.uniform(0.2, 1.0, n))
            out = combine_level([Tensor(f) for f in feats], masks, weights,
                                FusionStrategy.MASK).data
            expect = np.zeros((2, h, w))
            for c in range(2):
                for r in range(h):
                    for col in range(w):
                        cov = sum(m[r, col] for m in masks)
                        if cov > 0:
                            num = sum(m[r, col] * wt * f[c, r, col]
                                      for m, wt, f in zip(masks, weights, feats))
                            expect[c, r, col] = num / cov
                        else:
                            expect[c, r, col] = sum(f[c, r, col] for f in feats) / n
            assert np.abs(out - expect).max() < 1e-12

    def test_literal_product_zeroes_disjoint(self, np_rng):
        f1 = Tensor(np.ones((1, 4, 4)))
        f2 = Tensor(np.ones((1, 4, 4)))
        m1 = np.zeros((4, 4)); m1[:2] = 1
        m2 = np.zeros((4, 4)); m2[2:] = 1
        out = combine_level([f1, f2], [m1, m2], None, FusionStrategy.MASK,
                            literal_product=True).data
        assert np.abs(out).max() == 0.0

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            combine_level([], [], None, FusionStrategy.SUM)

    def test_shape_mismatch_rejected(self, np_rng):
        with pytest.raises(ValueError):
            combine_level([Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((2, 3, 3)))],
                          None, None, FusionStrategy.SUM)


class TestUNetForward:
    def test_base_preservation(self, layout3, np_rng):
        adapted = tiny_unet(seed=5, attach=True)
        baseline = tiny_unet(seed=5, attach=False)
        worst = 0.0
        for k in range(100):
            z = Tensor(np_rng.standard_normal((3, 8, 8)))
            t = float(np_rng.integers(1, 100))
            a = unet_forward(adapted, layout3, z, t, t_total=100, guidance_on=False)
            b = unet_forward(baseline, layout3, z, t, t_total=100, guidance_on=False)
            worst = max(worst, np.abs(a.data - b.data).max())
        assert worst < 1e-10

    def test_output_shape(self, layout3, np_rng):
        model = tiny_unet(attach=True)
        z = Tensor(np_rng.standard_normal((3, 8, 8)))
        out = unet_forward(model, layout3, z, 50.0, t_total=100,
                           strategy=FusionStrategy.MASK)
        assert out.shape == (3, 8, 8)

    def test_deterministic_under_fixed_inputs(self, layout3):
        model = tiny_unet(attach=True)
        z = Tensor(np.random.default_rng(4).standard_normal((3, 8, 8)))
        a = unet_forward(model, layout3, z, 50.0, t_total=100).data
        b = unet_forward(model, layout3, z, 50.0, t_total=100).data
        np.testing.assert_array_equal(a, b)

    def test_caption_override_count_checked(self, layout3, np_rng):
        model = tiny_unet(attach=True)
        z = Tensor(np_rng.standard_normal((3, 8, 8)))
        with pytest.raises(ValueError):
            unet_forward(model, layout3, z, 50.0, t_total=100, captions=["just one"])

    def test_instance_weights_change_output(self, layout3, np_rng):
        model = tiny_unet(attach=True)
        # give adapters some signal so fusion weights matter
        for _, p in model.named_parameters():
            if p.requires_grad:
                p.data = p.data + np_rng.standard_normal(p.shape) * 0.05
        z = Tensor(np_rng.standard_normal((3, 8, 8)))
        a = unet_forward(model, layout3, z, 50.0, t_total=100,
                         strategy=FusionStrategy.MASK, weights=[0.6, 0.3, 0.1])
        b = unet_forward(model, layout3, z, 50.0, t_total=100,
                         strategy=FusionStrategy.MASK, weights=[0.1, 0.3, 0.6])
        assert np.abs(a.data - b.data).max() > 0


class TestDiTForward:
    def test_masking_all_layout_tokens_is_text_only(self, layout3, np_rng):
        model = tiny_dit(attach=True)
        z = Tensor(np_rng.standard_normal((3, 8, 8)))
        guided_off = dit_forward(model, layout3, z, 50.0, t_total=100, guidance_on=False)
        text_only = model.forward_single(
            Layout(global_caption=layout3.global_caption), z, 50.0, 100, guidance_on=True)
        np.testing.assert_array_equal(guided_off.data, text_only.data)

    def test_output_shape(self, layout3, np_rng):
        model = tiny_dit(attach=True)
        z = Tensor(np_rng.standard_normal((3, 8, 8)))
        assert dit_forward(model, layout3, z, 50.0, t_total=100).shape == (3, 8, 8)

    def test_padding_inertness_exact(self, layout3, np_rng):
        model = tiny_dit(attach=True)
        z = Tensor(np_rng.standard_normal((3, 8, 8)))
        out10 = dit_forward(model, layout3, z, 50.0, t_total=100).data
        wider = Layout(global_caption=layout3.global_caption,
                       instances=layout3.instances, n_max=8)
        out8 = dit_forward(model, wider, z, 50.0, t_total=100).data
        assert np.abs(out10 - out8).max() == 0.0

    def test_permutation_equivariance(self, layout3, np_rng):
        model = tiny_dit(attach=True)
        z = Tensor(np_rng.standard_normal((3, 8, 8)))
        a = dit_forward(model, layout3, z, 50.0, t_total=100).data
        perm = Layout(global_caption=layout3.global_caption,
                      instances=layout3.instances[::-1])
        b = dit_forward(model, perm, z, 50.0, t_total=100).data
        assert np.abs(a - b).max() < 1e-12

    def test_zero_active_equals_text_only(self, np_rng):
        model = tiny_dit(attach=True)
        z = Tensor(np_rng.standard_normal((3, 8, 8)))
        empty = Layout(global_caption="a scene with 1 shapes")
        on = model.forward_single(empty, z, 50.0, 100, guidance_on=True)
        off = model.forward_single(empty, z, 50.0, 100, guidance_on=False)
        np.testing.assert_array_equal(on.data, off.data)

    def test_base_preservation(self, layout3, np_rng):
        adapted = tiny_dit(seed=6, attach=True)
        baseline = tiny_dit(seed=6, attach=False)
        worst = 0.0
        for _ in range(100):
            z = Tensor(np_rng.standard_normal((3, 8, 8)))
            a = dit_forward(adapted, layout3, z, 20.0, t_total=100, guidance_on=False)
            b = dit_forward(baseline, layout3, z, 20.0, t_total=100, guidance_on=False)
            worst = max(worst, np.abs(a.data - b.data).max())
        assert worst < 1e-10

    def test_full_box_token_differs_from_empty_slot(self, np_rng):
        model = tiny_dit()
        lay = Layout(instances=(InstanceSpec("red square", BBox(0, 0, 1, 1)),))
        lat = build_layout_latent(lay, 8, 8)
        tokens, mask = model.build_layout_tokens(lay, lat)
        assert mask[0] and not mask[1:].any()
        assert np.abs(tokens.data[0]).max() > 0
        assert np.abs(tokens.data[1:]).max() == 0.0


class TestEndToEndGradients:
    def test_unet_training_loss_finite_difference(self, layout3):
        from migkit.diffusion import NoiseSchedule, training_step
        model = tiny_unet(attach=True)
        sched = NoiseSchedule(t_train=50)
        x0 = np.random.default_rng(2).standard_normal((2, 3, 8, 8)) * 0.5
        rng = Rng(0, "fd")
        params = [p for _, p in model.named_parameters() if p.requires_grad]
        probe = params[:4] + params[-4:]
        err = finite_diff_check(
            lambda: training_step(model, x0, [layout3, layout3], sched,
                                  rng.split("fixed"), cfg_dropout=0.0),
            probe, max_coords=3, rng=np.random.default_rng(0))
        assert err < 1e-4
