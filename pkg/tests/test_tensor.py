import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from migkit.tensor import (Tensor, add, attention, bilinear_interp,
                           channel_rmsnorm, concat, conv2d, embedding,
                           finite_diff_check, linear, matmul, mse, mul, narrow,
                           no_grad, reshape, rmsnorm, silu, softmax, stack,
                           sub, tmean, transpose, tsum)


class TestConv2d:
    def test_hand_convolution_ones(self):
        # all-ones 1x4x4 input, single 3x3 kernel of ones, stride 1, pad 1:
        # corners see a 2x2 neighborhood (4), center pixels a 3x3 one (9)
        y = conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))),
                   Tensor(np.zeros(1)), 1, 1)
        assert y.data[0, 0, 0] == 4.0
        assert y.data[0, 0, 3] == 4.0
        assert y.data[0, 1, 1] == 9.0
        assert y.data[0, 1, 0] == 6.0

    def test_stride2_shape(self):
        y = conv2d(Tensor(np.zeros((1, 64, 64))), Tensor(np.zeros((1, 1, 3, 3))),
                   None, 2, 1)
        assert y.shape == (1, 32, 32)

    def test_gradient_matches_finite_differences(self, np_rng):
        x = Tensor(np_rng.standard_normal((2, 5, 5)), requires_grad=True)
        w = Tensor(np_rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        b = Tensor(np_rng.standard_normal(3), requires_grad=True)
        c = Tensor(np_rng.standard_normal((3, 5, 5)))
        err = finite_diff_check(lambda: tsum(mul(conv2d(x, w, b, 1, 1), c)), [x, w, b])
        assert err < 1e-6

    def test_batched_equals_per_sample(self, np_rng):
        xb = np_rng.standard_normal((3, 2, 6, 6))
        w = Tensor(np_rng.standard_normal((4, 2, 3, 3)))
        b = Tensor(np_rng.standard_normal(4))
        full = conv2d(Tensor(xb), w, b, 2, 1).data
        for i in range(3):
            single = conv2d(Tensor(xb[i]), w, b, 2, 1).data
            np.testing.assert_array_equal(full[i], single)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), None)
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))), None)


class TestElementwiseAndReductions:
    def test_square_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        loss = mul(x, x)
        loss.backward()
        assert x.grad == pytest.approx(6.0)

    def test_constant_function_zero_grad(self, np_rng):
        x = Tensor(np_rng.standard_normal(4), requires_grad=True)
        c = Tensor(np.ones(1))
        loss = tsum(c)
        loss.backward()
        assert x.grad is None

    def test_silu_finite_difference(self, np_rng):
        x = Tensor(np_rng.standard_normal((4, 4)), requires_grad=True)
        err = finite_diff_check(lambda: tsum(silu(x)), [x])
        assert err < 1e-6

    def test_mse(self):
        a = Tensor([1.0, 2.0]); b = Tensor([0.0, 0.0])
        assert mse(a, b).item() == pytest.approx(2.5)

    def test_shared_subexpression_accumulates(self, np_rng):
        x = Tensor(np_rng.standard_normal((3,)), requires_grad=True)
        y = add(x, x)                         # dy/dx = 2
        loss = tsum(mul(y, y))                # d/dx sum((2x)^2) = 8x
        loss.backward()
        np.testing.assert_allclose(x.grad, 8 * x.data, rtol=1e-12)


class TestSoftmaxAttention:
    def test_softmax_symmetry(self):
        np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_single_key_identity(self):
        one = Tensor([[1.0]])
        out = attention(one, one, one)
        assert out.data[0, 0] == pytest.approx(1.0)

    def test_two_identical_keys_average_values(self, np_rng):
        k = np.tile(np_rng.standard_normal((1, 4)), (2, 1))
        v = np_rng.standard_normal((2, 4))
        q = np_rng.standard_normal((1, 4))
        out = attention(Tensor(q), Tensor(k), Tensor(v))
        np.testing.assert_allclose(out.data[0], v.mean(axis=0), rtol=1e-12)

    def test_mask_excludes_key_exactly(self, np_rng):
        q = Tensor(np_rng.standard_normal((2, 4)))
        k = Tensor(np_rng.standard_normal((2, 4)))
        v = Tensor(np_rng.standard_normal((2, 4)))
        out = attention(q, k, v, mask=np.array([True, False]))
        np.testing.assert_array_equal(out.data, np.tile(v.data[0], (2, 1)))

    def test_all_masked_rejected(self, np_rng):
        q = Tensor(np_rng.standard_normal((1, 2)))
        with pytest.raises(ValueError):
            attention(q, q, q, mask=np.array([False]))

    def test_rows_are_convex_combinations(self, np_rng):
        for _ in range(20):
            q = Tensor(np_rng.standard_normal((5, 3)))
            k = Tensor(np_rng.standard_normal((7, 3)))
            v = Tensor(np_rng.standard_normal((7, 3)))
            mask = np_rng.uniform(size=7) > 0.3
            if not mask.any():
                mask[0] = True
            out = attention(q, k, v, mask=mask).data
            lo = v.data[mask].min(axis=0) - 1e-12
            hi = v.data[mask].max(axis=0) + 1e-12
            assert (out >= lo).all() and (out <= hi).all()

    def test_attention_finite_difference(self, np_rng):
        q = Tensor(np_rng.standard_normal((4, 8)), requires_grad=True)
        k = Tensor(np_rng.standard_normal((6, 8)), requires_grad=True)
        v = Tensor(np_rng.standard_normal((6, 8)), requires_grad=True)
        c = Tensor(np_rng.standard_normal((4, 8)))
        mask = np.array([1, 1, 0, 1, 1, 1], dtype=bool)
        err = finite_diff_check(lambda: tsum(mul(attention(q, k, v, mask), c)), [q, k, v])
        assert err < 1e-6


class TestBilinearInterp:
    def test_identity_same_shape(self):
        x = Tensor([[0.0, 1.0], [2.0, 3.0]])
        np.testing.assert_array_equal(bilinear_interp(x, 2, 2).data, x.data)

    def test_constant_preserved(self, np_rng):
        c = 3.7
        x = Tensor(np.full((5, 9), c))
        for hw in [(3, 4), (10, 17), (1, 1)]:
            np.testing.assert_allclose(bilinear_interp(x, *hw).data, c, rtol=1e-12)

    def test_linearity_exact(self, np_rng):
        x1 = np_rng.standard_normal((5, 7))
        x2 = np_rng.standard_normal((5, 7))
        lhs = bilinear_interp(Tensor(2.5 * x1 - 1.25 * x2), 9, 4).data
        rhs = (2.5 * bilinear_interp(Tensor(x1), 9, 4).data
               - 1.25 * bilinear_interp(Tensor(x2), 9, 4).data)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_zero_target_rejected(self):
        with pytest.raises(ValueError):
            bilinear_interp(Tensor(np.zeros((2, 2))), 0, 2)

    def test_finite_difference(self, np_rng):
        x = Tensor(np_rng.standard_normal((2, 2, 6, 6)), requires_grad=True)
        err = finite_diff_check(lambda: tsum(bilinear_interp(x, 3, 9)), [x])
        assert err < 1e-6


class TestDeterminism:
    def test_bit_identical_across_runs(self):
        def run():
            r = np.random.default_rng(99)
            x = Tensor(r.standard_normal((2, 3, 8, 8)), requires_grad=True)
            w = Tensor(r.standard_normal((4, 3, 3, 3)), requires_grad=True)
            y = conv2d(x, w, None, 2, 1)
            y = silu(y)
            loss = tsum(mul(y, y))
            loss.backward()
            return y.data.copy(), x.grad.copy(), w.grad.copy()
        a = run()
        b = run()
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)


class TestBackwardContract:
    def test_non_scalar_loss_rejected(self, np_rng):
        y = Tensor(np_rng.standard_normal((3,)), requires_grad=True)
        with pytest.raises(ValueError):
            add(y, 1.0).backward()

    def test_no_grad_builds_no_tape(self, np_rng):
        x = Tensor(np_rng.standard_normal((3, 3)), requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad
        assert y._backward is None

    def test_embedding_scatter(self, np_rng):
        table = Tensor(np_rng.standard_normal((5, 2)), requires_grad=True)
        out = embedding(table, np.array([1, 1, 3]))
        tsum(out).backward()
        expect = np.zeros((5, 2))
        expect[1] = 2.0
        expect[3] = 1.0
        np.testing.assert_array_equal(table.grad, expect)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9))
def test_interp_hypothesis_linearity(h_in, w_in, h_out, w_out):
    rng = np.random.default_rng(h_in * 100 + w_in * 10 + h_out + w_out)
    x = rng.standard_normal((h_in, w_in))
    y = rng.standard_normal((h_in, w_in))
    lhs = bilinear_interp(Tensor(x + y), h_out, w_out).data
    rhs = bilinear_interp(Tensor(x), h_out, w_out).data + bilinear_interp(Tensor(y), h_out, w_out).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
