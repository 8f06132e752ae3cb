"""Unit tests for the autodiff tensor engine.

Analytic gradients are always checked against the central finite-difference
oracle in docunet.gradcheck, which re-runs the forward pass on perturbed
plain-numpy buffers and never touches backward().
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from docunet import tensor as T
from docunet.errors import ShapeError
from docunet.gradcheck import check_gradients


RNG = np.random.default_rng(1234)


class TestArithmetic:
    def test_add_and_scalars(self):
        a = T.Tensor([1.0, 2.0])
        b = T.Tensor([10.0, 20.0])
        np.testing.assert_array_equal((a + b).data, [11.0, 22.0])
        np.testing.assert_array_equal((a + 1).data, [2.0, 3.0])
        np.testing.assert_array_equal((3 - a).data, [2.0, 1.0])
        np.testing.assert_array_equal((a * 2).data, [2.0, 4.0])
        np.testing.assert_array_equal((a / 2).data, [0.5, 1.0])

    def test_shape_mismatch_rejected(self):
        a = T.Tensor(np.zeros((2, 3)))
        b = T.Tensor(np.zeros((3, 2)))
        for op in (T.add, T.sub, T.mul, T.div):
            with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
                op(a, b)

    def test_no_silent_broadcast(self):
        a = T.Tensor(np.zeros((4, 4)))
        row = T.Tensor(np.zeros((1, 4)))
        with pytest.raises(ShapeError):
            T.add(a, row)

    def test_arith_gradients(self):
        x = RNG.normal(size=(3, 4))
        y = RNG.normal(size=(3, 4)) + 3.0  # keep divisors away from zero
        err = check_gradients(
            lambda ts: T.reduce_sum(T.div(T.mul(T.add(ts[0], ts[1]), ts[0]), ts[1])),
            [x, y],
        )
        assert err <= 1e-6

    def test_value_semantics_on_construction(self):
        buf = np.zeros(3)
        t = T.Tensor(buf)
        buf[0] = 99.0
        assert t.data[0] == 0.0
        out = t.to_array()
        out[1] = 5.0
        assert t.data[1] == 0.0


class TestMatmul:
    def test_identity(self):
        m = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = T.Tensor(np.eye(2))
        np.testing.assert_array_equal(T.matmul(eye, m).data, m.data)

    def test_dot_product(self):
        a = T.Tensor([[1.0, 2.0]])
        b = T.Tensor([[3.0], [4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[11.0]])

    def test_gradient_vs_finite_differences(self):
        a = RNG.normal(size=(3, 4))
        b = RNG.normal(size=(4, 2))
        err = check_gradients(
            lambda ts: T.reduce_sum(T.matmul(ts[0], ts[1])), [a, b]
        )
        assert err <= 1e-6

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            T.matmul(T.Tensor(np.zeros((3, 4))), T.Tensor(np.zeros((3, 2))))


class TestConv2d:
    def test_all_ones_overlap_counts(self):
        x = T.Tensor(np.ones((1, 4, 4)))
        k = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, k, stride=1, padding=1).data[0]
        assert out.shape == (4, 4)
        assert out[1, 1] == 9.0 and out[2, 2] == 9.0
        for corner in [(0, 0), (0, 3), (3, 0), (3, 3)]:
            assert out[corner] == 4.0

    def test_identity_kernel(self):
        x = T.Tensor(RNG.normal(size=(1, 5, 5)))
        k = T.Tensor(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(T.conv2d(x, k).data, x.data)

    def test_kernel_gradient_vs_finite_differences(self):
        x = RNG.normal(size=(3, 8, 8))
        k = RNG.normal(size=(2, 3, 3, 3))
        err = check_gradients(
            lambda ts: T.reduce_sum(
                T.mul(T.conv2d(ts[0], ts[1], stride=1, padding=1), ts[2])
            ),
            [x, k, RNG.normal(size=(2, 8, 8))],
        )
        assert err <= 1e-6

    def test_naive_path_matches_im2col(self):
        x = T.Tensor(RNG.normal(size=(2, 6, 7)), requires_grad=True)
        k = T.Tensor(RNG.normal(size=(3, 2, 3, 3)), requires_grad=True)
        w = RNG.normal(size=(3, 3, 4))
        fast = T.conv2d(x, k, stride=2, padding=1)
        T.reduce_sum(T.mul(fast, T.Tensor(w))).backward()
        gx, gk = x.grad.copy(), k.grad.copy()
        x.grad = k.grad = None
        slow = T.conv2d(x, k, stride=2, padding=1, naive=True)
        T.reduce_sum(T.mul(slow, T.Tensor(w))).backward()
        np.testing.assert_allclose(fast.data, slow.data, rtol=1e-12)
        np.testing.assert_allclose(gx, x.grad, rtol=1e-12)
        np.testing.assert_allclose(gk, k.grad, rtol=1e-12)

    def test_shape_formula_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            h, w = rng.integers(2, 12, size=2)
            s = int(rng.integers(1, min(h, w) + 1))
            stride = int(rng.integers(1, 4))
            padval = int(rng.integers(0, 3))
            out = T.conv2d(
                T.Tensor(np.zeros((2, h, w))),
                T.Tensor(np.zeros((1, 2, s, s))),
                stride=stride,
                padding=padval,
            )
            exp_h = (h + 2 * padval - s) // stride + 1
            exp_w = (w + 2 * padval - s) // stride + 1
            assert out.shape == (1, exp_h, exp_w)

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError, match="larger"):
            T.conv2d(T.Tensor(np.zeros((1, 2, 2))), T.Tensor(np.zeros((1, 1, 5, 5))))


class TestTransposedConv2d:
    def test_block_copy(self):
        x = T.Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        k = T.Tensor(np.ones((1, 1, 2, 2)))
        out = T.transposed_conv2d(x, k, stride=2).data[0]
        expected = np.array(
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float
        )
        np.testing.assert_array_equal(out, expected)

    def test_spatial_doubling(self):
        out = T.transposed_conv2d(
            T.Tensor(np.zeros((4, 5, 7))), T.Tensor(np.zeros((4, 2, 2, 2))), stride=2
        )
        assert out.shape == (2, 10, 14)

    def test_adjointness_against_conv(self):
        # <conv(x,k), y> == <x, tconv(y,k)> for pad 0
        rng = np.random.default_rng(11)
        for stride in (1, 2):
            x = rng.normal(size=(3, 8, 8))
            k = rng.normal(size=(4, 3, 2, 2))
            conv = T.conv2d(T.Tensor(x), T.Tensor(k), stride=stride).data
            y = rng.normal(size=conv.shape)
            tconv = T.transposed_conv2d(T.Tensor(y), T.Tensor(k), stride=stride).data
            lhs = float(np.sum(conv * y))
            rhs = float(np.sum(x * tconv))
            assert abs(lhs - rhs) / max(abs(lhs), abs(rhs)) <= 1e-10

    def test_input_gradient_vs_finite_differences(self):
        x = RNG.normal(size=(2, 3, 3))
        k = RNG.normal(size=(2, 3, 2, 2))
        w = RNG.normal(size=(3, 6, 6))
        err = check_gradients(
            lambda ts: T.reduce_sum(
                T.mul(T.transposed_conv2d(ts[0], ts[1], stride=2), ts[2])
            ),
            [x, k, w],
        )
        assert err <= 1e-6


class TestMaxPool2d:
    def test_single_window(self):
        out = T.max_pool2d(T.Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
        np.testing.assert_array_equal(out.data, [[[4.0]]])

    def test_tie_break_routes_to_first_element(self):
        x = T.Tensor(np.full((1, 2, 2), 7.0), requires_grad=True)
        out = T.max_pool2d(x)
        np.testing.assert_array_equal(out.data, [[[7.0]]])
        T.reduce_sum(out).backward()
        np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])

    def test_pooled_dominates_windows(self):
        x = RNG.normal(size=(4, 8, 8))
        pooled = T.max_pool2d(T.Tensor(x)).data
        # brute-force window scan
        for c in range(4):
            for i in range(4):
                for j in range(4):
                    window = x[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                    assert pooled[c, i, j] == window.max()
                    assert (pooled[c, i, j] >= window).all()

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError, match="divisible"):
            T.max_pool2d(T.Tensor(np.zeros((1, 3, 4))))

    def test_gradient_vs_finite_differences(self):
        # distinct values keep the argmax stable under the probe epsilon
        x = RNG.permutation(np.arange(2 * 4 * 4, dtype=float)).reshape(2, 4, 4)
        w = RNG.normal(size=(2, 2, 2))
        err = check_gradients(
            lambda ts: T.reduce_sum(T.mul(T.max_pool2d(ts[0]), ts[1])), [x, w]
        )
        assert err <= 1e-6


class TestLogsumexp:
    def test_single_row_is_identity(self):
        x = RNG.normal(size=(1, 5))
        np.testing.assert_allclose(T.logsumexp(T.Tensor(x), 0).data, x[0], rtol=1e-15)

    def test_two_identical_rows(self):
        row = RNG.normal(size=4)
        out = T.logsumexp(T.Tensor(np.stack([row, row])), 0).data
        np.testing.assert_allclose(out, row + math.log(2.0), rtol=1e-12)

    def test_no_overflow(self):
        out = T.logsumexp(T.Tensor([[0.0], [1000.0]]), 0).data
        np.testing.assert_allclose(out, [1000.0])

    @given(
        st.integers(1, 6),
        st.integers(1, 4),
        st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=40, deadline=None)
    def test_bounds(self, n, d, seed):
        x = np.random.default_rng(seed).normal(scale=5.0, size=(n, d))
        out = T.logsumexp(T.Tensor(x), 0).data
        mx = x.max(axis=0)
        assert (out >= mx - 1e-12).all()
        assert (out <= mx + math.log(n) + 1e-12).all()

    def test_empty_axis_rejected(self):
        with pytest.raises(ShapeError, match="empty"):
            T.logsumexp(T.Tensor(np.zeros((0, 3))), 0)

    def test_gradient_vs_finite_differences(self):
        x = RNG.normal(size=(5, 3))
        err = check_gradients(
            lambda ts: T.reduce_sum(T.logsumexp(ts[0], 0)), [x]
        )
        assert err <= 1e-6


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0]), axis=0).data
        np.testing.assert_allclose(out, np.full(3, 1 / 3))

    def test_shift_invariance(self):
        x = RNG.normal(size=(4, 6))
        a = T.softmax(T.Tensor(x), axis=1).data
        b = T.softmax(T.Tensor(x + 123.456), axis=1).data
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_rows_sum_to_one(self):
        x = RNG.normal(scale=10, size=(7, 9))
        out = T.softmax(T.Tensor(x), axis=-1).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradient_vs_finite_differences(self):
        x = RNG.normal(size=(3, 5))
        w = RNG.normal(size=(3, 5))
        err = check_gradients(
            lambda ts: T.reduce_sum(T.mul(T.softmax(ts[0], axis=1), ts[1])), [x, w]
        )
        assert err <= 1e-6


class TestElementwiseSuite:
    def test_fixed_points(self):
        assert T.tanh(T.Tensor(0.0)).item() == 0.0
        np.testing.assert_allclose(T.log1p_exp(T.Tensor(0.0)).item(), math.log(2.0))
        assert T.log1p_exp(T.Tensor(1000.0)).item() == 1000.0
        assert T.log1p_exp(T.Tensor(-1000.0)).item() == 0.0
        assert T.sigmoid(T.Tensor(0.0)).item() == 0.5
        assert T.relu(T.Tensor(-3.0)).item() == 0.0

    def test_gradients_vs_finite_differences(self):
        x = RNG.normal(size=(4, 3)) + np.sign(RNG.normal(size=(4, 3))) * 0.05
        for fn in (T.tanh, T.sigmoid, T.relu, T.log1p_exp, T.exp):
            err = check_gradients(
                lambda ts, fn=fn: T.reduce_sum(fn(ts[0])), [x]
            )
            assert err <= 1e-6, fn.__name__

    def test_log_and_power_gradients(self):
        x = np.abs(RNG.normal(size=(3, 3))) + 0.5
        err = check_gradients(
            lambda ts: T.reduce_sum(T.add(T.log(ts[0]), T.power(ts[0], 0.5))), [x]
        )
        assert err <= 1e-6


class TestShapeOps:
    def test_reshape_transpose_roundtrip(self):
        x = RNG.normal(size=(2, 3, 4))
        t = T.Tensor(x)
        back = T.transpose(T.transpose(t, 2, 0, 1), 1, 2, 0)
        np.testing.assert_array_equal(back.data, x)
        np.testing.assert_array_equal(T.reshape(t, 6, 4).data, x.reshape(6, 4))

    def test_concat_and_slice(self):
        a = T.Tensor(np.ones((2, 2)))
        b = T.Tensor(np.zeros((1, 2)))
        cat = T.concat([a, b], axis=0)
        assert cat.shape == (3, 2)
        np.testing.assert_array_equal(cat[2:3, :].data, np.zeros((1, 2)))

    def test_take_rows_accumulates_duplicates(self):
        x = T.Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
        out = T.take_rows(x, [1, 1, 2])
        T.reduce_sum(out).backward()
        np.testing.assert_array_equal(x.grad[1], np.full(3, 2.0))
        np.testing.assert_array_equal(x.grad[0], np.zeros(3))

    def test_repeat_axis(self):
        x = T.Tensor([[1.0], [2.0]], requires_grad=True)
        out = T.repeat_axis(x, 3, axis=1)
        np.testing.assert_array_equal(out.data, [[1, 1, 1], [2, 2, 2]])
        T.reduce_sum(out).backward()
        np.testing.assert_array_equal(x.grad, [[3.0], [3.0]])

    def test_pad_and_unpad(self):
        x = T.Tensor(RNG.normal(size=(2, 2)))
        out = T.pad(x, [(1, 0), (0, 2)])
        assert out.shape == (3, 4)
        assert out.data[0].sum() == 0.0
        np.testing.assert_array_equal(out.data[1:, :2], x.data)

    def test_structural_gradients(self):
        x = RNG.normal(size=(3, 4))
        w = RNG.normal(size=(2, 10))

        def build(ts):
            a = T.transpose(ts[0], 1, 0)        # [4,3]
            b = T.reshape(a, 2, 6)
            c = T.concat([b, b], axis=1)        # [2,12]
            d = c[:, 1:11]                      # [2,10]
            return T.reduce_sum(T.mul(d, ts[1]))

        assert check_gradients(build, [x, w]) <= 1e-6


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = T.Tensor(RNG.normal(size=(3, 2)), requires_grad=True)
        T.reduce_sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_square_gradient(self):
        vals = RNG.normal(size=5)
        x = T.Tensor(vals, requires_grad=True)
        T.reduce_sum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * vals, rtol=1e-15)

    def test_repeated_backward_accumulates(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        loss = T.reduce_sum(x)
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            (x * 2).backward()

    def test_shared_subexpression(self):
        x = T.Tensor([3.0], requires_grad=True)
        y = x * 2
        T.reduce_sum(y * y + y).backward()  # d/dx (4x^2 + 2x) = 8x + 2
        np.testing.assert_allclose(x.grad, [26.0])

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            x = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            k = T.Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
            h = T.conv2d(T.reshape(x, 1, 4, 4), k, padding=1)
            loss = T.reduce_sum(T.tanh(h))
            loss.backward()
            return loss.item(), x.grad.copy(), k.grad.copy()

        l1, gx1, gk1 = run()
        l2, gx2, gk2 = run()
        assert l1 == l2
        assert (gx1 == gx2).all() and (gk1 == gk2).all()


class TestRandomizedGradientSweep:
    """Randomized-shape finite-difference sweep across the op inventory."""

    def test_sweep(self):
        rng = np.random.default_rng(2024)
        ops = []

        def register(name, builder, *arrays):
            ops.append((name, builder, arrays))

        for trial in range(14):
            m, k, n = rng.integers(2, 5, size=3)
            register(
                f"matmul{trial}",
                lambda ts: T.reduce_sum(T.matmul(ts[0], ts[1])),
                rng.normal(size=(m, k)), rng.normal(size=(k, n)),
            )
            c = int(rng.integers(1, 3))
            h = int(rng.integers(4, 7))
            register(
                f"conv{trial}",
                lambda ts: T.reduce_sum(T.conv2d(ts[0], ts[1], padding=1)),
                rng.normal(size=(c, h, h)), rng.normal(size=(2, c, 3, 3)),
            )
            register(
                f"lse{trial}",
                lambda ts: T.reduce_sum(T.logsumexp(ts[0], 0)),
                rng.normal(size=(int(rng.integers(1, 5)), 3)),
            )
            register(
                f"softmax{trial}",
                lambda ts: T.reduce_sum(T.mul(T.softmax(ts[0], -1), ts[1])),
                rng.normal(size=(3, 4)), rng.normal(size=(3, 4)),
            )
            register(
                f"tconv{trial}",
                lambda ts: T.reduce_sum(T.transposed_conv2d(ts[0], ts[1])),
                rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 2, 2, 2)),
            )
        for name, builder, arrays in ops:
            err = check_gradients(builder, list(arrays), max_entries_per_input=6,
                                  rng=rng)
            assert err <= 1e-4, name
