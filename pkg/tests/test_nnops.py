"""Layer kernel tests: worked examples, finite-difference checks, adjoint identities."""
from __future__ import annotations

import numpy as np
import pytest

from ldct import nnops
from ldct.errors import ContractViolation

from conftest import numerical_gradient, relative_error


def _rand(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# conv2d forward


class TestConv2dForward:
    def test_scalar_1x1(self):
        x = np.array([[[[2.0]]]])
        w = np.array([[[[3.0]]]])
        b = np.array([1.0])
        y, _ = nnops.conv2d_forward(x, w, b)
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 7.0  # 3*2 + 1

    def test_identity_kernel_same_padding(self):
        rng = nnops.make_rng(0)
        x = _rand(rng, 2, 1, 6, 6)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0  # centered delta
        y, _ = nnops.conv2d_forward(x, w, np.zeros(1), padding="same")
        np.testing.assert_allclose(y, x, atol=0)

    def test_all_ones_kernel_2x2_image(self):
        # every 3x3 same-padded window covers all four pixels
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = np.ones((1, 1, 3, 3))
        y, _ = nnops.conv2d_forward(x, w, np.zeros(1), padding="same")
        np.testing.assert_allclose(y[0, 0], [[10.0, 10.0], [10.0, 10.0]])

    def test_same_preserves_valid_shrinks(self):
        rng = nnops.make_rng(1)
        x = _rand(rng, 1, 2, 8, 10)
        w = _rand(rng, 3, 2, 3, 3)
        b = np.zeros(3)
        y_same, _ = nnops.conv2d_forward(x, w, b, padding="same")
        y_valid, _ = nnops.conv2d_forward(x, w, b, padding="valid")
        assert y_same.shape == (1, 3, 8, 10)
        assert y_valid.shape == (1, 3, 6, 8)
        # valid equals the interior of same
        np.testing.assert_allclose(y_valid, y_same[:, :, 1:-1, 1:-1], rtol=1e-12)

    def test_channel_mismatch_raises(self):
        x = np.zeros((1, 2, 4, 4))
        w = np.zeros((1, 3, 3, 3))
        with pytest.raises(ContractViolation, match="channels"):
            nnops.conv2d_forward(x, w, np.zeros(1))

    def test_bad_kernel_size_raises(self):
        with pytest.raises(ContractViolation, match="kernel"):
            nnops.conv2d_forward(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 5, 5)), np.zeros(1))


# ---------------------------------------------------------------------------
# relu / maxpool / upconv / concat forward


class TestSimpleForwards:
    def test_relu_examples(self):
        y, _ = nnops.relu_forward(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(y, [0.0, 0.0, 2.0])
        x = np.abs(nnops.make_rng(2).standard_normal((3, 4)))
        y, _ = nnops.relu_forward(x)
        np.testing.assert_array_equal(y, x)
        y, _ = nnops.relu_forward(np.array([-5.5]))
        np.testing.assert_array_equal(y, [0.0])

    def test_relu_idempotent(self):
        x = nnops.make_rng(3).standard_normal((2, 3, 4, 4))
        y1, _ = nnops.relu_forward(x)
        y2, _ = nnops.relu_forward(y1)
        np.testing.assert_array_equal(y1, y2)

    def test_maxpool_2x2(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        y, _ = nnops.maxpool2_forward(x)
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 4.0

    def test_maxpool_constant(self):
        x = np.full((1, 2, 6, 6), 3.25)
        y, _ = nnops.maxpool2_forward(x)
        assert y.shape == (1, 2, 3, 3)
        np.testing.assert_array_equal(y, np.full((1, 2, 3, 3), 3.25))

    def test_maxpool_hand_windows(self):
        x = np.array([[[[1.0, 5.0, 2.0, 0.0],
                        [3.0, 4.0, 1.0, 1.0],
                        [0.0, 0.0, 9.0, 8.0],
                        [0.0, 0.0, 7.0, 6.0]]]])
        y, _ = nnops.maxpool2_forward(x)
        np.testing.assert_array_equal(y[0, 0], [[5.0, 2.0], [0.0, 9.0]])

    def test_maxpool_odd_raises(self):
        with pytest.raises(ContractViolation, match="even"):
            nnops.maxpool2_forward(np.zeros((1, 1, 3, 4)))

    def test_upconv_single_pixel_scatter(self):
        x = np.array([[[[1.0]]]])
        w = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])  # (InC=1, OutC=1, 2, 2)
        y, _ = nnops.upconv2_forward(x, w, np.zeros(1))
        np.testing.assert_array_equal(y[0, 0], [[1.0, 2.0], [3.0, 4.0]])

    def test_upconv_zero_input_broadcasts_bias(self):
        x = np.zeros((2, 3, 2, 2))
        w = nnops.make_rng(4).standard_normal((3, 2, 2, 2))
        b = np.array([0.5, -1.5])
        y, _ = nnops.upconv2_forward(x, w, b)
        assert y.shape == (2, 2, 4, 4)
        np.testing.assert_allclose(y[:, 0], 0.5)
        np.testing.assert_allclose(y[:, 1], -1.5)

    def test_upconv_hand_scatter(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = np.ones((1, 1, 2, 2))
        y, _ = nnops.upconv2_forward(x, w, np.zeros(1))
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(y[0, 0], expected)

    def test_concat_basic(self):
        rng = nnops.make_rng(5)
        x = _rand(rng, 1, 1, 4, 4)
        y, _ = nnops.concat_channels(x, x)
        assert y.shape == (1, 2, 4, 4)
        np.testing.assert_array_equal(y[:, 0], y[:, 1])

    def test_concat_zeros_then_select(self):
        rng = nnops.make_rng(6)
        x = _rand(rng, 2, 3, 4, 4)
        y, _ = nnops.concat_channels(x, np.zeros((2, 2, 4, 4)))
        np.testing.assert_array_equal(y[:, :3], x)

    def test_concat_shapes(self):
        a = np.zeros((1, 2, 4, 4))
        b = np.zeros((1, 3, 4, 4))
        y, _ = nnops.concat_channels(a, b)
        assert y.shape == (1, 5, 4, 4)
        with pytest.raises(ContractViolation, match="mismatch"):
            nnops.concat_channels(a, np.zeros((1, 3, 5, 4)))


# ---------------------------------------------------------------------------
# mse


class TestMseLoss:
    def test_equal_inputs(self):
        x = nnops.make_rng(7).standard_normal((2, 5))
        loss, grad = nnops.mse_loss(x, x.copy())
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(x))

    def test_hand_value(self):
        loss, _ = nnops.mse_loss(np.array([0.0, 0.0]), np.array([1.0, 3.0]))
        assert loss == pytest.approx(5.0)  # (1 + 9) / 2

    def test_gradient_value(self):
        _, grad = nnops.mse_loss(np.array([1.0]), np.array([0.0]))
        np.testing.assert_allclose(grad, [2.0])

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            nnops.mse_loss(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------------
# backward passes: worked examples plus the finite-difference oracle


class TestBackwardExamples:
    def test_relu_backward_example(self):
        _, cache = nnops.relu_forward(np.array([-1.0, 2.0]))
        grad = nnops.relu_backward(cache, np.array([5.0, 5.0]))
        np.testing.assert_array_equal(grad, [0.0, 5.0])

    def test_conv_zero_everything(self):
        x = np.zeros((1, 1, 4, 4))
        _, cache = nnops.conv2d_forward(x, np.zeros((2, 1, 3, 3)), np.zeros(2))
        gx, gw, gb = nnops.conv2d_backward(cache, np.zeros((1, 2, 4, 4)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_cache_mismatch_raises(self):
        _, cache = nnops.relu_forward(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ContractViolation, match="mismatch"):
            nnops.conv2d_backward(cache, np.zeros((1, 1, 2, 2)))


def _spaced_values(rng, shape, gap=0.05):
    """Distinct values with pairwise gaps, keeping finite differences off kinks."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + 1.0) * gap * np.sign(rng.standard_normal(n))
    return vals.reshape(shape)


class TestFiniteDifferences:
    """Analytic gradients vs central differences, rel. error <= 1e-5, float64."""

    TOL = 1e-5

    @pytest.mark.parametrize("padding", ["same", "valid"])
    @pytest.mark.parametrize("k", [1, 3])
    def test_conv2d_gradients(self, padding, k):
        rng = nnops.make_rng(10 * k + (padding == "same"))
        x = _rand(rng, 2, 3, 6, 6)
        w = _rand(rng, 4, 3, k, k) * 0.5
        b = _rand(rng, 4) * 0.1
        probe_shape = nnops.conv2d_forward(x, w, b, padding)[0].shape
        probe = _rand(rng, *probe_shape)

        def loss():
            y, _ = nnops.conv2d_forward(x, w, b, padding)
            return float(np.sum(y * probe))

        _, cache = nnops.conv2d_forward(x, w, b, padding)
        gx, gw, gb = nnops.conv2d_backward(cache, probe)
        for analytic, arr in ((gx, x), (gw, w), (gb, b)):
            numeric = numerical_gradient(loss, arr)
            assert relative_error(analytic, numeric) <= self.TOL

    def test_relu_gradient(self):
        rng = nnops.make_rng(20)
        x = _spaced_values(rng, (2, 2, 4, 4))
        probe = _rand(rng, 2, 2, 4, 4)

        def loss():
            y, _ = nnops.relu_forward(x)
            return float(np.sum(y * probe))

        _, cache = nnops.relu_forward(x)
        analytic = nnops.relu_backward(cache, probe)
        numeric = numerical_gradient(loss, x)
        assert relative_error(analytic, numeric) <= self.TOL

    def test_maxpool_gradient(self):
        rng = nnops.make_rng(21)
        x = _spaced_values(rng, (2, 2, 8, 8))
        probe = _rand(rng, 2, 2, 4, 4)

        def loss():
            y, _ = nnops.maxpool2_forward(x)
            return float(np.sum(y * probe))

        _, cache = nnops.maxpool2_forward(x)
        analytic = nnops.maxpool2_backward(cache, probe)
        numeric = numerical_gradient(loss, x)
        assert relative_error(analytic, numeric) <= self.TOL

    def test_upconv_gradients(self):
        rng = nnops.make_rng(22)
        x = _rand(rng, 2, 3, 5, 5)
        w = _rand(rng, 3, 2, 2, 2) * 0.5
        b = _rand(rng, 2) * 0.1
        probe = _rand(rng, 2, 2, 10, 10)

        def loss():
            y, _ = nnops.upconv2_forward(x, w, b)
            return float(np.sum(y * probe))

        _, cache = nnops.upconv2_forward(x, w, b)
        gx, gw, gb = nnops.upconv2_backward(cache, probe)
        for analytic, arr in ((gx, x), (gw, w), (gb, b)):
            numeric = numerical_gradient(loss, arr)
            assert relative_error(analytic, numeric) <= self.TOL

    def test_concat_gradient(self):
        rng = nnops.make_rng(23)
        a = _rand(rng, 1, 2, 4, 4)
        b = _rand(rng, 1, 3, 4, 4)
        probe = _rand(rng, 1, 5, 4, 4)

        def loss():
            y, _ = nnops.concat_channels(a, b)
            return float(np.sum(y * probe))

        _, cache = nnops.concat_channels(a, b)
        ga, gb_ = nnops.concat_backward(cache, probe)
        for analytic, arr in ((ga, a), (gb_, b)):
            numeric = numerical_gradient(loss, arr)
            assert relative_error(analytic, numeric) <= self.TOL

    def test_mse_gradient(self):
        rng = nnops.make_rng(24)
        pred = _rand(rng, 3, 7)
        target = _rand(rng, 3, 7)

        def loss():
            return nnops.mse_loss(pred, target)[0]

        _, analytic = nnops.mse_loss(pred, target)
        numeric = numerical_gradient(loss, pred)
        assert relative_error(analytic, numeric) <= self.TOL


# ---------------------------------------------------------------------------
# adjoint identities and purity


class TestInvariants:
    def test_conv2d_adjoint(self):
        # <conv(x, w), y> == <x, conv_input_backward(y, w)> in double precision
        rng = nnops.make_rng(30)
        for trial in range(5):
            x = _rand(rng, 2, 3, 6, 6)
            w = _rand(rng, 4, 3, 3, 3)
            fwd, cache = nnops.conv2d_forward(x, w, np.zeros(4), padding="same")
            y = _rand(rng, *fwd.shape)
            gx, _, _ = nnops.conv2d_backward(cache, y)
            lhs = float(np.sum(fwd * y))
            rhs = float(np.sum(x * gx))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_upconv_adjoint(self):
        rng = nnops.make_rng(31)
        for trial in range(5):
            x = _rand(rng, 1, 2, 4, 4)
            w = _rand(rng, 2, 3, 2, 2)
            fwd, cache = nnops.upconv2_forward(x, w, np.zeros(3))
            y = _rand(rng, *fwd.shape)
            gx, _, _ = nnops.upconv2_backward(cache, y)
            lhs = float(np.sum(fwd * y))
            rhs = float(np.sum(x * gx))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_shape_arithmetic(self):
        rng = nnops.make_rng(32)
        x = _rand(rng, 1, 2, 12, 16)
        w3 = _rand(rng, 2, 2, 3, 3)
        y, _ = nnops.conv2d_forward(x, w3, np.zeros(2), padding="same")
        assert y.shape == x.shape
        p, _ = nnops.maxpool2_forward(x)
        assert p.shape == (1, 2, 6, 8)
        u, _ = nnops.upconv2_forward(x, _rand(rng, 2, 2, 2, 2), np.zeros(2))
        assert u.shape == (1, 2, 24, 32)

    def test_forward_purity(self):
        rng = nnops.make_rng(33)
        x = _rand(rng, 2, 2, 8, 8)
        w = _rand(rng, 3, 2, 3, 3)
        b = _rand(rng, 3)
        y1, _ = nnops.conv2d_forward(x, w, b)
        y2, _ = nnops.conv2d_forward(x, w, b)
        assert np.array_equal(y1, y2)

    def test_outputs_finite(self):
        rng = nnops.make_rng(34)
        x = _rand(rng, 2, 2, 8, 8) * 100
        w = _rand(rng, 3, 2, 3, 3)
        y, _ = nnops.conv2d_forward(x, w, _rand(rng, 3))
        assert np.isfinite(y).all()


# ---------------------------------------------------------------------------
# initialization


class TestHeInit:
    def test_reproducible(self):
        a = nnops.he_init((4, 3, 3, 3), 27, nnops.make_rng(9))
        b = nnops.he_init((4, 3, 3, 3), 27, nnops.make_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_std_monte_carlo(self):
        # fan_in=2 gives std sqrt(2/2) = 1.0
        vals = nnops.he_init((100_000,), 2, nnops.make_rng(10), dtype=np.float64)
        assert abs(vals.std() - 1.0) < 0.02

    def test_shape_and_fan_in_check(self):
        assert nnops.he_init((2, 5), 5, nnops.make_rng(11)).shape == (2, 5)
        with pytest.raises(ContractViolation):
            nnops.he_init((2, 5), 0, nnops.make_rng(11))
