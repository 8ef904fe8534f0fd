"""Operator-level checks for the autodiff engine.

Expected values come from independent oracles: direct nested-loop
convolution, window enumeration for pooling, hand-computed normalization,
and central finite differences for every backward rule.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brunet import tensor as T
from brunet.errors import ConfigError, GraphStateError, NumericError
from brunet.gradcheck import gradient_check
from brunet.tensor import Tensor


def param(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def conv_reference(x, w, b, dilation):
    """Direct convolution sum over the zero-padded input."""
    bs, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    pad = dilation * (k - 1) // 2
    xp = np.zeros((bs, ci, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((bs, co, h, wd))
    for bb in range(bs):
        for o in range(co):
            for y in range(h):
                for xx in range(wd):
                    acc = b[o]
                    for c in range(ci):
                        for i in range(k):
                            for j in range(k):
                                acc += w[o, c, i, j] * xp[bb, c, y + dilation * i, xx + dilation * j]
                    out[bb, o, y, xx] = acc
    return out


class TestConv2d:
    def test_center_element_all_ones_kernel(self):
        x = param(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
        w = param(np.ones((1, 1, 3, 3)))
        b = param(np.zeros(1))
        out = T.conv2d(x, w, b, dilation=1)
        assert out.data[0, 0, 1, 1] == 45.0
        np.testing.assert_allclose(out.data, conv_reference(x.data, w.data, b.data, 1))

    def test_identity_1x1(self):
        rng = np.random.default_rng(7)
        x = param(rng.random((2, 1, 4, 4)))
        w = param(np.ones((1, 1, 1, 1)))
        b = param(np.zeros(1))
        out = T.conv2d(x, w, b, dilation=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_dilation_2_padded_footprint(self):
        x = param(np.ones((1, 1, 5, 5)))
        w = param(np.ones((1, 1, 3, 3)))
        b = param(np.zeros(1))
        out = T.conv2d(x, w, b, dilation=2)
        assert out.data[0, 0, 2, 2] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0
        np.testing.assert_allclose(out.data, conv_reference(x.data, w.data, b.data, 2))

    @pytest.mark.parametrize("dilation", [1, 3, 5])
    def test_matches_reference_random(self, dilation):
        rng = np.random.default_rng(dilation)
        x = param(rng.standard_normal((2, 3, 8, 8)))
        w = param(rng.standard_normal((4, 3, 3, 3)))
        b = param(rng.standard_normal(4))
        out = T.conv2d(x, w, b, dilation=dilation)
        np.testing.assert_allclose(out.data, conv_reference(x.data, w.data, b.data, dilation),
                                   rtol=1e-12, atol=1e-12)

    def test_shape_preserved_for_dilated_3x3(self):
        rng = np.random.default_rng(0)
        for d in (1, 3, 5):
            x = param(rng.random((1, 2, 16, 16)))
            w = param(rng.random((5, 2, 3, 3)))
            out = T.conv2d(x, w, param(np.zeros(5)), dilation=d)
            assert out.shape == (1, 5, 16, 16)

    def test_channel_mismatch_rejected(self):
        x = param(np.zeros((1, 2, 4, 4)))
        w = param(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ConfigError):
            T.conv2d(x, w, param(np.zeros(1)))

    def test_bad_kernel_rejected(self):
        x = param(np.zeros((1, 1, 8, 8)))
        with pytest.raises(ConfigError):
            T.conv2d(x, param(np.zeros((1, 1, 5, 5))), param(np.zeros(1)))
        with pytest.raises(ConfigError):
            T.conv2d(x, param(np.zeros((1, 1, 3, 3))), param(np.zeros(1)), dilation=0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x = param(rng.standard_normal((2, 2, 6, 6)))
        w = param(rng.standard_normal((3, 2, 3, 3)) * 0.5)
        b = param(rng.standard_normal(3) * 0.1)
        target = rng.standard_normal((2, 3, 6, 6))

        def fn():
            return T.mse_loss(T.conv2d(x, w, b, dilation=3), Tensor(target))

        assert gradient_check(fn, [x, w, b]) < 1e-6


class TestMaxPool2:
    def test_window_maximum(self):
        x = param(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert T.max_pool2(x).data[0, 0, 0, 0] == 4.0

    def test_constant_input(self):
        x = param(np.full((1, 2, 4, 4), 2.5))
        out = T.max_pool2(x)
        assert out.shape == (1, 2, 2, 2)
        assert np.all(out.data == 2.5)

    def test_ramp_windows(self):
        x = param(np.arange(16, dtype=float).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(T.max_pool2(x).data[0, 0], [[5, 7], [13, 15]])

    def test_odd_extent_rejected(self):
        with pytest.raises(ConfigError):
            T.max_pool2(param(np.zeros((1, 1, 3, 4))))

    def test_tie_gradient_goes_to_first_in_row_major_order(self):
        x = param(np.zeros((1, 1, 2, 2)))
        out = T.max_pool2(x)
        loss = out.sum()
        loss.backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = param(rng.standard_normal((2, 2, 4, 4)))
        target = rng.standard_normal((2, 2, 2, 2))

        def fn():
            return T.mse_loss(T.max_pool2(x), Tensor(target))

        assert gradient_check(fn, [x]) < 1e-7


class TestUpsample2:
    def test_replication(self):
        x = param(np.array([[5.0]]).reshape(1, 1, 1, 1))
        np.testing.assert_array_equal(T.upsample2(x).data[0, 0], [[5, 5], [5, 5]])

    def test_pool_then_upsample_fixes_constants(self):
        x = param(np.full((1, 1, 4, 4), 3.25))
        out = T.upsample2(T.max_pool2(x))
        np.testing.assert_array_equal(out.data, x.data)

    def test_sum_gradient_is_four(self):
        x = param(np.random.default_rng(0).random((1, 1, 3, 3)))
        T.upsample2(x).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 3, 3), 4.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = param(rng.standard_normal((1, 2, 3, 3)))
        target = rng.standard_normal((1, 2, 6, 6))

        def fn():
            return T.mse_loss(T.upsample2(x), Tensor(target))

        assert gradient_check(fn, [x]) < 1e-6


class TestDownscaleAvg:
    def test_block_mean(self):
        x = param(np.arange(16, dtype=float).reshape(1, 1, 4, 4))
        out = T.downscale_avg(x, 2)
        np.testing.assert_allclose(out.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_factor_must_divide(self):
        with pytest.raises(ConfigError):
            T.downscale_avg(param(np.zeros((1, 1, 6, 6))), 4)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        x = param(rng.standard_normal((1, 1, 4, 4)))
        target = rng.standard_normal((1, 1, 2, 2))

        def fn():
            return T.mse_loss(T.downscale_avg(x, 2), Tensor(target))

        assert gradient_check(fn, [x]) < 1e-9


class TestBatchNorm:
    def _stats(self, c):
        return np.zeros(c), np.ones(c)

    def test_normalized_input_passthrough(self):
        rng = np.random.default_rng(1)
        raw = rng.standard_normal((4, 2, 8, 8))
        raw -= raw.mean(axis=(0, 2, 3), keepdims=True)
        raw /= raw.std(axis=(0, 2, 3), keepdims=True)
        x = param(raw)
        rm, rv = self._stats(2)
        out = T.batch_norm(x, param(np.ones(2)), param(np.zeros(2)), rm, rv, train=True)
        np.testing.assert_allclose(out.data, raw, atol=1e-4)

    def test_zero_scale_gives_shift(self):
        rng = np.random.default_rng(2)
        x = param(rng.standard_normal((2, 3, 4, 4)))
        rm, rv = self._stats(3)
        out = T.batch_norm(x, param(np.zeros(3)), param(np.full(3, 0.7)), rm, rv, train=True)
        assert np.allclose(out.data, 0.7)

    def test_hand_standardization(self):
        x = param(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4))
        rm, rv = self._stats(1)
        out = T.batch_norm(x, param(np.ones(1)), param(np.zeros(1)), rm, rv, train=True, eps=1e-5)
        np.testing.assert_allclose(
            out.data.ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=2e-4
        )

    def test_running_stats_update(self):
        x = param(np.full((2, 1, 2, 2), 4.0))
        rm, rv = self._stats(1)
        T.batch_norm(x, param(np.ones(1)), param(np.zeros(1)), rm, rv, train=True, momentum=0.9)
        np.testing.assert_allclose(rm, [0.4])      # 0.9*0 + 0.1*4
        np.testing.assert_allclose(rv, [0.9])      # 0.9*1 + 0.1*0

    def test_infer_uses_running_stats(self):
        x = param(np.array([2.0, 4.0]).reshape(1, 1, 1, 2))
        rm, rv = np.array([3.0]), np.array([4.0])
        out = T.batch_norm(x, param(np.ones(1)), param(np.zeros(1)), rm, rv, train=False, eps=0.0001)
        np.testing.assert_allclose(out.data.ravel(), [-0.5, 0.5], atol=1e-4)

    def test_zero_variance_channel_is_safe(self):
        x = param(np.full((1, 1, 2, 2), 5.0))
        rm, rv = self._stats(1)
        out = T.batch_norm(x, param(np.ones(1)), param(np.zeros(1)), rm, rv, train=True)
        assert np.all(np.isfinite(out.data))

    def test_eps_must_be_positive(self):
        x = param(np.zeros((1, 1, 2, 2)))
        rm, rv = self._stats(1)
        with pytest.raises(ConfigError):
            T.batch_norm(x, param(np.ones(1)), param(np.zeros(1)), rm, rv, train=True, eps=0.0)

    def test_train_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        x = param(rng.standard_normal((3, 2, 4, 4)))
        scale = param(rng.uniform(0.5, 1.5, 2))
        shift = param(rng.standard_normal(2))
        target = rng.standard_normal((3, 2, 4, 4))
        rm, rv = self._stats(2)

        def fn():
            return T.mse_loss(
                T.batch_norm(x, scale, shift, rm, rv, train=True), Tensor(target)
            )

        assert gradient_check(fn, [x, scale, shift]) < 1e-5

    def test_infer_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        x = param(rng.standard_normal((2, 2, 3, 3)))
        scale = param(rng.uniform(0.5, 1.5, 2))
        shift = param(rng.standard_normal(2))
        target = rng.standard_normal((2, 2, 3, 3))
        rm = rng.standard_normal(2)
        rv = rng.uniform(0.5, 2.0, 2)

        def fn():
            return T.mse_loss(
                T.batch_norm(x, scale, shift, rm, rv, train=False), Tensor(target)
            )

        assert gradient_check(fn, [x, scale, shift]) < 1e-8


class TestMseLoss:
    def test_identity_is_zero(self):
        x = np.random.default_rng(0).random((2, 3))
        assert T.mse_loss(param(x), Tensor(x)).item() == 0.0

    def test_class_distance_squares(self):
        six = T.mse_loss(param(np.full(4, 6.0)), Tensor(np.zeros(4))).item()
        one = T.mse_loss(param(np.full(4, 1.0)), Tensor(np.zeros(4))).item()
        assert six == 36.0 and one == 1.0
        assert six == 36 * one   # far-off labels cost 36x more

    def test_arithmetic(self):
        out = T.mse_loss(param(np.array([0.0, 2.0])), Tensor(np.array([1.0, 0.0])))
        assert out.item() == 2.5

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            T.mse_loss(param(np.zeros(3)), Tensor(np.zeros(4)))

    def test_quadratic_derivative(self):
        x = param(np.array(3.0))
        loss = T.mse_loss(x, Tensor(np.array(0.0)))
        loss.backward()
        assert x.grad == pytest.approx(6.0)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_symmetric_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(6), rng.standard_normal(6)
        ab = T.mse_loss(param(a), Tensor(b)).item()
        ba = T.mse_loss(param(b), Tensor(a)).item()
        assert ab == ba >= 0.0
        assert (ab == 0.0) == np.array_equal(a, b)


class TestBackwardMechanics:
    def test_fanout_accumulation_doubles_gradient(self):
        x = param(np.ones((2, 2)))
        y = T.add(x, x)
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))

        x2 = param(np.ones((2, 2)))
        x2.sum().backward()
        np.testing.assert_array_equal(x.grad, 2 * x2.grad)

    def test_add_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            T.add(param(np.zeros(2)), param(np.zeros(3)))

    def test_add_gradcheck_is_exact(self):
        rng = np.random.default_rng(8)
        a, b = param(rng.standard_normal(5)), param(rng.standard_normal(5))
        target = rng.standard_normal(5)

        def fn():
            return T.mse_loss(T.add(a, b), Tensor(target))

        assert gradient_check(fn, [a, b]) < 1e-9

    def test_concat_splits_gradient(self):
        a = param(np.ones((1, 2, 2, 2)))
        b = param(np.ones((1, 3, 2, 2)))
        out = T.concat([a, b])
        assert out.shape == (1, 5, 2, 2)
        out.sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones((1, 2, 2, 2)))
        np.testing.assert_array_equal(b.grad, np.ones((1, 3, 2, 2)))

    def test_concat_zero_padding_channels(self):
        a = param(np.ones((1, 2, 2, 2)))
        out = T.concat([a], pad_channels=3)
        assert out.shape == (1, 5, 2, 2)
        assert np.all(out.data[:, 2:] == 0.0)
        out.sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones((1, 2, 2, 2)))

    def test_concat_requires_matching_spatial_shapes(self):
        with pytest.raises(ConfigError):
            T.concat([param(np.zeros((1, 1, 2, 2))), param(np.zeros((1, 1, 4, 4)))])

    def test_backward_before_forward_is_state_error(self):
        with pytest.raises(GraphStateError):
            param(np.array(1.0)).backward()

    def test_backward_needs_scalar(self):
        x = param(np.ones(3))
        y = T.add(x, x)
        with pytest.raises(GraphStateError):
            y.backward()

    def test_nan_gradient_reports_node_identity(self):
        prev = T.set_strict_finite(False)
        try:
            x = param(np.array([1e308, -1e308]))
            with np.errstate(over="ignore"):
                y = T.add(x, x, name="blowup")   # overflows to inf
            loss = T.mse_loss(y, Tensor(np.zeros(2)), name="loss")
            with pytest.raises(NumericError, match="blowup"):
                loss.backward()
        finally:
            T.set_strict_finite(prev)

    def test_strict_finite_forward_check(self):
        x = param(np.array([np.inf]))
        with pytest.raises(NumericError, match="bad_relu"):
            T.relu(x, name="bad_relu")


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([2, 4, 8]))
@settings(max_examples=20, deadline=None)
def test_pool_upsample_identity_on_blocked_inputs(seed, size):
    """max_pool2 then upsample2 is the identity on 2x2-constant-block images."""
    rng = np.random.default_rng(seed)
    blocks = rng.random((1, 1, size // 2, size // 2))
    x = param(np.kron(blocks, np.ones((2, 2))).reshape(1, 1, size, size))
    out = T.upsample2(T.max_pool2(x))
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("op_name", ["conv2d", "batch_norm", "relu", "add", "concat",
                                     "max_pool2", "upsample2", "downscale_avg", "mse_loss"])
def test_every_op_gradchecks_under_1e4(op_name):
    """Engine-wide gradient contract on random 64-bit inputs."""
    rng = np.random.default_rng(hash(op_name) % 2 ** 32)
    x = param(rng.standard_normal((2, 2, 4, 4)))
    target4 = rng.standard_normal((2, 2, 4, 4))
    leaves = [x]

    if op_name == "conv2d":
        w = param(rng.standard_normal((2, 2, 3, 3)))
        b = param(rng.standard_normal(2))
        leaves += [w, b]
        fn = lambda: T.mse_loss(T.conv2d(x, w, b, dilation=1), Tensor(target4))
    elif op_name == "batch_norm":
        s, sh = param(rng.uniform(0.5, 1.5, 2)), param(rng.standard_normal(2))
        rm, rv = np.zeros(2), np.ones(2)
        leaves += [s, sh]
        fn = lambda: T.mse_loss(T.batch_norm(x, s, sh, rm, rv, train=True), Tensor(target4))
    elif op_name == "relu":
        fn = lambda: T.mse_loss(T.relu(x), Tensor(target4))
    elif op_name == "add":
        y = param(rng.standard_normal((2, 2, 4, 4)))
        leaves.append(y)
        fn = lambda: T.mse_loss(T.add(x, y), Tensor(target4))
    elif op_name == "concat":
        y = param(rng.standard_normal((2, 1, 4, 4)))
        leaves.append(y)
        t = rng.standard_normal((2, 3, 4, 4))
        fn = lambda: T.mse_loss(T.concat([x, y]), Tensor(t))
    elif op_name == "max_pool2":
        t = rng.standard_normal((2, 2, 2, 2))
        fn = lambda: T.mse_loss(T.max_pool2(x), Tensor(t))
    elif op_name == "upsample2":
        t = rng.standard_normal((2, 2, 8, 8))
        fn = lambda: T.mse_loss(T.upsample2(x), Tensor(t))
    elif op_name == "downscale_avg":
        t = rng.standard_normal((2, 2, 2, 2))
        fn = lambda: T.mse_loss(T.downscale_avg(x, 2), Tensor(t))
    else:
        fn = lambda: T.mse_loss(x, Tensor(target4))

    assert gradient_check(fn, leaves) < 1e-4
