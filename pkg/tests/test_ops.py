import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccnn import ops
from ccnn.errors import (
    DataError,
    DimensionError,
    ParameterError,
    UsageError,
)

import oracles


def randn(rng, *shape):
    return rng.standard_normal(shape)


class TestConv2d:
    @given(
        b=st.integers(1, 3),
        c=st.integers(1, 4),
        n=st.integers(1, 4),
        hw=st.integers(3, 8),
        k=st.sampled_from([1, 3, 5]),
        seed=st.integers(0, 2 ** 31),
    )
    @settings(max_examples=40)
    def test_matches_direct_loop_same_padding(self, b, c, n, hw, k, seed):
        rng = np.random.default_rng(seed)
        x = randn(rng, b, c, hw, hw)
        w = randn(rng, n, c, k, k)
        got = ops.conv2d(x, w, stride=1, padding="same")
        want = oracles.conv2d_direct(x, w, stride=1, padding="same")
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)

    @given(
        c=st.integers(1, 3),
        n=st.integers(1, 3),
        hw=st.sampled_from([4, 6, 8]),
        stride=st.sampled_from([1, 2]),
        seed=st.integers(0, 2 ** 31),
    )
    @settings(max_examples=30)
    def test_matches_direct_loop_valid_padding(self, c, n, hw, stride, seed):
        rng = np.random.default_rng(seed)
        x = randn(rng, 2, c, hw, hw)
        w = randn(rng, n, c, 3, 3)
        got = ops.conv2d(x, w, stride=stride, padding="valid")
        want = oracles.conv2d_direct(x, w, stride=stride, padding="valid")
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)

    def test_one_by_one_fast_path_agrees_with_general(self, rng):
        x = randn(rng, 2, 5, 6, 6)
        w = randn(rng, 3, 5, 1, 1)
        got = ops.conv2d(x, w)
        want = oracles.conv2d_direct(x, w)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)

    def test_unbatched_input_round_trips(self, rng):
        x = randn(rng, 3, 6, 6)
        w = randn(rng, 2, 3, 3, 3)
        single = ops.conv2d(x, w)
        batched = ops.conv2d(x[None], w)
        assert single.shape == (2, 6, 6)
        np.testing.assert_array_equal(single, batched[0])

    def test_channel_mismatch_raises(self, rng):
        with pytest.raises(DimensionError):
            ops.conv2d(randn(rng, 1, 3, 4, 4), randn(rng, 2, 4, 3, 3))

    def test_even_kernel_same_padding_rejected(self, rng):
        with pytest.raises(ParameterError):
            ops.conv2d(randn(rng, 1, 2, 4, 4), randn(rng, 2, 2, 2, 2), padding="same")

    def test_bad_stride_rejected(self, rng):
        with pytest.raises(ParameterError):
            ops.conv2d(randn(rng, 1, 2, 4, 4), randn(rng, 2, 2, 3, 3), stride=0)

    def test_backward_needs_saved_input(self, rng):
        with pytest.raises(UsageError):
            ops.conv2d_backward(randn(rng, 1, 2, 4, 4), None, randn(rng, 2, 2, 3, 3))


class TestMaxpool:
    @given(
        b=st.integers(1, 3),
        c=st.integers(1, 4),
        hw=st.sampled_from([2, 4, 6, 8]),
        seed=st.integers(0, 2 ** 31),
    )
    @settings(max_examples=30)
    def test_matches_direct(self, b, c, hw, seed):
        rng = np.random.default_rng(seed)
        x = randn(rng, b, c, hw, hw)
        np.testing.assert_array_equal(ops.maxpool2x2(x), oracles.maxpool2x2_direct(x))

    def test_odd_spatial_rejected(self, rng):
        with pytest.raises(DimensionError):
            ops.maxpool2x2(randn(rng, 1, 1, 3, 4))

    def test_backward_routes_to_window_max(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        g = np.array([[[[5.0]]]])
        gx, = (ops.maxpool2x2_backward(g, x),)
        np.testing.assert_array_equal(gx, [[[[0, 0], [0, 5.0]]]])

    def test_backward_tie_goes_to_first_position(self):
        x = np.ones((1, 1, 2, 2))
        gx = ops.maxpool2x2_backward(np.array([[[[1.0]]]]), x)
        np.testing.assert_array_equal(gx, [[[[1.0, 0], [0, 0]]]])


class TestBatchnorm:
    def test_train_normalizes_to_zero_mean_unit_var(self, rng):
        x = randn(rng, 8, 3, 5, 5) * 4 + 2
        gamma, beta = np.ones(3), np.zeros(3)
        y, mu, var = ops.batchnorm(x, gamma, beta, mode="train")
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-7)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
        np.testing.assert_allclose(mu, x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(var, x.var(axis=(0, 2, 3)))

    def test_running_stats_blend_with_momentum(self, rng):
        x = randn(rng, 4, 2, 3, 3)
        rm, rv = np.zeros(2), np.ones(2)
        _, mean_out, var_out = ops.batchnorm(
            x, np.ones(2), np.zeros(2), mode="train",
            momentum=0.9, running_mean=rm, running_var=rv,
        )
        np.testing.assert_allclose(mean_out, 0.9 * rm + 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(var_out, 0.9 * rv + 0.1 * x.var(axis=(0, 2, 3)))

    def test_infer_uses_running_stats(self, rng):
        x = randn(rng, 4, 2, 3, 3)
        rm = np.array([1.0, -1.0])
        rv = np.array([4.0, 0.25])
        gamma = np.array([2.0, 3.0])
        beta = np.array([0.5, -0.5])
        y, _, _ = ops.batchnorm(
            x, gamma, beta, mode="infer", running_mean=rm, running_var=rv
        )
        want = gamma.reshape(1, 2, 1, 1) * (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(
            rv.reshape(1, 2, 1, 1) + ops.BN_EPS
        ) + beta.reshape(1, 2, 1, 1)
        np.testing.assert_allclose(y, want, rtol=1e-6, atol=1e-9)

    def test_infer_without_stats_raises(self, rng):
        with pytest.raises(UsageError):
            ops.batchnorm(randn(rng, 2, 2, 3, 3), np.ones(2), np.zeros(2), mode="infer")

    def test_2d_input_supported(self, rng):
        x = randn(rng, 16, 5)
        y, mu, var = ops.batchnorm(x, np.ones(5), np.zeros(5), mode="train")
        assert y.shape == x.shape
        np.testing.assert_allclose(mu, x.mean(axis=0))

    def test_bad_mode_rejected(self, rng):
        with pytest.raises(ParameterError):
            ops.batchnorm(randn(rng, 2, 2, 4, 4), np.ones(2), np.zeros(2), mode="test")


class TestActivationsAndLoss:
    def test_relu_clamps_negatives(self):
        x = np.array([-2.0, 0.0, 3.0])
        np.testing.assert_array_equal(ops.relu(x), [0.0, 0.0, 3.0])

    def test_softmax_rows_sum_to_one_and_matches_direct(self, rng):
        z = randn(rng, 5, 7)
        p = ops.softmax(z)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
        np.testing.assert_allclose(p, oracles.softmax_direct(z), rtol=1e-12)

    def test_softmax_shift_invariance(self, rng):
        z = randn(rng, 3, 4)
        np.testing.assert_allclose(ops.softmax(z), ops.softmax(z + 1000.0), atol=1e-12)

    def test_softmax_rejects_non_finite(self):
        with pytest.raises(DataError):
            ops.softmax(np.array([[1.0, np.nan]]))

    def test_cross_entropy_picks_label_probability(self):
        probs = np.array([0.1, 0.7, 0.2])
        assert ops.cross_entropy(probs, 1) == pytest.approx(-np.log(0.7))

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(ParameterError):
            ops.cross_entropy(np.array([0.5, 0.5]), 2)

    def test_fused_loss_matches_composition(self, rng):
        z = randn(rng, 6, 5)
        labels = np.array([0, 1, 2, 3, 4, 0])
        loss, probs = ops.softmax_cross_entropy(z, labels)
        want = -np.log(oracles.softmax_direct(z)[np.arange(6), labels]).mean()
        assert loss == pytest.approx(want, rel=1e-12)
        np.testing.assert_allclose(probs, oracles.softmax_direct(z), rtol=1e-12)

    def test_fused_loss_empty_batch_rejected(self):
        with pytest.raises(DimensionError):
            ops.softmax_cross_entropy(np.zeros((0, 3)), np.zeros(0, dtype=int))


class TestDropout:
    def test_infer_mode_is_identity(self, rng):
        x = randn(rng, 4, 4)
        y, mask = ops.dropout(x, 0.5, mode="infer")
        assert mask is None
        np.testing.assert_array_equal(y, x)

    def test_rate_zero_is_identity(self, rng):
        x = randn(rng, 4, 4)
        y, mask = ops.dropout(x, 0.0, mode="train", rng=rng)
        assert mask is None
        np.testing.assert_array_equal(y, x)

    def test_train_scales_survivors(self, rng):
        x = np.ones((2000,))
        y, mask = ops.dropout(x, 0.25, mode="train", rng=rng)
        kept = y[mask]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert 0.6 < mask.mean() < 0.9

    def test_train_without_rng_rejected(self, rng):
        with pytest.raises(ParameterError):
            ops.dropout(randn(rng, 3), 0.5, mode="train")

    def test_rate_one_rejected(self, rng):
        with pytest.raises(ParameterError):
            ops.dropout(randn(rng, 3), 1.0, mode="train", rng=rng)


class TestLinear:
    def test_matches_matmul(self, rng):
        x = randn(rng, 4, 6)
        w = randn(rng, 6, 3)
        b = randn(rng, 3)
        np.testing.assert_allclose(ops.linear(x, w, b), x @ w + b, rtol=1e-12)

    def test_single_vector_input(self, rng):
        x = randn(rng, 6)
        w = randn(rng, 6, 3)
        np.testing.assert_allclose(ops.linear(x, w), x @ w, rtol=1e-12)


class TestConvParams:
    def test_param_count_is_weights_plus_four_per_channel(self, rng):
        p = ops.ConvParams(
            weights=randn(rng, 8, 3, 3, 3),
            bn_gamma=np.ones(8),
            bn_beta=np.zeros(8),
            bn_mean=np.zeros(8),
            bn_var=np.ones(8),
        )
        assert p.param_count == 8 * 3 * 9 + 4 * 8

    def test_nonpositive_variance_rejected(self, rng):
        with pytest.raises(ParameterError):
            ops.ConvParams(
                weights=randn(rng, 2, 1, 1, 1),
                bn_gamma=np.ones(2),
                bn_beta=np.zeros(2),
                bn_mean=np.zeros(2),
                bn_var=np.zeros(2),
            )
