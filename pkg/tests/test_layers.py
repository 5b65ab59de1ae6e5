"""Embedding, LSTM cell, and batchnorm against scalar oracles."""

import math

import numpy as np
import pytest

from phraseground import layers
from phraseground.errors import DimensionError
from phraseground.fdiff import finite_difference_gradient, relative_errors


def lstm_step_oracle(w_x, w_h, b, x, h_prev, c_prev):
    """Pure-python per-scalar unroll; gate order (input, forget, output, candidate)."""
    hd = len(h_prev)
    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))
    h_out, c_out = [0.0] * hd, [0.0] * hd
    for u in range(hd):
        zi = b[u] + sum(w_x[u][j] * x[j] for j in range(len(x))) \
            + sum(w_h[u][j] * h_prev[j] for j in range(hd))
        zf = b[hd + u] + sum(w_x[hd + u][j] * x[j] for j in range(len(x))) \
            + sum(w_h[hd + u][j] * h_prev[j] for j in range(hd))
        zo = b[2 * hd + u] + sum(w_x[2 * hd + u][j] * x[j] for j in range(len(x))) \
            + sum(w_h[2 * hd + u][j] * h_prev[j] for j in range(hd))
        zg = b[3 * hd + u] + sum(w_x[3 * hd + u][j] * x[j] for j in range(len(x))) \
            + sum(w_h[3 * hd + u][j] * h_prev[j] for j in range(hd))
        c_out[u] = sig(zf) * c_prev[u] + sig(zi) * math.tanh(zg)
        h_out[u] = sig(zo) * math.tanh(c_out[u])
    return np.array(h_out), np.array(c_out)


class TestInit:
    def test_uniform_within_limit(self):
        arr = layers.init_params((200, 50), "uniform", 0, uniform_limit=0.1)
        assert arr.shape == (200, 50)
        assert np.abs(arr).max() <= 0.1
        # a uniform on [-l, l] has variance l^2/3
        assert np.var(arr) == pytest.approx(0.01 / 3, rel=0.2)

    def test_xavier_variance(self):
        arr = layers.init_params((100, 100), "xavier", 1)
        assert np.var(arr) == pytest.approx(2.0 / 200, rel=0.2)
        limit = math.sqrt(6.0 / 200)
        assert np.abs(arr).max() <= limit

    def test_msra_variance(self):
        # fan_in is the first axis
        arr = layers.init_params((64, 16), "msra", 2)
        assert np.var(arr) == pytest.approx(2.0 / 64, rel=0.2)

    def test_unknown_scheme(self):
        with pytest.raises(Exception):
            layers.init_params((2, 2), "glorot", 0)

    def test_seed_reproducible(self):
        a = layers.init_params((30, 30), "xavier", 7)
        b = layers.init_params((30, 30), "xavier", 7)
        np.testing.assert_array_equal(a, b)


class TestEmbedding:
    def test_lookup_rows(self):
        table = layers.EmbeddingTable.create(5, 3, seed=0)
        out = table.lookup([2, 0, 2])
        np.testing.assert_array_equal(out[0], table.weights[2])
        np.testing.assert_array_equal(out[1], table.weights[0])
        np.testing.assert_array_equal(out[2], table.weights[2])

    def test_lookup_out_of_range(self):
        table = layers.EmbeddingTable.create(5, 3, seed=0)
        with pytest.raises(IndexError):
            table.lookup([5])

    def test_backward_accumulates_repeats(self):
        table = layers.EmbeddingTable.create(4, 2, seed=0)
        grad = np.zeros_like(table.weights)
        rows = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        layers.embedding_backward(rows, [1, 1, 3], grad)
        np.testing.assert_array_equal(grad[1], [4.0, 6.0])
        np.testing.assert_array_equal(grad[3], [5.0, 6.0])
        np.testing.assert_array_equal(grad[0], [0.0, 0.0])


class TestLSTMStep:
    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            in_dim, hd = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            params = layers.LSTMCellParams.create(in_dim, hd, rng)
            x = rng.normal(size=in_dim)
            h0 = rng.normal(size=hd)
            c0 = rng.normal(size=hd)
            h, c = layers.lstm_step(params, x, h0, c0)
            oh, oc = lstm_step_oracle(params.w_x.tolist(), params.w_h.tolist(),
                                      params.b.tolist(), x, h0, c0)
            np.testing.assert_allclose(h, oh, rtol=0, atol=1e-12)
            np.testing.assert_allclose(c, oc, rtol=0, atol=1e-12)

    def test_forget_bias_default_one(self):
        params = layers.LSTMCellParams.create(3, 4, seed=0)
        hd = 4
        np.testing.assert_array_equal(params.b[hd:2 * hd], np.ones(4))
        np.testing.assert_array_equal(params.b[:hd], np.zeros(4))

    def test_saturated_forget_gate_preserves_cell(self):
        # huge forget bias, huge negative input bias: c carries through
        params = layers.LSTMCellParams.create(2, 3, seed=0)
        params.b[3:6] = 100.0    # forget ~ 1
        params.b[0:3] = -100.0   # input ~ 0
        c0 = np.array([0.3, -0.7, 2.0])
        _, c = layers.lstm_step(params, np.zeros(2), np.zeros(3), c0)
        np.testing.assert_allclose(c, c0, rtol=0, atol=1e-10)

    def test_saturated_negative_forget_clears_cell(self):
        params = layers.LSTMCellParams.create(2, 3, seed=0)
        params.b[3:6] = -100.0   # forget ~ 0
        params.b[0:3] = -100.0   # input ~ 0
        _, c = layers.lstm_step(params, np.zeros(2), np.zeros(3), np.array([5.0, -5.0, 1.0]))
        np.testing.assert_allclose(c, 0.0, rtol=0, atol=1e-10)

    def test_shape_mismatch(self):
        params = layers.LSTMCellParams.create(3, 4, seed=0)
        with pytest.raises(DimensionError):
            layers.lstm_step(params, np.zeros(2), np.zeros(4), np.zeros(4))

    def test_step_backward_finite_difference(self):
        rng = np.random.default_rng(11)
        params = layers.LSTMCellParams.create(3, 4, rng)
        x, h0, c0 = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
        dh, dc = rng.normal(size=4), rng.normal(size=4)

        _, _, cache = layers.lstm_step_with_cache(params, x, h0, c0)
        grads = {"w_x": np.zeros_like(params.w_x),
                 "w_h": np.zeros_like(params.w_h),
                 "b": np.zeros_like(params.b)}
        dx, dh_prev, dc_prev = layers.lstm_step_backward(params, cache, dh, dc, grads)

        def loss():
            h, c = layers.lstm_step(params, x, h0, c0)
            return float((h * dh).sum() + (c * dc).sum())

        for analytic, arr in [(dx, x), (dh_prev, h0), (dc_prev, c0),
                              (grads["w_x"], params.w_x), (grads["w_h"], params.w_h),
                              (grads["b"], params.b)]:
            numeric = finite_difference_gradient(loss, arr)
            assert relative_errors(analytic, numeric, 1e-5).max() < 1e-5


class TestEncodeSequence:
    def test_matches_unrolled_steps(self):
        rng = np.random.default_rng(12)
        params = layers.LSTMCellParams.create(3, 5, rng)
        seq = rng.normal(size=(4, 3))
        h = np.zeros(5)
        c = np.zeros(5)
        for x in seq:
            h, c = layers.lstm_step(params, x, h, c)
        np.testing.assert_allclose(layers.encode_sequence(params, seq), h,
                                   rtol=0, atol=1e-15)

    def test_empty_sequence_rejected(self):
        params = layers.LSTMCellParams.create(3, 5, seed=0)
        with pytest.raises(DimensionError):
            layers.encode_sequence(params, np.zeros((0, 3)))

    def test_bptt_finite_difference(self):
        rng = np.random.default_rng(13)
        params = layers.LSTMCellParams.create(2, 3, rng)
        seq = rng.normal(size=(5, 2))
        dh = rng.normal(size=3)

        _, caches = layers.encode_sequence_with_cache(params, seq)
        grads = {"w_x": np.zeros_like(params.w_x),
                 "w_h": np.zeros_like(params.w_h),
                 "b": np.zeros_like(params.b)}
        d_emb = layers.encode_sequence_backward(params, caches, dh, grads)

        def loss():
            return float((layers.encode_sequence(params, seq) * dh).sum())

        for analytic, arr in [(d_emb, seq), (grads["w_x"], params.w_x),
                              (grads["w_h"], params.w_h), (grads["b"], params.b)]:
            numeric = finite_difference_gradient(loss, arr)
            assert relative_errors(analytic, numeric, 1e-5).max() < 1e-5


class TestBatchNorm:
    def test_train_output_standardized(self):
        rng = np.random.default_rng(14)
        params = layers.BatchNormParams.create(4)
        batch = rng.normal(loc=3.0, scale=2.0, size=(64, 4))
        out, _ = layers.batchnorm_train_with_cache(params, batch)
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
        # biased (population) variance; eps shifts it by ~eps/var
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-4)

    def test_running_stats_update(self):
        # one update from the init (mean 0, var 1) with momentum 0.1
        params = layers.BatchNormParams.create(1, momentum=0.1)
        batch = np.array([[1.0], [3.0]])  # mean 2, biased var 1
        layers.batchnorm_train_with_cache(params, batch, update_running=True)
        assert params.running_mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * 2.0, abs=1e-15)
        assert params.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 1.0, abs=1e-15)

        layers.batchnorm_train_with_cache(params, batch, update_running=True)
        assert params.running_mean[0] == pytest.approx(0.9 * 0.2 + 0.1 * 2.0, abs=1e-15)

    def test_update_flag_off_leaves_stats(self):
        params = layers.BatchNormParams.create(2)
        before = params.running_mean.copy()
        layers.batchnorm_train_with_cache(params, np.random.default_rng(0).normal(size=(8, 2)),
                                          update_running=False)
        np.testing.assert_array_equal(params.running_mean, before)

    def test_singleton_batch_rejected_in_train(self):
        params = layers.BatchNormParams.create(2)
        with pytest.raises(DimensionError):
            layers.batchnorm_train_with_cache(params, np.zeros((1, 2)))

    def test_infer_uses_running_stats(self):
        params = layers.BatchNormParams.create(2)
        params.running_mean[:] = [1.0, -1.0]
        params.running_var[:] = [4.0, 0.25]
        params.scale[:] = [2.0, 3.0]
        params.shift[:] = [0.5, -0.5]
        x = np.array([[3.0, 0.0]])
        out = layers.batchnorm_infer(params, x)
        eps = params.eps
        exp0 = 2.0 * (3.0 - 1.0) / math.sqrt(4.0 + eps) + 0.5
        exp1 = 3.0 * (0.0 + 1.0) / math.sqrt(0.25 + eps) - 0.5
        np.testing.assert_allclose(out, [[exp0, exp1]], rtol=1e-12)

    def test_infer_is_affine_idempotent_composition(self):
        # running infer twice with identity scale/shift equals a single affine map
        params = layers.BatchNormParams.create(3)
        rng = np.random.default_rng(15)
        params.running_mean[:] = rng.normal(size=3)
        params.running_var[:] = rng.uniform(0.5, 2.0, size=3)
        x = rng.normal(size=(6, 3))
        once = layers.batchnorm_infer(params, x)
        manual = (x - params.running_mean) / np.sqrt(params.running_var + params.eps)
        np.testing.assert_allclose(once, manual, rtol=0, atol=1e-12)

    def test_backward_finite_difference(self):
        rng = np.random.default_rng(16)
        params = layers.BatchNormParams.create(3)
        params.scale[:] = rng.uniform(0.5, 1.5, size=3)
        params.shift[:] = rng.normal(size=3)
        x = rng.normal(size=(5, 3))
        g = rng.normal(size=(5, 3))

        _, cache = layers.batchnorm_train_with_cache(params, x, update_running=False)
        dx, dscale, dshift = layers.batchnorm_backward(params, cache, g)

        def loss():
            out, _ = layers.batchnorm_train_with_cache(params, x, update_running=False)
            return float((out * g).sum())

        for analytic, arr in [(dx, x), (dscale, params.scale), (dshift, params.shift)]:
            numeric = finite_difference_gradient(loss, arr)
            assert relative_errors(analytic, numeric, 1e-4).max() < 1e-4

    def test_bad_eps_rejected(self):
        with pytest.raises(Exception):
            layers.BatchNormParams.create(2, eps=0.0)
