"""Operator contracts, brute-force oracles, and gradient checks."""

import numpy as np
import pytest

from cardiolearn import tensor as T
from cardiolearn.errors import ContractError, ShapeError
from cardiolearn.layers import BatchNorm1d
from cardiolearn.tensor import Parameter, Tensor

from conftest import (
    check_gradients, conv1d_oracle, conv_transpose1d_oracle, fd_gradient,
    relative_close, rng,
)


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def p(a):
    return Parameter(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# conv1d

class TestConv1d:
    def test_identity_kernel(self):
        y = T.conv1d(t([[[1.0, 2, 3]]]), p([[[0.0, 1, 0]]]), p([0.0]), 1, 1)
        assert np.array_equal(y.data, [[[1.0, 2, 3]]])

    def test_box_filter_stride2(self):
        y = T.conv1d(t([[[1.0, 1, 1, 1]]]), p([[[1.0, 1]]]), None, 2, 0)
        assert np.array_equal(y.data, [[[2.0, 2]]])

    def test_matches_triple_loop_oracle(self):
        r = rng(1)
        for trial in range(25):
            B, C, O = r.integers(1, 3), int(r.integers(1, 4)), int(r.integers(1, 5))
            L, K = int(r.integers(4, 20)), int(r.integers(1, 4))
            stride, pad = int(r.integers(1, 3)), int(r.integers(0, 3))
            if (L + 2 * pad - K) // stride + 1 < 1:
                continue
            x = r.standard_normal((B, C, L))
            w = r.standard_normal((O, C, K))
            b = r.standard_normal(O)
            y = T.conv1d(t(x), p(w), p(b), stride, pad)
            assert relative_close(y.data, conv1d_oracle(x, w, b, stride, pad))

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.conv1d(t(np.zeros((1, 2, 8))), p(np.zeros((1, 3, 3))), None, 1, 0)

    def test_nonpositive_output_raises(self):
        with pytest.raises(ShapeError):
            T.conv1d(t(np.zeros((1, 1, 2))), p(np.zeros((1, 1, 5))), None, 1, 0)

    def test_random_spec_example(self):
        r = rng(7)
        x = r.standard_normal((1, 3, 17))
        w = r.standard_normal((5, 3, 3))
        b = r.standard_normal(5)
        y = T.conv1d(t(x), p(w), p(b), 2, 1)
        assert relative_close(y.data, conv1d_oracle(x, w, b, 2, 1))


class TestConvTranspose1d:
    def test_single_tap_expansion(self):
        y = T.conv_transpose1d(t([[[1.0]]]), p([[[1.0, 1]]]), None, 2)
        assert np.array_equal(y.data, [[[1.0, 1]]])

    def test_stride_insertion(self):
        y = T.conv_transpose1d(t([[[1.0, 2]]]), p([[[1.0, 0]]]), None, 2)
        assert np.array_equal(y.data, [[[1.0, 0, 2, 0]]])

    def test_matches_scatter_oracle(self):
        r = rng(2)
        for trial in range(25):
            B, C, O = int(r.integers(1, 3)), int(r.integers(1, 4)), int(r.integers(1, 4))
            L, K, stride = int(r.integers(1, 12)), int(r.integers(1, 5)), int(r.integers(1, 4))
            x = r.standard_normal((B, C, L))
            w = r.standard_normal((C, O, K))
            b = r.standard_normal(O)
            y = T.conv_transpose1d(t(x), p(w), p(b), stride)
            ref = conv_transpose1d_oracle(x, w, b, stride)
            assert y.data.shape[2] == (L - 1) * stride + K
            assert relative_close(y.data, ref)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.conv_transpose1d(t(np.zeros((1, 2, 4))), p(np.zeros((3, 1, 2))), None, 1)


class TestInterpolate:
    def test_midpoint_of_ramp(self):
        assert np.allclose(T.linear_interpolate(t([[[0.0, 2]]]), 3).data, [[[0.0, 1, 2]]])

    def test_constant_preserved(self):
        assert np.allclose(T.linear_interpolate(t([[[5.0, 5, 5]]]), 7).data, np.full((1, 1, 7), 5.0))

    def test_identity(self):
        x = rng(3).standard_normal((2, 3, 9))
        assert np.array_equal(T.linear_interpolate(t(x), 9).data, x)


class TestPooling:
    def test_gap(self):
        assert np.allclose(T.global_avg_pool(t([[[1.0, 2, 3]]])).data, [[2.0]])

    def test_aap_even_bins(self):
        assert np.allclose(T.adaptive_avg_pool(t([[[1.0, 2, 3, 4]]]), 2).data, [[[1.5, 3.5]]])

    def test_aap_identity(self):
        x = rng(4).standard_normal((2, 2, 7))
        assert np.array_equal(T.adaptive_avg_pool(t(x), 7).data, x)

    def test_aap_uneven_bins(self):
        # bins for L=5, out=2: [0,2) and [2,5)
        y = T.adaptive_avg_pool(t([[[1.0, 2, 3, 4, 5]]]), 2)
        assert np.allclose(y.data, [[[1.5, 4.0]]])

    def test_aap_too_long_raises(self):
        with pytest.raises(ShapeError):
            T.adaptive_avg_pool(t(np.zeros((1, 1, 4))), 5)


class TestBatchNorm:
    def test_eval_identity_stats(self):
        r = rng(5)
        x = r.standard_normal((2, 3, 8))
        y = T.batchnorm1d(t(x), p(np.ones(3)), p(np.zeros(3)),
                          np.zeros(3), np.ones(3) - T.BN_EPS, batch_stats=False)
        assert np.allclose(y.data, x, atol=1e-12)

    def test_eval_zero_variance(self):
        x = np.full((1, 1, 6), 4.2)
        y = T.batchnorm1d(t(x), p(np.ones(1)), p(np.zeros(1)),
                          np.array([4.2]), np.array([0.0]), batch_stats=False)
        assert np.allclose(y.data, 0.0)

    def test_train_output_moments(self):
        r = rng(6)
        x = r.standard_normal((4, 3, 50)) * 3.0 + 1.5
        layer = BatchNorm1d(3, dtype=np.float64)
        y = layer.forward(t(x), train=True)
        assert np.allclose(y.data.mean(axis=(0, 2)), 0.0, atol=1e-5)
        assert np.allclose(y.data.var(axis=(0, 2)), 1.0, atol=1e-5)

    def test_running_stats_momentum(self):
        r = rng(7)
        x = r.standard_normal((2, 2, 20))
        layer = BatchNorm1d(2, dtype=np.float64)
        layer.forward(t(x), train=True)
        expect_mean = 0.1 * x.mean(axis=(0, 2))
        expect_var = 0.9 * 1.0 + 0.1 * x.var(axis=(0, 2))
        assert np.allclose(layer.running_mean, expect_mean)
        assert np.allclose(layer.running_var, expect_var)


class TestElementwise:
    def test_relu(self):
        assert np.array_equal(T.relu(t([-1.0, 0, 2])).data, [0.0, 0, 2])

    def test_sigmoid_at_zero(self):
        assert T.sigmoid(t(0.0)).data == 0.5

    def test_sigmoid_gradient_at_zero(self):
        x = p(np.array(0.0))
        y = T.sigmoid(x)
        y.backward()
        fd = fd_gradient(lambda: T.sigmoid(x), x, 0)
        assert abs(x.grad - 0.25) < 1e-8
        assert abs(fd - 0.25) < 1e-6

    def test_sigmoid_range(self):
        y = T.sigmoid(t(rng(8).standard_normal(100) * 20))
        assert np.all(y.data > 0) and np.all(y.data < 1)


class TestBce:
    def test_half_prob(self):
        loss = T.bce_loss(t(np.array([[0.5]])), np.array([[1.0]]))
        assert abs(loss.data - np.log(2)) < 1e-9

    def test_perfect_prediction(self):
        probs = t(np.array([1.0 - 1e-9, 1e-9]))
        loss = T.bce_loss(probs, np.array([1.0, 0.0]))
        assert loss.data <= 1e-6

    def test_gradient_matches_fd(self):
        r = rng(9)
        logits = p(r.standard_normal(12))

        def loss_fn():
            return T.bce_loss(T.sigmoid(logits), targets)

        targets = (r.random(12) > 0.5).astype(np.float64)
        checked = check_gradients(loss_fn, [logits], rtol=1e-6, atol=1e-10)
        assert checked == 12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.bce_loss(t(np.zeros(3)), np.zeros(4))


# ---------------------------------------------------------------------------
# backward contracts

class TestBackward:
    def test_product_gradient(self):
        w = p(np.array(3.0))
        loss = T.mul_const(w, 2.0)
        loss.backward()
        assert w.grad == 2.0

    def test_frozen_scalar_gets_exact_zero(self):
        w = p(np.array([1.0, 2.0, 3.0]))
        w.trainable = np.array([True, False, True])
        y = T.mul_const(w, np.array([2.0, 2.0, 2.0]))
        loss = Tensor(y.data.sum(), _parents=(y,), _backward_fn=lambda g: (np.full(3, g),))
        loss.backward()
        assert w.grad[1] == 0.0 and w.grad[0] == 2.0

    def test_nonscalar_loss_raises(self):
        w = p(np.array([1.0, 2.0]))
        with pytest.raises(ContractError):
            T.mul_const(w, 1.0).backward()

    def test_grad_accumulates_over_reuse(self):
        w = p(np.array(2.0))
        y = T.add(T.mul_const(w, 3.0), T.mul_const(w, 4.0))
        y.backward()
        assert w.grad == 7.0


# ---------------------------------------------------------------------------
# per-operator gradient checks (randomized trials)

def _gc_conv(r):
    x = p(r.standard_normal((2, 2, 9)))
    w = p(r.standard_normal((3, 2, 3)))
    b = p(r.standard_normal(3))

    def loss_fn():
        y = T.conv1d(x, w, b, 2, 1)
        return Tensor((y.data ** 2).sum() / 2, _parents=(y,), _backward_fn=lambda g: (g * y.data,))

    return loss_fn, [x, w, b]


def _gc_deconv(r):
    x = p(r.standard_normal((2, 3, 5)))
    w = p(r.standard_normal((3, 2, 4)))
    b = p(r.standard_normal(2))

    def loss_fn():
        y = T.conv_transpose1d(x, w, b, 2)
        return Tensor((y.data ** 2).sum() / 2, _parents=(y,), _backward_fn=lambda g: (g * y.data,))

    return loss_fn, [x, w, b]


def _gc_interp(r):
    x = p(r.standard_normal((1, 2, 6)))

    def loss_fn():
        y = T.linear_interpolate(x, 11)
        return Tensor((y.data ** 2).sum() / 2, _parents=(y,), _backward_fn=lambda g: (g * y.data,))

    return loss_fn, [x]


def _gc_aap(r):
    x = p(r.standard_normal((2, 2, 10)))

    def loss_fn():
        y = T.adaptive_avg_pool(x, 4)
        return Tensor((y.data ** 2).sum() / 2, _parents=(y,), _backward_fn=lambda g: (g * y.data,))

    return loss_fn, [x]


def _gc_gap(r):
    x = p(r.standard_normal((2, 3, 7)))

    def loss_fn():
        y = T.global_avg_pool(x)
        return Tensor((y.data ** 2).sum() / 2, _parents=(y,), _backward_fn=lambda g: (g * y.data,))

    return loss_fn, [x]


def _gc_bn_train(r):
    x = p(r.standard_normal((3, 2, 8)))
    g = p(r.standard_normal(2) + 1.5)
    b = p(r.standard_normal(2))

    def loss_fn():
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        y = T.batchnorm1d(x, g, b, mean, var, batch_stats=True)
        w = np.cos(np.arange(y.data.size)).reshape(y.data.shape)
        return Tensor((y.data * w).sum(), _parents=(y,), _backward_fn=lambda go: (go * w,))

    return loss_fn, [x, g, b]


def _gc_bn_eval(r):
    x = p(r.standard_normal((2, 2, 6)))
    g = p(r.standard_normal(2) + 1.0)
    b = p(r.standard_normal(2))
    mean = r.standard_normal(2)
    var = r.random(2) + 0.5

    def loss_fn():
        y = T.batchnorm1d(x, g, b, mean, var, batch_stats=False)
        return Tensor((y.data ** 2).sum() / 2, _parents=(y,), _backward_fn=lambda go: (go * y.data,))

    return loss_fn, [x, g, b]


def _gc_relu(r):
    vals = r.standard_normal((2, 2, 8))
    vals[np.abs(vals) < 0.01] += 0.05  # keep away from the kink
    x = p(vals)

    def loss_fn():
        y = T.relu(x)
        return Tensor((y.data ** 2).sum() / 2, _parents=(y,), _backward_fn=lambda go: (go * y.data,))

    return loss_fn, [x]


def _gc_sigmoid(r):
    x = p(r.standard_normal((2, 3, 5)))

    def loss_fn():
        y = T.sigmoid(x)
        return Tensor((y.data ** 2).sum() / 2, _parents=(y,), _backward_fn=lambda go: (go * y.data,))

    return loss_fn, [x]


def _gc_linear(r):
    x = p(r.standard_normal((3, 4)))
    w = p(r.standard_normal((2, 4)))
    b = p(r.standard_normal(2))

    def loss_fn():
        y = T.linear(x, w, b)
        return Tensor((y.data ** 2).sum() / 2, _parents=(y,), _backward_fn=lambda go: (go * y.data,))

    return loss_fn, [x, w, b]


def _gc_channel_scale(r):
    x = p(r.standard_normal((2, 3, 5)))
    s = p(r.standard_normal((2, 3)))

    def loss_fn():
        y = T.channel_scale(x, s)
        return Tensor((y.data ** 2).sum() / 2, _parents=(y,), _backward_fn=lambda go: (go * y.data,))

    return loss_fn, [x, s]


def _gc_concat_slice(r):
    a = p(r.standard_normal((1, 2, 6)))
    b = p(r.standard_normal((1, 3, 6)))

    def loss_fn():
        y = T.slice_length(T.concat_channels([a, b]), 4)
        return Tensor((y.data ** 2).sum() / 2, _parents=(y,), _backward_fn=lambda go: (go * y.data,))

    return loss_fn, [a, b]


OPERATOR_GRADCHECKS = [
    _gc_conv, _gc_deconv, _gc_interp, _gc_aap, _gc_gap, _gc_bn_train,
    _gc_bn_eval, _gc_relu, _gc_sigmoid, _gc_linear, _gc_channel_scale,
    _gc_concat_slice,
]


def run_operator_gradcheck_trials(n_trials_per_op=10, seed=100):
    """Randomized FD trials across every operator; returns total trials."""
    trials = 0
    for op_index, factory in enumerate(OPERATOR_GRADCHECKS):
        for trial in range(n_trials_per_op):
            r = rng(seed + 977 * op_index + trial)
            loss_fn, params = factory(r)
            check_gradients(loss_fn, params, sample_per_param=4,
                            seed=seed + trial)
            trials += 1
    return trials


class TestOperatorGradients:
    def test_randomized_trials(self):
        assert run_operator_gradcheck_trials(n_trials_per_op=10) >= 100
