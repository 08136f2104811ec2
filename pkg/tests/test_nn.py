import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from comrec.errors import DegenerateBatchError, ShapeError, UsageError
from comrec.gradcheck import finite_diff_grad_check, gradient_errors, inert_params, split_check
from comrec.models import RecCNN
from comrec.nn import (AdamState, BatchNorm2d, Conv2d, ReLU, Sequential, adam_step,
                       batchnorm_backward, batchnorm_forward, conv2d_backward,
                       conv2d_forward, he_init, mse_loss, relu_backward, relu_forward)
from comrec.rng import Xorshift64Star


def naive_conv(x, w, b, stride):
    """Loop-by-loop padded cross-correlation."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.zeros((n, c, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x
    oh, ow = -(-h // stride), -(-wd // stride)
    out = np.zeros((n, o, oh, ow))
    for bi in range(n):
        for k in range(o):
            for yi in range(oh):
                for xi in range(ow):
                    y0, x0 = yi * stride, xi * stride
                    out[bi, k, yi, xi] = np.sum(xp[bi, :, y0:y0 + 3, x0:x0 + 3] * w[k]) + b[k]
    return out


def conv_layer(in_ch, out_ch, stride, seed=0):
    layer = Conv2d(in_ch, out_ch, stride, Xorshift64Star(seed))
    layer.bias.data[:] = np.linspace(-0.1, 0.1, out_ch)
    return layer


# ---------------------------------------------------------------- conv

def test_conv_zero_input_gives_bias(rs):
    w = rs.normal(size=(2, 1, 3, 3))
    out = conv2d_forward(np.zeros((1, 1, 3, 3)), w, np.array([0.5, -2.0]))
    assert np.all(out[0, 0] == 0.5) and np.all(out[0, 1] == -2.0)


def test_conv_stride2_shape():
    layer = Conv2d(1, 64, stride=2, rng=0)
    assert layer.forward(np.zeros((1, 1, 40, 40))).shape == (1, 64, 20, 20)


def test_conv_center_value():
    x = np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3)
    out = conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out[0, 0, 1, 1] == 45.0


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("hw", [(5, 5), (6, 7), (1, 1), (8, 3)])
def test_conv_matches_naive(rs, stride, hw):
    x = rs.normal(size=(2, 3, *hw))
    w = rs.normal(size=(4, 3, 3, 3))
    b = rs.normal(size=4)
    np.testing.assert_allclose(conv2d_forward(x, w, b, stride), naive_conv(x, w, b, stride),
                               rtol=1e-12, atol=1e-12)


@given(h=st.integers(1, 12), w=st.integers(1, 12))
@settings(max_examples=30, deadline=None)
def test_conv_shape_rule(h, w):
    x = np.ones((1, 2, h, w))
    wt = np.ones((3, 2, 3, 3))
    assert conv2d_forward(x, wt, np.zeros(3), 1).shape == (1, 3, h, w)
    assert conv2d_forward(x, wt, np.zeros(3), 2).shape == (1, 3, -(-h // 2), -(-w // 2))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_conv_backward_zero_grad(rs):
    x = rs.normal(size=(1, 2, 5, 5))
    w = rs.normal(size=(3, 2, 3, 3))
    gx, gw, gb = conv2d_backward(np.zeros((1, 3, 5, 5)), x, w)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_single_pixel_weight_grad(rs):
    x = rs.normal(size=(1, 1, 5, 5))
    g = np.zeros((1, 1, 5, 5))
    g[0, 0, 2, 2] = 1.0
    _, gw, gb = conv2d_backward(g, x, np.zeros((1, 1, 3, 3)))
    np.testing.assert_array_equal(gw[0, 0], x[0, 0, 1:4, 1:4])
    assert gb[0] == 1.0


def test_conv_backward_bias_is_channel_sum(rs):
    x = rs.normal(size=(2, 2, 4, 4))
    g = rs.normal(size=(2, 3, 4, 4))
    _, _, gb = conv2d_backward(g, x, rs.normal(size=(3, 2, 3, 3)))
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)))


def test_conv_backward_shape_mismatch(rs):
    with pytest.raises(ShapeError):
        conv2d_backward(np.zeros((1, 3, 4, 4)), np.zeros((1, 2, 5, 5)), np.zeros((3, 2, 3, 3)))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradcheck(rs, stride):
    layer = conv_layer(2, 3, stride)
    assert finite_diff_grad_check(layer, rs.normal(size=(2, 2, 5, 6))) < 1e-4


# ---------------------------------------------------------------- relu

def test_relu_forward():
    np.testing.assert_array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = np.array([0.5, 3.0])
    np.testing.assert_array_equal(relu_forward(x), x)


def test_relu_backward():
    out = relu_backward(np.array([5.0, 5.0]), np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(out, [0.0, 5.0])
    assert relu_backward(np.array([1.0]), np.array([0.0]))[0] == 0.0


def test_relu_backward_needs_cache():
    with pytest.raises(UsageError):
        relu_backward(np.ones(2), None)
    with pytest.raises(UsageError):
        ReLU().backward(np.ones((1, 1, 2, 2)))


def test_relu_gradcheck_away_from_kink(rs):
    x = rs.normal(size=(1, 2, 4, 4))
    x[np.abs(x) < 0.1] += 0.5
    assert finite_diff_grad_check(ReLU(), x) < 1e-8


# ---------------------------------------------------------------- batch norm

def test_batchnorm_normalises(rs):
    x = rs.normal(3.0, 5.0, size=(4, 3, 5, 5))
    bn = BatchNorm2d(3)
    out = bn.forward(x)
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-8)
    # eps shrinks the variance slightly below one
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1.0) < 1e-6)


def test_batchnorm_constant_channel_gives_beta():
    bn = BatchNorm2d(1)
    bn.beta.data[:] = 0.7
    out = bn.forward(np.full((2, 1, 3, 3), 4.2))
    np.testing.assert_allclose(out, 0.7)


def test_batchnorm_running_stats_update(rs):
    x = rs.normal(2.0, 3.0, size=(4, 2, 6, 6))
    bn = BatchNorm2d(2)
    bn.forward(x)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    assert np.all(bn.running_var >= 0)


def test_batchnorm_infer_uses_running_stats(rs):
    bn = BatchNorm2d(2)
    bn.running_mean[:] = [1.0, -1.0]
    bn.running_var[:] = [4.0, 9.0]
    bn.training = False
    x = rs.normal(size=(1, 2, 3, 3))
    expected = (x - bn.running_mean.reshape(1, -1, 1, 1)) / np.sqrt(
        bn.running_var.reshape(1, -1, 1, 1) + bn.eps)
    np.testing.assert_allclose(bn.forward(x), expected)


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        BatchNorm2d(1).forward(np.ones((1, 1, 1, 1)))


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradcheck(rs, training):
    bn = BatchNorm2d(3)
    bn.gamma.data[:] = [0.5, 1.5, -1.0]
    bn.beta.data[:] = [0.1, 0.0, -0.3]
    bn.running_mean[:] = [0.2, -0.1, 0.0]
    bn.running_var[:] = [1.5, 0.7, 2.0]
    bn.training = training
    assert finite_diff_grad_check(bn, rs.normal(size=(2, 3, 4, 4))) < 1e-4


def test_batchnorm_backward_functional_matches_layer(rs):
    x = rs.normal(size=(2, 2, 3, 3))
    g = rs.normal(size=x.shape)
    out, cache = batchnorm_forward(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)
    gx, gg, gb = batchnorm_backward(g, cache)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)))
    np.testing.assert_allclose(gx.sum(axis=(0, 2, 3)), 0.0, atol=1e-12)


# ---------------------------------------------------------------- loss

def test_mse_identity(rs):
    x = rs.normal(size=(2, 1, 3, 3))
    loss, g = mse_loss(x, x)
    assert loss == 0.0 and not g.any()


def test_mse_value():
    loss, g = mse_loss(np.full((1, 1, 2, 2), 3.0), np.full((1, 1, 2, 2), 1.0))
    assert loss == 8.0
    np.testing.assert_array_equal(g, 2.0)


def test_mse_gradient_finite_difference(rs):
    pred = rs.normal(size=(3, 1, 2, 2))
    target = rs.normal(size=pred.shape)
    _, g = mse_loss(pred, target)
    num = np.zeros_like(pred)
    eps = 1e-6
    for i in np.ndindex(pred.shape):
        p = pred.copy(); p[i] += eps
        m = pred.copy(); m[i] -= eps
        num[i] = (mse_loss(p, target)[0] - mse_loss(m, target)[0]) / (2 * eps)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)


def test_mse_shape_error():
    with pytest.raises(ShapeError):
        mse_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


# ---------------------------------------------------------------- adam

def test_adam_zero_grad_identity(rs):
    p = rs.normal(size=(3, 3))
    before = p.copy()
    state = AdamState.zeros_like(p)
    for _ in range(5):
        adam_step(p, np.zeros_like(p), state)
    np.testing.assert_array_equal(p, before)
    assert state.t == 5


def test_adam_first_step():
    p = np.array([1.0])
    state = AdamState.zeros_like(p)
    adam_step(p, np.array([1.0]), state)
    np.testing.assert_allclose(state.m, 0.1)
    np.testing.assert_allclose(state.v, 0.001)
    np.testing.assert_allclose(p, 1.0 - 0.001 / (1.0 + 1e-8), rtol=0, atol=1e-15)


def test_adam_symmetry(rs):
    a = np.array([0.3, 0.3])
    state = AdamState.zeros_like(a)
    for _ in range(20):
        adam_step(a, np.full(2, rs.normal()), state)
        assert a[0] == a[1]


def test_adam_shape_mismatch():
    p = np.zeros(3)
    with pytest.raises(ShapeError):
        adam_step(p, np.zeros(4), AdamState.zeros_like(p))


# ---------------------------------------------------------------- init

def test_he_init_deterministic():
    a = he_init((8, 4, 3, 3), 7)
    b = he_init((8, 4, 3, 3), 7)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, he_init((8, 4, 3, 3), 8))


def test_he_init_variance():
    w = he_init((100_000, 1, 3, 3), 3)[:, 0, 0, 0]
    assert abs(w.var() / (2 / 9) - 1) < 0.05
    assert abs(w.mean()) < 0.01


def test_he_init_sample_count_variance():
    samples = he_init((1, 100_000, 1, 1), 11).ravel() * np.sqrt(100_000 / 9)
    # rescaled to fan_in = 9
    assert abs(samples.var() / (2 / 9) - 1) < 0.05


def test_conv_bias_starts_at_zero():
    assert not Conv2d(3, 5, rng=1).bias.data.any()


# ---------------------------------------------------------------- composites

def test_conv_relu_mse_stack(rs):
    net = Sequential([conv_layer(2, 4, 1, 1), ReLU(), conv_layer(4, 2, 1, 2)])
    assert finite_diff_grad_check(net, rs.normal(size=(2, 2, 5, 5))) < 1e-4


def test_residual_stack_gradcheck(rs):
    net = Sequential([conv_layer(1, 3, 1, 3), BatchNorm2d(3), ReLU(), conv_layer(3, 1, 1, 4)],
                     residual=True)
    rel, inert = split_check(net, rs.normal(size=(2, 1, 5, 5)))
    assert rel < 1e-4 and inert < 1e-8


def test_inert_params_detection():
    net = Sequential([conv_layer(1, 3, 1), BatchNorm2d(3), ReLU(), conv_layer(3, 1, 1)])
    assert inert_params(net) == ["param1"]
    net.eval()
    assert inert_params(net) == []


def test_inert_bias_gradient_is_zero(rs):
    net = Sequential([conv_layer(1, 3, 1), BatchNorm2d(3), ReLU(), conv_layer(3, 1, 1)])
    errs = gradient_errors(net, rs.normal(size=(2, 1, 5, 5)))
    assert np.abs(net.layers[0].bias.grad).max() < 1e-12
    assert max(v for k, v in errs.items() if k != "param1") < 1e-4


def test_reccnn_gradcheck_20_layers(rs):
    net = RecCNN(1, width=4, rng=5)
    rel, inert = split_check(net, rs.uniform(size=(1, 1, 8, 8)), max_coords=6, seed=2)
    assert rel < 1e-3 and inert < 1e-8


def test_gradcheck_detects_wrong_backward(rs):
    layer = conv_layer(1, 2, 1)
    original = layer.backward
    layer.backward = lambda g, param_grads=True: 1.1 * original(g, param_grads)
    assert finite_diff_grad_check(layer, rs.normal(size=(1, 1, 4, 4))) > 1e-2


def test_forward_is_deterministic(rs):
    x = rs.normal(size=(2, 1, 9, 9))
    a = RecCNN(1, width=4, rng=3).forward(x)
    b = RecCNN(1, width=4, rng=3).forward(x)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(a))
