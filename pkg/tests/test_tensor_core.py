import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fd import numerical_grad, rel_error
from rinkkp.tensor_core import (
    BatchNorm2d,
    Conv2d,
    ParamTensor,
    ReLU,
    ShapeError,
    Sigmoid,
    UpsampleBilinear,
    concat_channels,
    conv2d_forward,
    load_tensor,
    relu,
    save_tensor,
    sigmoid,
    split_channels,
    upsample_bilinear,
)


def _weighted(layer_forward, weights):
    return lambda: float(np.sum(layer_forward() * weights))


# ----------------------------------------------------------------- conv2d


def test_conv_box_sum():
    out, _ = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), None, 1, 1)
    assert out[0, 0, 1, 1] == 9.0
    assert out[0, 0, 0, 0] == 4.0
    assert out[0, 0, 2, 2] == 4.0
    assert out[0, 0, 0, 1] == 6.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 7))
    out, _ = conv2d_forward(x, np.ones((1, 1, 1, 1)), None)
    np.testing.assert_array_equal(out, x)


def test_conv_identity_multichannel():
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
    out, _ = conv2d_forward(x, np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="channel"):
        conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), None)


def test_conv_output_shape_stride():
    out, _ = conv2d_forward(np.zeros((2, 3, 8, 8)), np.zeros((5, 3, 3, 3)), None, stride=2, padding=1)
    assert out.shape == (2, 5, 4, 4)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out, _ = conv2d_forward(x, k, b, stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv_gradcheck(stride, padding):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 8, 8))
    conv = Conv2d(ParamTensor(rng.normal(size=(4, 3, 3, 3))), ParamTensor(rng.normal(size=4)), stride, padding)
    out = conv.forward(x)
    weights = rng.normal(size=out.shape)
    dx = conv.backward(weights)
    f = _weighted(lambda: conv.forward(x), weights)
    assert rel_error(dx, numerical_grad(f, x)) < 1e-6
    assert rel_error(conv.kernel.grad, numerical_grad(f, conv.kernel.value)) < 1e-6
    assert rel_error(conv.bias.grad, numerical_grad(f, conv.bias.value)) < 1e-6


def test_conv_grad_accumulates():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 1, 4, 4))
    conv = Conv2d(ParamTensor(rng.normal(size=(1, 1, 3, 3))), None, 1, 1)
    conv.forward(x)
    conv.backward(np.ones((1, 1, 4, 4)))
    first = conv.kernel.grad.copy()
    conv.forward(x)
    conv.backward(np.ones((1, 1, 4, 4)))
    np.testing.assert_allclose(conv.kernel.grad, 2 * first)
    conv.kernel.zero_grad()
    assert not conv.kernel.grad.any()


# ------------------------------------------------------------- batch norm


def _bn(c, rng=None):
    if rng is None:
        return BatchNorm2d(ParamTensor(np.ones(c)), ParamTensor(np.zeros(c)))
    return BatchNorm2d(ParamTensor(rng.normal(size=c)), ParamTensor(rng.normal(size=c)))


def test_bn_constant_channel_gives_beta():
    bn = BatchNorm2d(ParamTensor(np.full(2, 3.0)), ParamTensor(np.array([0.5, -1.0])))
    out = bn.forward(np.full((2, 2, 3, 3), 7.0))
    np.testing.assert_allclose(out[:, 0], 0.5)
    np.testing.assert_allclose(out[:, 1], -1.0)


def test_bn_standardized_input_unchanged():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = _bn(3).forward(x)
    # only epsilon separates the two
    np.testing.assert_allclose(out, x, atol=1e-4)
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), atol=1e-12)


def test_bn_running_stats_and_eval():
    rng = np.random.default_rng(6)
    bn = _bn(2)
    x = rng.normal(3.0, 2.0, size=(8, 2, 4, 4))
    bn.forward(x)
    n = 8 * 16
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    bn.training = False
    out = bn.forward(x)
    expect = (x - bn.running_mean.reshape(1, 2, 1, 1)) / np.sqrt(bn.running_var.reshape(1, 2, 1, 1) + 1e-5)
    np.testing.assert_allclose(out, expect)


def test_bn_rejects_degenerate_batch():
    with pytest.raises(ShapeError):
        _bn(1).forward(np.ones((1, 1, 1, 1)))


@pytest.mark.parametrize("training", [True, False])
def test_bn_gradcheck(training):
    rng = np.random.default_rng(7)
    bn = _bn(3, rng)
    bn.running_mean = rng.normal(size=3)
    bn.running_var = rng.uniform(0.5, 2.0, size=3)
    bn.training = training
    x = rng.normal(size=(3, 3, 4, 4))
    out = bn.forward(x)
    weights = rng.normal(size=out.shape)
    dx = bn.backward(weights)
    f = _weighted(lambda: bn.forward(x), weights)
    assert rel_error(dx, numerical_grad(f, x)) < 1e-5
    assert rel_error(bn.gamma.grad, numerical_grad(f, bn.gamma.value)) < 1e-5
    assert rel_error(bn.beta.grad, numerical_grad(f, bn.beta.value)) < 1e-5


# ------------------------------------------------------------ activations


def test_activation_values():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    np.testing.assert_array_equal(relu(np.array([-3.0, 3.0])), [0.0, 3.0])


def test_sigmoid_extremes_finite():
    s = sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(s))
    assert s[1] == 1.0


def test_sigmoid_gradient_at_zero():
    layer = Sigmoid()
    layer.forward(np.zeros(1))
    analytic = layer.backward(np.ones(1))
    x = np.zeros(1)
    numeric = numerical_grad(lambda: float(sigmoid(x)[0]), x)
    assert analytic[0] == 0.25
    assert abs(numeric[0] - 0.25) < 1e-10


@pytest.mark.parametrize("layer_cls", [ReLU, Sigmoid])
def test_activation_gradcheck(layer_cls):
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the ReLU kink
    layer = layer_cls()
    weights = rng.normal(size=x.shape)
    layer.forward(x)
    dx = layer.backward(weights)
    assert rel_error(dx, numerical_grad(_weighted(lambda: layer_cls().forward(x), weights), x)) < 1e-6


# -------------------------------------------------------------- upsample


def test_upsample_constant():
    out = upsample_bilinear(np.full((1, 2, 3, 5), 4.25), 6, 10)
    np.testing.assert_array_equal(out, 4.25)


def test_upsample_half_pixel_convention():
    out = upsample_bilinear(np.array([[[[0.0, 1.0]]]]), 1, 4)
    np.testing.assert_allclose(out.ravel(), [0.0, 0.25, 0.75, 1.0], atol=1e-15)


def test_upsample_same_size_is_copy():
    x = np.random.default_rng(9).normal(size=(1, 1, 3, 3))
    np.testing.assert_array_equal(upsample_bilinear(x, 3, 3), x)


def test_upsample_rejects_downsampling():
    with pytest.raises(ShapeError):
        upsample_bilinear(np.zeros((1, 1, 4, 4)), 2, 8)


def test_upsample_gradcheck():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 2, 3, 4))
    up = UpsampleBilinear(7, 8)
    weights = rng.normal(size=(2, 2, 7, 8))
    up.forward(x)
    dx = up.backward(weights)
    assert rel_error(dx, numerical_grad(_weighted(lambda: up.forward(x), weights), x)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (1, 1, 3, 4), elements=st.floats(-1e3, 1e3)),
    st.integers(3, 9),
    st.integers(4, 11),
)
def test_upsample_stays_in_range(x, oh, ow):
    out = upsample_bilinear(x, oh, ow)
    span = 1e-9 * max(1.0, np.abs(x).max())
    assert out.min() >= x.min() - span
    assert out.max() <= x.max() + span


# ---------------------------------------------------------------- concat


def test_concat_order_and_shape():
    a = np.zeros((2, 2, 3, 3))
    b = np.ones((2, 3, 3, 3))
    out, sizes = concat_channels(a, b)
    assert out.shape == (2, 5, 3, 3)
    assert sizes == [2, 3]
    assert not out[:, :2].any() and out[:, 2:].all()


def test_concat_single_is_identity():
    a = np.random.default_rng(11).normal(size=(1, 2, 2, 2))
    out, _ = concat_channels(a)
    np.testing.assert_array_equal(out, a)


def test_concat_rejects_mismatch():
    with pytest.raises(ShapeError):
        concat_channels(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))
    with pytest.raises(ShapeError):
        concat_channels(np.zeros((1, 1, 2, 2)), np.zeros((2, 1, 2, 2)))


def test_concat_backward_split_exact():
    rng = np.random.default_rng(12)
    up = rng.normal(size=(2, 6, 3, 3))
    parts = split_channels(up, [1, 2, 3])
    np.testing.assert_array_equal(parts[0], up[:, :1])
    np.testing.assert_array_equal(parts[1], up[:, 1:3])
    np.testing.assert_array_equal(parts[2], up[:, 3:])
    np.testing.assert_array_equal(np.concatenate(parts, axis=1), up)


# ------------------------------------------------------------------ PTSR1


def test_ptsr_round_trip_and_layout(tmp_path):
    a = np.arange(6, dtype=np.float64).reshape(2, 3) / 7
    path = tmp_path / "t.ptsr"
    save_tensor(path, a)
    raw = path.read_bytes()
    assert raw[:6] == b"PTSR1\0"
    assert struct.unpack_from("<I", raw, 6) == (2,)
    assert struct.unpack_from("<2I", raw, 10) == (2, 3)
    assert struct.unpack_from("<d", raw, 18)[0] == a[0, 0]
    assert len(raw) == 18 + 6 * 8
    np.testing.assert_array_equal(load_tensor(path), a)


def test_ptsr_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ptsr"
    path.write_bytes(b"NOPE00" + b"\0" * 12)
    with pytest.raises(ValueError):
        load_tensor(path)


def test_param_tensor_grad_starts_zero():
    p = ParamTensor(np.ones((2, 2)))
    assert p.grad.shape == p.value.shape
    assert not p.grad.any()
