import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from equistruct.layers import (
    BasisConv,
    BasisLinear,
    GlobalMaxPool,
    PlainConv,
    PlainLinear,
    ReLU,
    conv_output_size,
    init_layer,
    init_std,
)
from equistruct.nn import _layer_pair
from equistruct.symmetrizer import build_basis
from equistruct.verify import finite_difference_grads, relative_error


def grad_check(module, x, seed=0):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal(module.forward(x).shape)

    def loss():
        return float((module.forward(x) * target).sum())

    loss()
    dx = module.backward(target)
    analytic = [g.copy() for g in module.grads]
    numeric = finite_difference_grads(module.params, loss)
    for a, n in zip(analytic, numeric):
        assert relative_error(a, n) < 1e-6
    # input gradient
    num_dx = finite_difference_grads([x], loss)[0]
    assert relative_error(dx, num_dx) < 1e-6


def conv_reference(x, w, stride):
    """Direct loops: x [B, C, H, W], w [O, C, kh, kw]."""
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((b, o, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = x[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("bckl,ockl->bo", patch, w)
    return out


def test_basis_linear_gradients():
    rng = np.random.default_rng(0)
    layer = init_layer(build_basis(*_layer_pair("cartpole", "hidden")), 3, 2, "xavier", rng)
    grad_check(layer, rng.standard_normal((4, 3, 2)))


def test_basis_conv_gradients_with_stride():
    rng = np.random.default_rng(1)
    layer = init_layer(build_basis(*_layer_pair("gridworld", "conv1")), 1, 2, "he", rng, stride=2)
    grad_check(layer, rng.standard_normal((2, 1, 1, 11, 11)))


def test_plain_layer_gradients():
    rng = np.random.default_rng(2)
    grad_check(PlainLinear(3, 4, rng.standard_normal((4, 3)), rng.standard_normal(4)), rng.standard_normal((5, 3)))
    conv = PlainConv(2, 3, (3, 3), stride=2, padding=1, weight=rng.standard_normal((3, 2, 3, 3)),
                     bias=rng.standard_normal(3))
    grad_check(conv, rng.standard_normal((2, 2, 7, 7)))


def test_pool_and_relu_gradients():
    rng = np.random.default_rng(3)
    grad_check(GlobalMaxPool(), rng.standard_normal((2, 3, 4, 4)))
    x = rng.standard_normal((3, 5))
    x[np.abs(x) < 0.1] = 0.5  # keep away from the kink
    grad_check(ReLU(), x)


def test_plain_conv_matches_direct_loops():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, 5, 5))
    conv = PlainConv(3, 4, (5, 5), stride=2, weight=w)
    np.testing.assert_allclose(conv.forward(x), conv_reference(x, w, 2), atol=1e-12)


def test_basis_conv_realizes_its_weight():
    rng = np.random.default_rng(5)
    layer = init_layer(build_basis(*_layer_pair("gridworld", "conv2")), 2, 3, "he", rng)
    x = rng.standard_normal((2, 2, 4, 6, 6))
    W = layer.weight()  # [co, ro, ci, ri*25 + 1]
    body = W[..., :-1].reshape(3 * 4, 2 * 4, 5, 5)
    bias = W[..., -1].sum(axis=2).reshape(-1)
    ref = conv_reference(x.reshape(2, 8, 6, 6), body, 1) + bias[None, :, None, None]
    np.testing.assert_allclose(layer.forward(x).reshape(2, 12, 2, 2), ref, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_basis_layers_are_equivariant(seed):
    rng = np.random.default_rng(seed)
    for name, shape_in in (("conv1", (3, 1, 1, 9, 9)), ("conv2", (3, 2, 4, 5, 5)), ("hidden", (3, 2, 4))):
        pair, shape = _layer_pair("gridworld", name)
        c_in = shape_in[1]
        layer = init_layer(build_basis(pair, shape), c_in, 2, "he", rng)
        z = rng.standard_normal(shape_in)
        y = layer.forward(z)
        for g in range(4):
            if name == "conv1":
                zg = np.rot90(z, k=-g, axes=(-2, -1))
            else:
                zg = pair.rep_in.act(g, z.reshape(3, c_in, -1)).reshape(z.shape) if name == "conv2" \
                    else pair.rep_in.act(g, z)
            yg = layer.forward(zg)
            if name == "hidden":
                expect = pair.rep_out.act(g, y)
            else:
                # output feature maps: regular fiber roll plus spatial rotation (square outputs only)
                expect = np.roll(np.rot90(y, k=-g, axes=(-2, -1)), g, axis=2)
            np.testing.assert_allclose(yg, expect, atol=1e-10)


def test_init_scales():
    assert init_std("xavier", 10, 30) == pytest.approx(np.sqrt(2 / 40))
    assert init_std("he", 8, 1) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        init_std("lecun", 1, 1)
    assert conv_output_size(21, 7, 2, 0) == 8
    assert conv_output_size(8, 5, 1, 0) == 4


def test_shape_errors():
    layer = init_layer(build_basis(*_layer_pair("cartpole", "first")), 1, 3)
    with pytest.raises(ValueError):
        layer.forward(np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        BasisConv(build_basis(*_layer_pair("cartpole", "first")), 1, 1)
    with pytest.raises(ValueError):
        BasisLinear(layer.basis, 1, 3, np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        init_layer(build_basis(*_layer_pair("gridworld", "conv1")), 1, 2).forward(np.zeros((1, 1, 1, 5, 5)))
