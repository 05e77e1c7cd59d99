import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dissectpoison.errors import ConfigurationError, InvalidArgumentError
from dissectpoison.models import ModelSpec
from dissectpoison.tensor import (
    Conv2d,
    Flatten,
    Linear,
    MaxPool2d,
    ReLU,
    bilinear_upsample,
    forward_collect,
    grad_wrt_input,
    run_layers,
    upsample_adjoint,
)

seeds = st.integers(0, 2**32 - 1)


def _one(op, x):
    return run_layers([op], x)[op.name]


def _model(layers, shape, classes=2):
    return ModelSpec(tuple(layers), tuple(l.name for l in layers if isinstance(l, Conv2d))[:1], classes, shape)


# ---- forward kernels against scalar loops


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_conv_matches_loop(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(k, 8)), int(rng.integers(k, 8))
    x = rng.normal(size=(2, cin, h, w)).astype(np.float32)
    op = Conv2d("c", rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout), stride, pad)
    expected = oracles.conv2d(x, op.weight, op.bias, stride, pad)
    np.testing.assert_allclose(_one(op, x), expected, atol=1e-5, rtol=0)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_relu_pool_flatten_linear_match_loops(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 6, 8)).astype(np.float32)
    np.testing.assert_allclose(_one(ReLU("r"), x), oracles.relu(x), atol=1e-5, rtol=0)
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    np.testing.assert_allclose(_one(MaxPool2d("p", k, s), x), oracles.maxpool(x, k, s), atol=1e-5, rtol=0)
    flat = _one(Flatten("f"), x)
    np.testing.assert_array_equal(flat, oracles.flatten(x))
    lin = Linear("l", rng.normal(size=(5, flat.shape[1])), rng.normal(size=5))
    np.testing.assert_allclose(_one(lin, flat), oracles.linear(flat, lin.weight, lin.bias), atol=1e-5, rtol=0)


def test_seed7_two_layer_net_matches_hand_evaluation():
    rng = np.random.default_rng(7)
    w1, b1 = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    w2, b2 = rng.normal(size=(3, 4 * 4 * 4)), rng.normal(size=3)
    layers = [Conv2d("conv", w1, b1, 1, 1), ReLU("relu"), MaxPool2d("pool"), Flatten("flat"), Linear("head", w2, b2)]
    model = _model(layers, (3, 8, 8), classes=3)
    x = rng.uniform(size=(2, 3, 8, 8)).astype(np.float32)
    acts, logits, _ = forward_collect(model, x, layers=("conv", "pool"))

    conv = oracles.conv2d(x, np.float32(w1), np.float32(b1), 1, 1)
    pooled = oracles.maxpool(oracles.relu(conv))
    ref = oracles.linear(oracles.flatten(pooled), np.float32(w2), np.float32(b2))
    np.testing.assert_allclose(acts["conv"], conv, atol=1e-5)
    np.testing.assert_allclose(acts["pool"], pooled, atol=1e-5)
    np.testing.assert_allclose(logits, ref, atol=1e-4)


def test_identity_conv_passes_ones_through():
    op = Conv2d("id", np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(_one(op, np.ones((1, 1, 2, 2), np.float32)), np.ones((1, 1, 2, 2)))


def test_relu_zeroes_negative_entry():
    out = _one(ReLU("r"), np.array([[[[-1.0, 2.0]]]], np.float32))
    assert out[0, 0, 0, 0] == 0 and out[0, 0, 0, 1] == 2


def test_forward_is_bitwise_pure():
    rng = np.random.default_rng(0)
    layers = [Conv2d("c", rng.normal(size=(2, 3, 3, 3)), np.zeros(2), 1, 1), Flatten("f"),
              Linear("h", rng.normal(size=(2, 2 * 36)), np.zeros(2))]
    model = _model(layers, (3, 6, 6))
    x = rng.uniform(size=(3, 3, 6, 6)).astype(np.float32)
    a = forward_collect(model, x, ("c",))
    b = forward_collect(model, x.copy(), ("c",))
    assert a[0]["c"].tobytes() == b[0]["c"].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_forward_rejects_wrong_input_shape():
    layers = [Conv2d("c", np.ones((2, 3, 1, 1)), np.zeros(2)), Flatten("f"), Linear("h", np.ones((2, 32)), np.zeros(2))]
    model = _model(layers, (3, 4, 4))
    with pytest.raises(ConfigurationError):
        forward_collect(model, np.zeros((1, 3, 5, 5), np.float32))
    with pytest.raises(ConfigurationError):
        forward_collect(model, np.zeros((1, 3, 4, 4), np.float32), layers=("nope",))


# ---- bilinear upsampling


def test_upsample_same_size_is_identity():
    x = np.random.default_rng(1).normal(size=(2, 5, 4)).astype(np.float32)
    assert bilinear_upsample(x, 5, 4).tobytes() == x.tobytes()


def test_upsample_constant_map():
    out = bilinear_upsample(np.full((1, 3, 2), 3.5, np.float32), 11, 7)
    assert np.all(out == 3.5)


def test_upsample_2x2_centre_is_average():
    out = bilinear_upsample(np.array([[0.0, 1.0], [2.0, 3.0]], np.float32), 3, 3)
    assert out[1, 1] == 1.5
    assert (out[0, 0], out[0, 2], out[2, 0], out[2, 2]) == (0, 1, 2, 3)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_upsample_matches_formula_and_keeps_range(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 6, size=2)
    th, tw = h + rng.integers(0, 20), w + rng.integers(0, 20)
    grid = rng.normal(size=(h, w)).astype(np.float32)
    out = bilinear_upsample(grid, th, tw)
    np.testing.assert_allclose(out, oracles.bilinear(grid.astype(np.float64), th, tw), atol=1e-6)
    assert out.min() >= grid.min() and out.max() <= grid.max()


def test_upsample_rejects_shrinking():
    with pytest.raises(InvalidArgumentError):
        bilinear_upsample(np.zeros((4, 4), np.float32), 3, 8)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_upsample_adjoint_is_transpose(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 6, size=2)
    th, tw = h + rng.integers(0, 10), w + rng.integers(0, 10)
    a = rng.normal(size=(h, w))
    b = rng.normal(size=(th, tw))
    up = oracles.bilinear(a, th, tw)
    assert np.sum(up * b) == pytest.approx(np.sum(a * upsample_adjoint(b, h, w)), rel=1e-10, abs=1e-10)


# ---- gradients


def _sum_of(layer):
    def objective(outputs, logits):
        out = outputs[layer]
        return float(out.sum()), {layer: np.ones(out.shape)}

    return objective


def test_gradient_of_identity_conv_sum_is_ones():
    layers = [Conv2d("c", np.eye(3).reshape(3, 3, 1, 1), np.zeros(3)), Flatten("f"),
              Linear("h", np.ones((2, 48)), np.zeros(2))]
    model = _model(layers, (3, 4, 4))
    x = np.random.default_rng(2).uniform(size=(2, 3, 4, 4)).astype(np.float32)
    _, _, tape = forward_collect(model, x)
    assert np.all(grad_wrt_input(_sum_of("c"), x, tape) == 1)


def test_dead_relu_gives_zero_gradient():
    layers = [ReLU("r"), Flatten("f"), Linear("h", np.ones((2, 12)), np.zeros(2))]
    model = ModelSpec(tuple(layers), (), 2, (3, 2, 2))
    x = -np.random.default_rng(3).uniform(0.1, 1, size=(1, 3, 2, 2)).astype(np.float32)
    _, _, tape = forward_collect(model, x)
    assert np.all(grad_wrt_input(_sum_of("r"), x, tape) == 0)


def test_pool_tie_routes_gradient_to_first_maximum():
    layers = [MaxPool2d("p", 2, 2), Flatten("f"), Linear("h", np.ones((2, 3)), np.zeros(2))]
    model = ModelSpec(tuple(layers), (), 2, (3, 2, 2))
    x = np.ones((1, 3, 2, 2), np.float32)
    _, _, tape = forward_collect(model, x)
    g = grad_wrt_input(_sum_of("p"), x, tape)
    expected = np.zeros((1, 3, 2, 2))
    expected[..., 0, 0] = 1
    np.testing.assert_array_equal(g, expected)


def test_tape_from_other_batch_is_rejected():
    layers = [ReLU("r"), Flatten("f"), Linear("h", np.ones((2, 12)), np.zeros(2))]
    model = ModelSpec(tuple(layers), (), 2, (3, 2, 2))
    x = np.zeros((1, 3, 2, 2), np.float32)
    _, _, tape = forward_collect(model, x)
    with pytest.raises(InvalidArgumentError):
        grad_wrt_input(_sum_of("r"), x + 1, tape)


def test_gradient_through_logits_matches_weights():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(2, 12))
    layers = [Flatten("f"), Linear("h", w, np.zeros(2))]
    model = ModelSpec(tuple(layers), (), 2, (3, 2, 2))
    x = rng.uniform(size=(1, 3, 2, 2)).astype(np.float32)
    _, _, tape = forward_collect(model, x)

    def objective(outputs, logits):
        return float(logits[0, 1]), {"logits": np.array([[0.0, 1.0]])}

    g = grad_wrt_input(objective, x, tape)
    np.testing.assert_allclose(g.reshape(-1), np.float32(w[1]), rtol=1e-6)
