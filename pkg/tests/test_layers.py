import numpy as np
import pytest

from floodseg import layers as L
from floodseg.errors import ShapeError

import gradcheck
from oracles import naive_conv2d, naive_conv_transpose2d, naive_maxpool

GRAD_TOL = 1e-4


@pytest.mark.parametrize("name,check", gradcheck.layer_cases(seed=0), ids=lambda v: v if isinstance(v, str) else "")
def test_backward_matches_finite_differences(name, check):
    assert check() < GRAD_TOL


def random_conv_case(rng):
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    stride, dilation = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    padding = int(rng.integers(0, 3))
    eff = dilation * (k - 1) + 1
    h = max(1, eff - 2 * padding) + int(rng.integers(0, 6))
    w = max(1, eff - 2 * padding) + int(rng.integers(0, 6))
    x = rng.standard_normal((c_in, h, w))
    wt = rng.standard_normal((c_out, c_in, k, k))
    b = rng.standard_normal(c_out)
    return x, wt, b, L.ConvSpec(c_in, c_out, (k, k), stride, dilation, padding)


def test_conv2d_matches_nested_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x, w, b, spec = random_conv_case(rng)
        got = L.conv2d(x, w, b, spec)
        want = naive_conv2d(x, w, b, spec.stride, spec.dilation, spec.padding)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-10


def test_conv2d_batch_equals_per_image():
    rng = np.random.default_rng(2)
    x, w, b, spec = random_conv_case(rng)
    batch = np.stack([x, 2 * x, -x])
    out = L.conv2d(batch, w, b, spec)
    for i in range(3):
        np.testing.assert_allclose(out[i], L.conv2d(batch[i], w, b, spec), atol=1e-12)


def test_conv2d_examples():
    x = np.random.default_rng(0).standard_normal((1, 5, 5))
    ident = L.ConvSpec(1, 1, (1, 1))
    assert np.array_equal(L.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1), ident), x)

    out = L.conv2d(np.ones((1, 5, 5)), np.ones((1, 1, 3, 3)), np.zeros(1), L.ConvSpec(1, 1, dilation=2))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 9

    for d in (1, 2, 4):
        spec = L.ConvSpec(1, 1, dilation=d, padding=d)
        assert L.conv2d(np.ones((1, 25, 25)), np.ones((1, 1, 3, 3)), np.zeros(1), spec).shape == (1, 25, 25)


def test_conv2d_backward_examples():
    x = np.random.default_rng(0).standard_normal((1, 6, 6))
    w = np.random.default_rng(1).standard_normal((1, 1, 3, 3))
    spec = L.ConvSpec(1, 1)
    g = L.conv2d_backward(x, w, spec, np.ones((1, 4, 4)))
    assert g.d_bias.tolist() == [16]
    g = L.conv2d_backward(x, w, spec, np.zeros((1, 4, 4)))
    assert not g.d_weights.any() and not g.d_bias.any() and not g.d_input.any()


def test_conv2d_shape_errors():
    spec = L.ConvSpec(2, 1)
    with pytest.raises(ShapeError):
        L.conv2d(np.ones((3, 5, 5)), np.ones((1, 2, 3, 3)), np.zeros(1), spec)
    with pytest.raises(ShapeError):
        L.conv2d(np.ones((2, 5, 5)), np.ones((1, 2, 2, 2)), np.zeros(1), spec)
    with pytest.raises(ShapeError):
        L.conv2d(np.ones((2, 4, 4)), np.ones((1, 2, 3, 3)), np.zeros(1), L.ConvSpec(2, 1, dilation=2))
    with pytest.raises(ShapeError):
        L.ConvSpec(0, 1)


def test_conv_transpose_matches_scatter_oracle():
    rng = np.random.default_rng(3)
    for _ in range(30):
        c_in, c_out, k, s = (int(v) for v in rng.integers(1, 4, size=4))
        op = int(rng.integers(0, s))
        x = rng.standard_normal((c_in, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
        w = rng.standard_normal((c_in, c_out, k, k))
        b = rng.standard_normal(c_out)
        got = L.conv_transpose2d(x, w, b, s, op)
        want = naive_conv_transpose2d(x, w, b, s, op)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-10


def test_conv_transpose_examples():
    x = np.random.default_rng(0).standard_normal((1, 3, 3))
    assert np.array_equal(L.conv_transpose2d(x, np.ones((1, 1, 1, 1)), np.zeros(1), 1), x)
    out = L.conv_transpose2d(np.ones((1, 2, 2)), np.ones((1, 1, 2, 2)), np.zeros(1), 2)
    assert out.shape == (1, 4, 4) and np.all(out == 1)
    assert L.conv_transpose_output_size(12, 12, (2, 2), 2, 1) == (25, 25)
    with pytest.raises(ShapeError):
        L.conv_transpose2d(x, np.ones((1, 1, 2, 2)), np.zeros(1), 2, output_padding=2)


def adjoint_gap(rng):
    c_in, c_out, k, s = (int(v) for v in rng.integers(1, 4, size=4))
    op = int(rng.integers(0, s))
    hy, wy = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    h, w = (hy - 1) * s + k + op, (wy - 1) * s + k + op
    x = rng.standard_normal((c_in, h, w))
    y = rng.standard_normal((c_out, hy, wy))
    wt = rng.standard_normal((c_out, c_in, k, k))
    cx = L.conv2d(x, wt, np.zeros(c_out), L.ConvSpec(c_in, c_out, (k, k), stride=s))
    ty = L.conv_transpose2d(y, wt, np.zeros(c_in), s, op)
    lhs, rhs = float(np.sum(cx * y)), float(np.sum(x * ty))
    return abs(lhs - rhs) / max(1.0, abs(lhs))


def test_adjointness():
    rng = np.random.default_rng(4)
    assert max(adjoint_gap(rng) for _ in range(50)) < 1e-8


def test_maxpool_examples():
    out, idx = L.maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    assert out.tolist() == [[[4.0]]] and idx.tolist() == [[[3]]]
    out, idx = L.maxpool2d(np.full((2, 4, 4), 7.0), 2, 2)
    assert np.all(out == 7)
    # first cell of each window in scan order
    assert idx[0].tolist() == [[0, 2], [8, 10]]


def test_maxpool_matches_oracle_and_routes_once():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 8, 8))
    out, idx = L.maxpool2d(x, 2, 2)
    assert np.array_equal(out, naive_maxpool(x, 2, 2))
    up = rng.standard_normal(out.shape)
    dx = L.maxpool2d_backward(x.shape, idx, up)
    # disjoint windows: each upstream value lands on exactly one input cell
    assert np.count_nonzero(dx) == up.size
    assert np.isclose(dx.sum(), up.sum())
    batch = np.stack([x, -x])
    bout, bidx = L.maxpool2d(batch, 2, 2)
    assert np.array_equal(bout[1], L.maxpool2d(-x, 2, 2)[0])


def test_relu_examples():
    assert L.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    x = np.array([0.5, 3.0])
    assert np.array_equal(L.relu(x), x)
    assert L.relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 7.0])).tolist() == [0, 7]
    assert L.relu_backward(np.array([0.0]), np.array([1.0])).tolist() == [0]


def test_softmax_xent_examples():
    loss, _ = L.softmax_xent(np.zeros((2, 3, 3)), np.zeros((3, 3), dtype=int))
    assert np.isclose(loss, np.log(2))
    logits = np.zeros((2, 2, 2))
    logits[1] = 50.0
    loss, g = L.softmax_xent(logits, np.ones((2, 2), dtype=int))
    assert loss < 1e-20 and np.abs(g).max() < 1e-20
    p = L.softmax(np.random.default_rng(0).standard_normal((2, 4, 4)))
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        L.softmax_xent(np.zeros((2, 2, 2)), np.full((2, 2), 2))
