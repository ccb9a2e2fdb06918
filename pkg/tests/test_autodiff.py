import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shapepu import autodiff as ad
from shapepu.gradcheck import check_graph, numeric_grad, run_suite


def _t(x, grad=True):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- conv2d


def test_conv_scalar_kernel_scales():
    x = ad.Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, ad.Tensor(np.full((1, 1, 1, 1), 2.0)), ad.Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 1, 6, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_direct_loop():
    # oracle: explicit zero-padded cross-correlation
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 5, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 5, 4))
    for n in range(2):
        for o in range(3):
            for y in range(5):
                for xx in range(4):
                    ref[n, o, y, xx] = np.sum(pad[n, :, y : y + 3, xx : xx + 3] * k[o]) + b[o]
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b))
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)


def test_conv_gradient_every_element():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    w = rng.standard_normal((1, 3, 5, 5))
    xs = [_t(x), _t(k), _t(b)]
    ad.backward(ad.sum(ad.mul(ad.conv2d(*xs), w)))
    for leaf, arr in zip(xs, [x, k, b]):
        num = numeric_grad(lambda: ad.sum(ad.mul(ad.conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b)), w)).item(), arr)
        rel = np.abs(leaf.grad - num) / np.maximum(np.maximum(np.abs(leaf.grad), np.abs(num)), 1e-6)
        assert rel.max() < 1e-4


def test_conv_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(ad.Tensor(np.ones((1, 2, 4, 4))), ad.Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(ad.Tensor(np.ones((1, 1, 4, 4))), ad.Tensor(np.ones((1, 1, 2, 2))))


# ---------------------------------------------------------------- relu


def test_relu_definition():
    np.testing.assert_array_equal(ad.relu(ad.Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
    x = np.array([0.5, 3.0, 1e-3])
    np.testing.assert_array_equal(ad.relu(ad.Tensor(x)).data, x)


def test_relu_gradient_and_kink():
    x = _t([-1.0, 2.0])
    ad.backward(ad.sum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])
    # at exactly 0 the chosen subgradient is the left derivative
    z = _t([0.0])
    ad.backward(ad.sum(ad.relu(z)))
    h = 1e-3
    left = (0.0 - max(0.0, -h)) / h
    assert z.grad[0] == left == 0.0


# ---------------------------------------------------------------- softmax


def test_softmax_equal_logits_uniform():
    out = ad.softmax_channels(ad.Tensor(np.zeros((2, 4, 3, 3))))
    np.testing.assert_allclose(out.data, 0.25, rtol=1e-7)


def test_softmax_closed_form():
    logits = np.zeros((1, 2, 2, 2))
    logits[:, 1] = math.log(3.0)
    out = ad.softmax_channels(ad.Tensor(logits)).data
    np.testing.assert_allclose(out[0, 0], 0.25, rtol=1e-12)
    np.testing.assert_allclose(out[0, 1], 0.75, rtol=1e-12)


def test_softmax_large_logits_stable():
    logits = np.array([1000.0, 0.0, -1000.0]).reshape(1, 3, 1, 1)
    out = ad.softmax_channels(ad.Tensor(logits)).data
    assert np.isfinite(out).all()
    assert out[0, 0, 0, 0] == pytest.approx(1.0)


@settings(max_examples=1000, deadline=None)
@given(arrays(np.float64, (2, 4, 3, 2), elements=st.floats(-50, 50)))
def test_softmax_on_simplex(logits):
    out = ad.softmax_channels(ad.Tensor(logits)).data
    assert out.min() >= 0
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, (1, 3, 4, 4), elements=st.floats(-30, 30, width=32)))
def test_softmax_on_simplex_float32(logits):
    out = ad.softmax_channels(ad.Tensor(logits)).data
    assert out.min() >= 0
    np.testing.assert_allclose(out.sum(axis=1, dtype=np.float64), 1.0, atol=1e-6)


# ---------------------------------------------------------------- backward


def test_sum_gradient_is_ones():
    x = _t(np.random.default_rng(0).standard_normal((2, 3, 4)))
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_half_squared_norm_gradient_is_x():
    data = np.random.default_rng(1).standard_normal((3, 5))
    x = _t(data)
    ad.backward(ad.mul(ad.sum(ad.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, data, rtol=1e-12)


def test_backward_accumulates_and_resets():
    x = _t([1.0, 2.0])
    ad.backward(ad.sum(ad.mul(x, 3.0)))
    ad.backward(ad.sum(ad.mul(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        ad.backward(ad.mul(_t([1.0, 2.0]), 2.0))


def test_non_participating_leaf_has_zero_grad():
    x, y = _t([1.0, 2.0]), _t([5.0, 6.0])
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_gradient_linearity():
    rng = np.random.default_rng(3)
    data = rng.standard_normal((1, 3, 4, 4))

    def grad_of(fn):
        t = _t(data)
        ad.backward(fn(t))
        return t.grad

    f = lambda t: ad.sum(ad.mul(ad.softmax_channels(t), ad.Tensor(rng_w)))  # noqa: E731
    g = lambda t: ad.mean(ad.mul(t, t))  # noqa: E731
    rng_w = rng.standard_normal(data.shape)
    both = grad_of(lambda t: ad.add(f(t), g(t)))
    np.testing.assert_allclose(both, grad_of(f) + grad_of(g), rtol=1e-12, atol=1e-15)


def test_shared_subexpression_gradient():
    x = _t([3.0])
    y = ad.mul(x, x)
    ad.backward(ad.sum(ad.add(y, y)))
    assert x.grad[0] == pytest.approx(12.0)


def test_deep_graph_no_recursion_limit():
    x = _t([1.0])
    y = x
    for _ in range(5000):
        y = ad.add(y, 1.0)
    ad.backward(ad.sum(y))
    assert x.grad[0] == 1.0


# ---------------------------------------------------------------- error handling and misc ops


def test_non_finite_raises():
    with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
        ad.mul(ad.Tensor(np.array([1e200])), ad.Tensor(np.array([1e200])))
    with pytest.raises(ZeroDivisionError):
        ad.div(ad.Tensor(np.array([1.0])), ad.Tensor(np.array([0.0])))
    with pytest.raises(ad.NonFiniteError):
        ad.Tensor(np.array([np.nan]))


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))


def test_log_clamped():
    out = ad.log(ad.Tensor(np.array([0.0, 1.0])))
    assert out.data[0] == pytest.approx(math.log(1e-12))
    assert out.data[1] == 0.0


def test_reductions_accumulate_in_float64():
    x = ad.Tensor(np.full(100_000, 0.1, dtype=np.float32))
    exact = float(np.float32(0.1)) * x.size
    assert ad.sum(x).item() == np.float32(exact)


def test_dihedral_inverse_roundtrip():
    a = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
    for k in range(4):
        for flip in (False, True):
            b = ad.dihedral_array(a, k, flip)
            np.testing.assert_array_equal(ad.inverse_dihedral_array(b, k, flip), a)


def test_dot_and_norm_values():
    assert ad.dot(ad.Tensor(np.array([1.0, 2.0])), ad.Tensor(np.array([3.0, 4.0]))).item() == 11.0
    assert ad.l2norm(ad.Tensor(np.array([3.0, 4.0]))).item() == 5.0


def test_float32_default_precision():
    assert ad.Tensor(np.array([1, 2])).dtype == np.float32
    assert ad.Tensor(np.array([1.0], dtype=np.float32)).dtype == np.float32
    assert ad.Tensor(np.array([1.0])).dtype == np.float64


# ---------------------------------------------------------------- finite differences


def test_composite_graph_finite_difference():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 1, 5, 5))
    k1 = rng.standard_normal((2, 1, 3, 3))
    k2 = rng.standard_normal((3, 2, 1, 1))
    target = np.zeros((1, 3, 5, 5))
    target[0, rng.integers(0, 3, 25), np.arange(25) // 5, np.arange(25) % 5] = 1.0

    def build(t):
        p = ad.softmax_channels(ad.conv2d(ad.relu(ad.conv2d(t[0], t[1])), t[2]))
        return -ad.sum(ad.mul(ad.log(p), target))

    assert check_graph(build, [x, k1, k2]) < 1e-4


def test_all_ops_fifty_seeds():
    ops = {"conv2d", "conv2d_1x1", "relu", "softmax", "add", "mul", "div", "log", "sum_axis", "mean", "dot", "l2norm", "reshape_take", "dihedral"}
    results = run_suite(seeds=50, base_seed=11, only=ops)
    assert {r.name for r in results} == ops
    for r in results:
        assert r.passed, (r.name, r.worst)


def test_corrupted_gradient_detected():
    (r,) = run_suite(seeds=1, corrupt="softmax", only={"softmax"})
    assert not r.passed
