import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layerscope import tensor as T


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(np.ones((2, 3)), np.ones((4, 5)))


def test_softmax_masked_entries_are_exact_zero():
    p = T.softmax_rows(np.array([[1.0, 2.0, 3.0]]), np.array([[True, False, True]]))
    assert p[0, 1] == 0.0
    assert math.isclose(p.sum(), 1.0)


def test_softmax_large_logits_stable():
    p = T.softmax_rows(np.array([[1000.0, 1000.0]]))
    np.testing.assert_allclose(p, [[0.5, 0.5]])


finite = st.floats(-30, 30, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = T.softmax_rows(x)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-5, 5)), st.floats(0.1, 3.0))
def test_layer_norm_zero_mean_unit_variance(x, scale):
    x = x + np.arange(6) * scale  # avoid constant rows
    y = T.layer_norm(x, np.ones(6), np.zeros(6))
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    var = x.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + T.LN_EPS), rtol=1e-9)


def test_gelu_reference_values():
    # tanh approximation evaluated by hand
    for x in (-2.0, -0.5, 0.0, 0.7, 3.0):
        ref = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        assert math.isclose(float(T.gelu(np.array(x))), ref, rel_tol=1e-12, abs_tol=1e-15)


def test_cross_entropy_values():
    assert math.isclose(T.cross_entropy([0.25, 0.75], 1), -math.log(0.75))
    assert T.cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    with pytest.raises(IndexError):
        T.cross_entropy([0.5, 0.5], 2)


@pytest.mark.parametrize("name", ["layer_norm", "gelu", "softmax", "softmax_ce"])
def test_kernel_backward_matches_central_differences(name, rng):
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))
    if name == "layer_norm":
        g, b = rng.normal(size=5), rng.normal(size=5)
        f = lambda: float(np.sum(w * T.layer_norm(x, g, b)))
        _, cache = T.layer_norm_forward(x, g, b)
        dx, dg, db = T.layer_norm_backward(w, cache)
        err = T.grad_check(f, {"x": x, "g": g, "b": b}, {"x": dx, "g": dg, "b": db})
    elif name == "gelu":
        f = lambda: float(np.sum(w * T.gelu(x)))
        _, cache = T.gelu_forward(x)
        err = T.grad_check(f, x, T.gelu_backward(w, cache))
    elif name == "softmax":
        f = lambda: float(np.sum(w * T.softmax_rows(x)))
        err = T.grad_check(f, x, T.softmax_backward(T.softmax_rows(x), w))
    else:
        gold = np.array([0, 4, 2])
        f = lambda: T.softmax_cross_entropy(x, gold)[0]
        err = T.grad_check(f, x, T.softmax_cross_entropy(x, gold)[1])
    assert err < 1e-7


def test_dropout_inverted_scaling(rng):
    x = np.ones((200, 200))
    out, keep = T.dropout(x, 0.25, rng)
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs(out.mean() - 1.0) < 0.02
    same, mask = T.dropout(x, 0.0, rng)
    assert same is x and mask is None


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0])}
    T.Adam(p, lr=0.1).step({"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-7)


def test_adam_zero_lr_leaves_params():
    p = {"w": np.array([1.0])}
    opt = T.Adam(p, lr=0.1)
    opt.step({"w": np.array([5.0])}, lr=0.0)
    assert p["w"][0] == 1.0


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    total = T.clip_grad_norm(g, 1.0)
    assert total == 5.0
    assert math.isclose(math.hypot(g["a"][0], g["b"][0]), 1.0, rel_tol=1e-9)
