import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pits import core_math as cm
from pits.core_math import RngState


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


def test_linear_scalar():
    assert cm.linear(np.array([[2.0]]), np.array([[3.0]]), np.array([0.0])).tolist() == [[6.0]]


def test_linear_identity():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(cm.linear(x, np.eye(3), np.zeros(3)), x)


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(cm.ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        cm.linear(np.zeros((3, 4)), np.zeros((5, 2)), np.zeros(2))


def test_linear_backward_matches_finite_differences():
    g = np.random.default_rng(0)
    x, W, b = g.normal(size=(3, 4)), g.normal(size=(4, 2)), g.normal(size=2)
    up = g.normal(size=(3, 2))
    f = lambda: float(np.sum(cm.linear(x, W, b) * up))
    dx, dW, db = cm.linear_backward(x, W, up)
    for analytic, arr in ((dx, x), (dW, W), (db, b)):
        assert rel_err(analytic, numeric_grad(f, arr)) < 1e-6


def test_linear_is_homogeneous():
    g = np.random.default_rng(1)
    x, W = g.normal(size=(5, 4)), g.normal(size=(4, 3))
    lhs = cm.linear(2.5 * x, W, np.zeros(3))
    np.testing.assert_allclose(lhs, 2.5 * cm.linear(x, W, np.zeros(3)), rtol=0, atol=1e-12)


def test_relu_values_and_gate():
    x = np.array([-1.0, 0.0, 2.0])
    assert cm.relu(x).tolist() == [0.0, 0.0, 2.0]
    assert cm.relu_backward(x, np.ones(3)).tolist() == [0.0, 0.0, 1.0]


def test_relu_all_negative():
    x = -np.ones((2, 3))
    assert not cm.relu(x).any()
    assert not cm.relu_backward(x, np.ones_like(x)).any()


def test_relu_gradient_away_from_kink():
    g = np.random.default_rng(2)
    x = g.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5
    up = g.normal(size=x.shape)
    f = lambda: float(np.sum(cm.relu(x) * up))
    assert rel_err(cm.relu_backward(x, up), numeric_grad(f, x)) < 1e-6


def test_dropout_identity_cases():
    x = np.ones((3, 3))
    g = RngState(0).stream("dropout")
    assert cm.dropout(x, 0.0, True, g)[0] is x
    assert cm.dropout(x, 0.7, False, g)[0] is x


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_rate(rate):
    with pytest.raises(ValueError):
        cm.dropout(np.ones(3), rate, True, RngState(0).stream("d"))


def test_dropout_expectation():
    y, _ = cm.dropout(np.ones(100_000), 0.5, True, RngState(7).stream("dropout"))
    assert abs(y.mean() - 1.0) < 0.02


def test_dropout_backward_uses_mask():
    x = np.arange(1.0, 7.0)
    y, mask = cm.dropout(x, 0.5, True, RngState(3).stream("d"))
    np.testing.assert_array_equal(cm.dropout_backward(mask, np.ones(6)), mask)
    np.testing.assert_array_equal(y, x * mask)


def test_maxpool_pairs_and_floor():
    z = np.array([[1.0, 5.0], [3.0, 2.0]])
    out, _ = cm.maxpool_adjacent(z, axis=0)
    assert out.tolist() == [[3.0, 5.0]]
    out3, _ = cm.maxpool_adjacent(np.arange(9.0).reshape(3, 3), axis=0)
    assert out3.shape == (1, 3)


def test_maxpool_needs_two_rows():
    with pytest.raises(cm.ShapeError):
        cm.maxpool_adjacent(np.ones((1, 3)), axis=0)


def test_maxpool_gradient_routes_to_argmax():
    g = np.random.default_rng(4)
    z = g.normal(size=(2, 7, 3))  # continuous draws: no exact ties
    up = g.normal(size=(2, 3, 3))

    def f():
        return float(np.sum(cm.maxpool_adjacent(z, axis=1)[0] * up))

    _, pick = cm.maxpool_adjacent(z, axis=1)
    dz = cm.maxpool_adjacent_backward(pick, up, 7, axis=1)
    assert not dz[:, 6].any()  # dropped odd tail
    assert rel_err(dz, numeric_grad(f, z)) < 1e-6


def test_maxpool_tie_goes_to_earlier_row():
    z = np.array([[2.0], [2.0]])
    _, pick = cm.maxpool_adjacent(z, axis=0)
    dz = cm.maxpool_adjacent_backward(pick, np.array([[1.0]]), 2, axis=0)
    assert dz.ravel().tolist() == [1.0, 0.0]


def test_fd_check_exact_on_quadratic():
    theta = {"w": np.random.default_rng(5).normal(size=(3, 4))}
    report = cm.finite_difference_check(lambda: 0.5 * float(np.sum(theta["w"] ** 2)),
                                        theta, {"w": theta["w"].copy()}, eps=1e-4)
    assert report["w"] < 1e-8


def test_fd_check_zero_gradient_point():
    theta = {"w": np.zeros(4)}
    data = np.array([1.0, -1.0, 1.0, -1.0])
    report = cm.finite_difference_check(lambda: float(np.sum(theta["w"] * data)) ** 2,
                                        theta, {"w": np.zeros(4)}, eps=1e-5)
    assert report["w"] < 1e-8


def test_fd_check_detects_nondeterminism():
    g = np.random.default_rng(0)
    theta = {"w": np.zeros(2)}
    with pytest.raises(RuntimeError, match="deterministic"):
        cm.finite_difference_check(lambda: float(g.random()), theta, {"w": np.zeros(2)})


def test_fd_check_eps_range():
    with pytest.raises(ValueError):
        cm.finite_difference_check(lambda: 0.0, {}, {}, eps=1.0)


def test_rng_streams_are_labeled_and_reproducible():
    a, b = RngState(11), RngState(11)
    x1 = a.stream("mask", 3).random(5)
    b.stream("dropout", 0).random(100)  # consuming another label must not matter
    np.testing.assert_array_equal(x1, b.stream("mask", 3).random(5))
    assert not np.array_equal(x1, a.stream("dropout", 3).random(5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ops_bitwise_pure_given_rng(seed):
    x = RngState(seed).stream("x").normal(size=(4, 6))
    y1, _ = cm.dropout(x, 0.3, True, RngState(seed).stream("dropout"))
    y2, _ = cm.dropout(x, 0.3, True, RngState(seed).stream("dropout"))
    assert np.array_equal(y1, y2)
