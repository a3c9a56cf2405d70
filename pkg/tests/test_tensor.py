import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compmod import tensor as T
from compmod.errors import ContractError, DimensionError, NumericError


def fd_grad(fn, x, eps=1e-6):
    """Central differences of a numpy scalar function, coordinate by coordinate."""
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (fn(xp) - fn(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def test_matmul_identity_and_orthogonal():
    a = T.const([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, T.const(np.eye(2))).value, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(T.const([[1.0, 0.0]]), T.const([[0.0], [1.0]])).value, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.const(np.ones((2, 3))), T.const(np.ones((2, 3))))


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a0, b0, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    a, b = T.param(a0), T.param(b0)
    T.backward(T.total(T.mul(T.matmul(a, b), T.const(w))))
    ga = fd_grad(lambda x: float(((x @ b0) * w).sum()), a0)
    gb = fd_grad(lambda x: float(((a0 @ x) * w).sum()), b0)
    assert rel_err(a.grad, ga) < 1e-6
    assert rel_err(b.grad, gb) < 1e-6


def test_row_normalize_examples():
    np.testing.assert_allclose(T.row_normalize(T.const([[3.0, 4.0]])).value, [[0.6, 0.8]])
    np.testing.assert_array_equal(T.row_normalize(T.const([[0.0, 0.0]]), 1e-12).value, [[0.0, 0.0]])
    with pytest.raises(ContractError):
        T.row_normalize(T.const([[1.0]]), 0.0)


def test_row_normalize_gradient():
    rng = np.random.default_rng(1)
    x0, w = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    x = T.param(x0)
    T.backward(T.total(T.mul(T.row_normalize(x), T.const(w))))

    def ref(v):
        return float((v / np.linalg.norm(v, axis=1, keepdims=True) * w).sum())

    assert rel_err(x.grad, fd_grad(ref, x0)) < 1e-6


def test_backward_quadratic_and_trace():
    x = T.param([[1.0, 2.0, 3.0]])
    T.backward(T.total(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [[2.0, 4.0, 6.0]])
    a = T.param(np.arange(9.0).reshape(3, 3))
    T.backward(T.trace(a))
    np.testing.assert_array_equal(a.grad, np.eye(3))


def test_backward_rejects_non_scalar_root():
    with pytest.raises(ContractError):
        T.backward(T.param(np.ones((2, 2))))


def test_backward_composed_loss():
    rng = np.random.default_rng(2)
    x0, w0 = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    c = rng.normal(size=(4, 5))

    def ref(x):
        h = np.maximum(x @ w0, 0.0)
        hn = h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
        return float((hn * c).sum())

    x = T.param(x0)
    out = T.total(T.mul(T.row_normalize(T.relu(T.matmul(x, T.const(w0)))), T.const(c)))
    T.backward(out)
    assert rel_err(x.grad, fd_grad(ref, x0)) < 1e-6


def test_backward_is_bitwise_repeatable():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4, 4))

    def run():
        x = T.param(x0)
        T.backward(T.power_series_trace(T.matmul(x, T.transpose(x)), 4, 0.1))
        return x.grad.tobytes()

    assert run() == run()


def test_fan_out_accumulates():
    x = T.param([[3.0]])
    T.backward(T.add(T.mul(x, x), T.scale(x, 2.0)))
    assert x.grad[0, 0] == 8.0
    # a second backward adds on top until zeroed
    T.backward(T.scale(x, 1.0))
    assert x.grad[0, 0] == 9.0
    x.zero_grad()
    assert x.grad is None


def test_broadcast_row_and_column_vectors():
    m = T.param(np.ones((3, 2)))
    r = T.param([[1.0, 2.0]])
    c = T.param([[1.0], [2.0], [3.0]])
    T.backward(T.total(T.mul(T.add(m, r), c)))
    np.testing.assert_array_equal(r.grad, [[6.0, 6.0]])
    np.testing.assert_array_equal(c.grad, [[5.0], [5.0], [5.0]])
    with pytest.raises(DimensionError):
        T.add(T.const(np.ones((3, 2))), T.const(np.ones((2, 2))))


@pytest.mark.parametrize(
    "a, lam, m, expected, tol",
    [
        (np.zeros((3, 3)), 0.3, 4, 0.0, 0.0),
        ([[1.0]], 0.5, 4, 0.5 - 0.125 + 0.5**3 / 3 - 0.015625, 1e-12),
        ([[1.0]], 0.5, 64, math.log(1.5), 1e-9),
    ],
)
def test_power_series_trace_examples(a, lam, m, expected, tol):
    assert abs(T.power_series_trace(T.const(a), m, lam).item() - expected) <= tol


def test_power_series_trace_hand_value():
    # 0.5 - 0.125 + 0.0416667 - 0.015625
    assert abs(T.power_series_trace(T.const([[1.0]]), 4, 0.5).item() - 0.4010417) < 1e-7


def test_power_series_trace_rejects_bad_input():
    with pytest.raises(DimensionError):
        T.power_series_trace(T.const(np.ones((2, 3))), 4, 0.5)
    with pytest.raises(ContractError):
        T.power_series_trace(T.const(np.ones((2, 2))), 0, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_power_series_trace_converges_to_logdet(n, d, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, d))
    gram = z @ z.T
    lam = 0.5 / np.linalg.eigvalsh(gram).max()
    eig = np.linalg.eigvalsh(lam * gram)
    oracle = float(np.sum(np.log1p(eig)))
    got = T.power_series_trace(T.const(gram), 32, lam).item()
    assert abs(got - oracle) < 1e-6


def test_grad_check_quadratic():
    assert T.grad_check(lambda x: T.total(T.mul(x, x)), [[1.0, 2.0]], 1e-6) < 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_validates_eps_and_finiteness():
    with pytest.raises(ContractError):
        T.grad_check(lambda x: T.total(x), [[1.0]], 1e-2)
    with pytest.raises(NumericError, match=r"\(0, 0\)"):
        T.grad_check(lambda x: T.total(T.log(x)), [[1e-7]], 1e-6)


def test_gradcheck_reports_wrong_gradient():
    # a deliberately broken op: forward x^2, backward claims x
    def broken(x):
        return T.total(T._make(x.value ** 2, (x,), "bad", lambda g: (g * x.value,)))

    assert T.grad_check(broken, [[2.0]], 1e-6) > 0.1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_ops_are_pure(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    f = lambda: T.power_series_trace(T.matmul(T.row_normalize(T.const(x)), T.transpose(T.const(x))), 4, 0.2).value.tobytes()
    assert f() == f()


def test_logsumexp_and_gather_gradients():
    rng = np.random.default_rng(4)
    s0 = rng.normal(size=(4, 4))
    mask = ~np.eye(4, dtype=bool)
    rows, cols = np.arange(4), (np.arange(4) + 2) % 4

    def ref(s):
        m = np.where(mask, s, -np.inf)
        return float((np.log(np.exp(m).sum(axis=1)) - s[rows, cols]).sum())

    err = T.grad_check(lambda s: T.total(T.sub(T.logsumexp_rows(s, mask), T.gather(s, rows, cols))), s0)
    assert err < 1e-6
    assert abs(T.total(T.sub(T.logsumexp_rows(T.const(s0), mask), T.gather(T.const(s0), rows, cols))).item() - ref(s0)) < 1e-12
