import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import solve_continuous_lyapunov

from ringform.lyapunov import lyapunov_residual, separation_estimate, solve_lyapunov


def random_stable(m, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    M = rng.standard_normal((m, m))
    shift = np.abs(np.linalg.eigvals(M).real).max() + 0.5
    return M - shift * np.eye(m), rng


def test_scalar():
    assert solve_lyapunov([[-1.0]], [[1.0]])[0, 0] == pytest.approx(0.5)


@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_matches_reference_solver(m, seed):
    A, rng = random_stable(m, seed)
    G = rng.standard_normal((m, m))
    Q = G @ G.T
    X = solve_lyapunov(A, Q)
    ref = solve_continuous_lyapunov(A, -Q)
    np.testing.assert_allclose(X, ref, rtol=1e-8, atol=1e-10 * np.abs(ref).max())
    assert lyapunov_residual(A, X, Q) < 1e-10
    np.testing.assert_array_equal(X, X.T)


def test_complex_eigenvalues():
    A = np.array([[-0.1, 5.0], [-5.0, -0.1]])
    Q = np.eye(2)
    X = solve_lyapunov(A, Q)
    # rotation-symmetric A gives X = I / (2 * 0.1)
    np.testing.assert_allclose(X, 5.0 * np.eye(2), atol=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        solve_lyapunov(np.eye(2), np.eye(3))


def test_separation_estimate():
    assert separation_estimate(np.diag([-1.0, -2.0])) == pytest.approx(2 * 2 / 2)
    assert separation_estimate(np.diag([0.0, -1.0])) == np.inf
