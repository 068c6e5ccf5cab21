"""Dense continuous-time Lyapunov solver (complex Schur / Bartels-Stewart)."""
from __future__ import annotations

import numpy as np
from scipy.linalg import schur, solve_triangular


def solve_lyapunov(A, Q) -> np.ndarray:
    """Solve ``A X + X A^T + Q = 0`` for X.

    A is reduced to complex Schur form ``A = U T U^*``; the transformed
    equation ``T Y + Y T^* = -U^* Q U`` is then solved column by column,
    last column first, each column being one upper-triangular solve.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    m = A.shape[0]
    if A.shape != (m, m) or Q.shape != (m, m):
        raise ValueError(f"shape mismatch: A {A.shape}, Q {Q.shape}")
    T, U = schur(A, output="complex")
    F = -(U.conj().T @ Q @ U)
    Y = np.zeros((m, m), dtype=complex)
    eye = np.eye(m)
    for j in range(m - 1, -1, -1):
        rhs = F[:, j] - Y[:, j + 1:] @ T[j, j + 1:].conj()
        Y[:, j] = solve_triangular(T + T[j, j].conj() * eye, rhs)
    X = (U @ Y @ U.conj().T).real
    return 0.5 * (X + X.T)


def lyapunov_residual(A, X, Q) -> float:
    """Relative Frobenius residual ``||A X + X A^T + Q|| / ||Q||``."""
    R = A @ X + X @ A.T + Q
    return float(np.linalg.norm(R) / max(np.linalg.norm(Q), np.finfo(float).tiny))


def separation_estimate(A) -> float:
    """Cheap condition proxy: ``2 ||A|| / min |lambda_i + conj(lambda_j)|``."""
    lam = np.linalg.eigvals(A)
    sep = np.min(np.abs(lam[:, None] + lam[None, :].conj()))
    if sep == 0:
        return np.inf
    return float(2.0 * np.linalg.norm(A, 2) / sep)
