"""H2 performance of ring closed loops and cooperative H2-optimal synthesis.

Every ring model keeps the total spacing constant: the vector ``[1, .., 1, 0, .., 0]``
is a left null vector of A, B and H. The matrices are therefore singular and the
Lyapunov/Riccati equations are solved on the ``2n - 1`` dimensional complement of
that direction, where the dynamics are exact (the disturbance never leaves it).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, null_space, solve_continuous_are

from .lyapunov import lyapunov_residual, separation_estimate, solve_lyapunov
from .model import (
    AccGains,
    FormationSet,
    LinearHdvCoeffs,
    ModelError,
    build_acc_closed_loop,
    build_open_loop,
    conserved_direction,
    disturbance_matrix,
    shift_matrix,
)
from .spectral import spectrum

COND_LIMIT = 1e12


class NumericalWarning(RuntimeWarning):
    """Lyapunov solve is ill-conditioned; the returned value may be inaccurate."""


class SynthesisError(RuntimeError):
    """Synthesis did not produce a certified optimum."""


class SynthesisUndefinedError(ModelError):
    """No AV in the formation: the ring cannot be stabilized."""


@dataclass(frozen=True)
class PerformanceWeights:
    gamma_s: float
    gamma_v: float
    gamma_u: float | None = None

    def __post_init__(self):
        if not (self.gamma_s > 0 and self.gamma_v > 0):
            raise ModelError(
                f"PerformanceWeights requires gamma_s > 0 and gamma_v > 0 "
                f"(got {self.gamma_s}, {self.gamma_v})"
            )
        if self.gamma_u is not None and not self.gamma_u > 0:
            raise ModelError(f"PerformanceWeights requires gamma_u > 0 (got {self.gamma_u})")

    def state_weights(self, n: int) -> np.ndarray:
        """Diagonal of the state penalty Q."""
        return np.concatenate([np.full(n, self.gamma_s), np.full(n, self.gamma_v)])

    def require_input_weight(self) -> float:
        if self.gamma_u is None:
            raise ModelError("synthesis requires an input penalty gamma_u > 0")
        return self.gamma_u


@dataclass(frozen=True)
class DeflatedSystem:
    T: np.ndarray = field(repr=False)
    A_r: np.ndarray = field(repr=False)
    B_r: np.ndarray | None = field(repr=False)
    H_r: np.ndarray = field(repr=False)
    C_r: np.ndarray | None = field(repr=False)
    removed: np.ndarray = field(repr=False)
    provenance: str = ""


def deflate(A, H, C=None, B=None, removed=None, tol: float = 1e-10) -> DeflatedSystem | None:
    """Restrict the system to the complement of left null directions of A.

    ``removed`` holds the left null vectors as columns; when omitted they are
    detected from the SVD of A. Returns None when H excites one of them (the
    marginal mode is then driven and the H2 norm is infinite).
    """
    A = np.asarray(A, dtype=float)
    H = np.asarray(H, dtype=float)
    m = A.shape[0]
    if removed is None:
        U, sv, _ = np.linalg.svd(A)
        scale = max(1.0, sv[0]) if sv.size else 1.0
        removed = U[:, sv <= tol * scale]
        provenance = f"detected {removed.shape[1]} left null direction(s) of A"
    else:
        removed = np.asarray(removed, dtype=float).reshape(m, -1)
        removed = np.linalg.qr(removed)[0]
        provenance = "caller-supplied conserved direction(s)"
    if removed.shape[1]:
        if np.linalg.norm(removed.T @ A) > tol * max(1.0, np.linalg.norm(A)):
            raise ValueError("supplied direction is not a left null vector of A")
        if np.linalg.norm(removed.T @ H) > tol * max(1.0, np.linalg.norm(H)):
            return None
        T = null_space(removed.T)
    else:
        T = np.eye(m)
    return DeflatedSystem(
        T=T,
        A_r=T.T @ A @ T,
        B_r=None if B is None else T.T @ np.asarray(B, dtype=float),
        H_r=T.T @ H,
        C_r=None if C is None else np.asarray(C, dtype=float) @ T,
        removed=removed,
        provenance=provenance,
    )


@dataclass(frozen=True)
class H2Evaluation:
    value: float
    finite: bool
    residual: float = math.nan
    condition: float = math.nan
    ill_conditioned: bool = False
    reduced_dim: int = 0


def h2_evaluate(A, H, C, removed=None, stab_tol: float = 1e-10) -> H2Evaluation:
    """Squared H2 norm from w to z = C x, with diagnostics. ``value`` is ``inf`` when unstable."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    H = np.asarray(H, dtype=float).reshape(A.shape[0], -1)
    C = np.asarray(C, dtype=float).reshape(-1, A.shape[0])
    red = deflate(A, H, C, removed=removed)
    if red is None:
        return H2Evaluation(math.inf, False)
    Ar = red.A_r
    if Ar.size == 0:
        return H2Evaluation(0.0, True, 0.0, 0.0, False, 0)
    lam = np.linalg.eigvals(Ar)
    if lam.real.max() >= -stab_tol * max(1.0, np.linalg.norm(Ar, 2)):
        return H2Evaluation(math.inf, False, reduced_dim=len(Ar))
    W = red.H_r @ red.H_r.T
    X = solve_lyapunov(Ar, W)
    cond = separation_estimate(Ar)
    ill = cond > COND_LIMIT
    if ill:
        warnings.warn(f"Lyapunov solve ill-conditioned (estimate {cond:.3g})", NumericalWarning, 2)
    value = float(np.trace(red.C_r @ X @ red.C_r.T))
    return H2Evaluation(max(value, 0.0), True, lyapunov_residual(Ar, X, W), cond, ill, len(Ar))


def h2_norm_sq(A, H, C, removed=None) -> float:
    """Squared H2 norm; ``math.inf`` marks an unstable (or marginally driven) system."""
    return h2_evaluate(A, H, C, removed=removed).value


def j1_output_matrix(n: int, weights: PerformanceWeights) -> np.ndarray:
    return np.diag(np.sqrt(weights.state_weights(n)))


def j1(
    coeffs: LinearHdvCoeffs,
    formation: FormationSet,
    gains: AccGains,
    weights: PerformanceWeights,
) -> float:
    """Negated squared H2 norm of the ACC closed loop; ``-inf`` if unstable."""
    n = formation.n
    A = build_acc_closed_loop(coeffs, formation, gains)
    return -h2_norm_sq(A, disturbance_matrix(n), j1_output_matrix(n, weights), conserved_direction(n))


def acc_gain_matrix(coeffs: LinearHdvCoeffs, formation: FormationSet, gains: AccGains) -> np.ndarray:
    """The ACC law written as ``u = -K x``; ``A_S - B_S K`` then equals the ACC closed loop."""
    n = formation.n
    E = shift_matrix(n)
    K = np.zeros((formation.k, 2 * n))
    for r, i in enumerate(formation.zero_based()):
        K[r, i] = -(coeffs.alpha1 - gains.ks)
        K[r, n + i] = coeffs.alpha2 + gains.kv
        K[r, n:] -= coeffs.alpha3 * E[i]
    return K


def j2_output_matrix(n: int, weights: PerformanceWeights, K: np.ndarray) -> np.ndarray:
    """Stacked ``[Q^1/2; -R^1/2 K]`` of the cooperative performance output."""
    gu = weights.require_input_weight()
    return np.vstack([np.diag(np.sqrt(weights.state_weights(n))), -math.sqrt(gu) * K])


def closed_loop_cost(
    coeffs: LinearHdvCoeffs, formation: FormationSet, weights: PerformanceWeights, K
) -> float:
    """Squared H2 norm of the cooperative output under an arbitrary gain K."""
    n = formation.n
    sys = build_open_loop(coeffs, formation)
    K = np.asarray(K, dtype=float).reshape(formation.k, 2 * n)
    return h2_norm_sq(sys.A - sys.B @ K, sys.H, j2_output_matrix(n, weights, K), conserved_direction(n))


@dataclass
class SynthesisResult:
    formation: FormationSet
    K: np.ndarray = field(repr=False)
    h2_sq: float
    status: str
    solver_meta: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _riccati(red: DeflatedSystem, Qr, R):
    P = solve_continuous_are(red.A_r, red.B_r, Qr, R)
    P = 0.5 * (P + P.T)
    K_r = np.linalg.solve(R, red.B_r.T @ P)
    res = red.A_r.T @ P + P @ red.A_r - P @ red.B_r @ K_r + Qr
    h2 = float(np.trace(red.H_r.T @ P @ red.H_r))
    return K_r, h2, {"riccati_residual": float(np.linalg.norm(res) / np.linalg.norm(Qr))}


def _sdp(red: DeflatedSystem, Qr, R, solver: str | None = None):
    import cvxpy as cp

    m, k = red.A_r.shape[0], red.B_r.shape[1]
    X = cp.Variable((m, m), symmetric=True)
    Y = cp.Variable((k, k), symmetric=True)
    Z = cp.Variable((k, m))
    L = red.A_r @ X - red.B_r @ Z
    W = red.H_r @ red.H_r.T
    cons = [
        -(L + L.T + W) >> 0,
        cp.bmat([[Y, Z], [Z.T, X]]) >> 0,
        X >> 1e-9 * np.eye(m),
    ]
    prob = cp.Problem(cp.Minimize(cp.trace(Qr @ X) + cp.trace(R @ Y)), cons)
    prob.solve(solver=solver or "CLARABEL")
    if prob.status not in ("optimal", "optimal_inaccurate") or X.value is None:
        raise LinAlgError(f"SDP solver returned status {prob.status}")
    K_r = np.linalg.solve(X.value.T, Z.value.T).T
    return K_r, float(prob.value), {"sdp_status": prob.status}


def synthesize(
    coeffs: LinearHdvCoeffs,
    formation: FormationSet,
    weights: PerformanceWeights,
    backend: str = "riccati",
    rtol: float = 1e-6,
) -> SynthesisResult:
    """H2-optimal static state feedback ``u = -K x`` for the AVs in ``formation``.

    ``backend="riccati"`` solves the algebraic Riccati equation on the deflated
    system; ``backend="sdp"`` solves the LMI program with cvxpy. Either way the
    result is certified by an independent Lyapunov evaluation of the closed loop
    and a spectral stability check; a failed gate yields ``status="infeasible"``.
    """
    if formation.k == 0:
        raise SynthesisUndefinedError("synthesis needs at least one AV (|S| >= 1)")
    gu = weights.require_input_weight()
    n = formation.n
    sys = build_open_loop(coeffs, formation)
    ell = conserved_direction(n)
    red = deflate(sys.A, sys.H, B=sys.B, removed=ell)
    Qr = red.T.T @ np.diag(weights.state_weights(n)) @ red.T
    R = gu * np.eye(formation.k)
    meta: dict = {"backend": backend}
    try:
        if backend == "riccati":
            K_r, h2, info = _riccati(red, Qr, R)
        elif backend == "sdp":
            K_r, h2, info = _sdp(red, Qr, R)
        else:
            raise ValueError(f"unknown synthesis backend {backend!r}")
    except (LinAlgError, ValueError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, ValueError) and "backend" in str(exc):
            raise
        meta["error"] = str(exc)
        return SynthesisResult(formation, np.full((formation.k, 2 * n), np.nan), math.inf, "infeasible", meta)
    meta.update(info)
    K = K_r @ red.T.T

    closed = sys.A - sys.B @ K
    spec = spectrum(closed)
    ev = h2_evaluate(closed, sys.H, j2_output_matrix(n, weights, K), removed=ell)
    gap = abs(ev.value - h2) / max(abs(h2), np.finfo(float).tiny) if ev.finite else math.inf
    meta.update(
        closed_loop_max_real=spec.max_real_excluding_zero,
        zero_multiplicity=spec.zero_multiplicity,
        evaluator_h2=ev.value,
        evaluator_gap=gap,
        lyapunov_residual=ev.residual,
    )
    problems = []
    if not (spec.stable and spec.zero_multiplicity == 1):
        problems.append("closed loop not Lyapunov stable with a simple zero eigenvalue")
    if gap > rtol:
        problems.append(f"evaluator disagrees with optimum (relative gap {gap:.3g} > {rtol:g})")
    if gap > 1e-4:
        meta["diagnostic"] = f"evaluator/optimum discrepancy {gap:.3g}"
    if problems:
        meta["problems"] = problems
    return SynthesisResult(formation, K, h2, "infeasible" if problems else "converged", meta)


def j2(
    coeffs: LinearHdvCoeffs,
    formation: FormationSet,
    weights: PerformanceWeights,
    backend: str = "riccati",
) -> float:
    res = synthesize(coeffs, formation, weights, backend=backend)
    if not res.converged:
        raise SynthesisError(f"synthesis failed for {formation}: {res.solver_meta}")
    return -res.h2_sq


def local_optimality_gap(
    coeffs: LinearHdvCoeffs,
    formation: FormationSet,
    weights: PerformanceWeights,
    result: SynthesisResult,
    trials: int = 20,
    rel_step: float = 1e-3,
    rng_seed: int = 0,
) -> float:
    """Smallest ``cost(K + d) - h2_sq`` over random stable perturbations ``||d|| = rel_step ||K||``.

    A negative value larger in magnitude than solver noise means K is not optimal.
    """
    rng = np.random.Generator(np.random.Philox(rng_seed))
    K = result.K
    best = math.inf
    tried = attempts = 0
    while tried < trials:
        attempts += 1
        if attempts > 50 * trials:
            raise SynthesisError(f"only {tried} of {attempts} gain perturbations kept the loop stable")
        d = rng.standard_normal(K.shape)
        d *= rel_step * np.linalg.norm(K) / np.linalg.norm(d)
        cost = closed_loop_cost(coeffs, formation, weights, K + d)
        if math.isfinite(cost):
            best = min(best, cost - result.h2_sq)
            tried += 1
    return best
