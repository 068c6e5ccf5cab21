"""Eigenvalue analysis of ring closed loops and the formation-invariance check."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import (
    AccGains,
    FormationSet,
    LinearHdvCoeffs,
    ModelError,
    build_acc_closed_loop,
)

TOL_ZERO = 1e-8


@dataclass(frozen=True)
class SpectrumReport:
    eigenvalues: np.ndarray
    max_real_excluding_zero: float
    zero_multiplicity: int
    stable: bool

    def __len__(self):
        return len(self.eigenvalues)


def _sort_lex(eigs: np.ndarray) -> np.ndarray:
    return eigs[np.lexsort((eigs.imag, eigs.real))]


def _nullity(M: np.ndarray, tol: float) -> int:
    sv = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(sv <= tol * max(1.0, sv[0] if sv.size else 1.0)))


def spectrum(closed_loop, tol_zero: float = TOL_ZERO, tol: float = 1e-9) -> SpectrumReport:
    """Full eigen-analysis plus a Lyapunov-stability verdict.

    The verdict requires every eigenvalue to satisfy ``Re <= tol`` and every
    eigenvalue on the imaginary axis to be semisimple. ``tol_zero`` is scaled
    by the matrix norm.
    """
    A = np.asarray(closed_loop, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ModelError(f"spectrum needs a square matrix (got shape {A.shape})")
    eigs = _sort_lex(np.linalg.eigvals(A))
    scale = max(1.0, np.linalg.norm(A, 2))
    is_zero = np.abs(eigs) < tol_zero * scale
    rest = eigs[~is_zero]
    max_real = float(rest.real.max()) if rest.size else -math.inf

    stable = bool(np.all(eigs.real <= tol * scale))
    if stable:
        axis = eigs[np.abs(eigs.real) <= tol * scale]
        seen: list[complex] = []
        for lam in axis:
            if any(abs(lam - mu) < tol_zero * scale for mu in seen):
                continue
            seen.append(lam)
            alg = int(np.sum(np.abs(axis - lam) < tol_zero * scale))
            if alg > 1 and _nullity(A - lam * np.eye(len(A)), 1e-10) < alg:
                stable = False
    return SpectrumReport(eigs, max_real, int(is_zero.sum()), stable)


def match_spectra(a, b) -> float:
    """Largest distance under the optimal one-to-one pairing of two eigenvalue multisets."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != b.shape:
        raise ValueError(f"spectra differ in size: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    cost = np.abs(a[:, None] - b[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].max())


def characteristic_factors(coeffs: LinearHdvCoeffs, gains: AccGains, n: int, k: int, lam):
    """The two products whose difference is the closed-loop characteristic polynomial."""
    a1, a2, a3 = coeffs.alpha1, coeffs.alpha2, coeffs.alpha3
    lam = np.asarray(lam, dtype=complex)
    g = (lam**2 + a2 * lam + a1) ** (n - k) * (lam**2 + (a2 + gains.kv) * lam + a1 - gains.ks) ** k
    h = (lam * a3 + a1) ** (n - k) * (lam * a3 + a1 - gains.ks) ** k
    return g, h


def characteristic_residual(
    coeffs: LinearHdvCoeffs,
    gains: AccGains,
    n: int,
    k: int,
    lam,
    scaled: bool = False,
):
    """Characteristic polynomial of the ACC closed loop at ``lam``.

    It depends on the formation only through ``k``. With ``scaled=True`` the
    value is divided by ``max(|g| + |h|, 1)`` so that residuals at computed
    roots are comparable across magnitudes; the floor keeps the residual
    absolute where both products nearly vanish (a shared root of the factors).
    """
    if not 0 <= k <= n:
        raise ModelError(f"need 0 <= k <= n (got k={k}, n={n})")
    g, h = characteristic_factors(coeffs, gains, n, k, lam)
    r = g - h
    if scaled:
        r = r / np.maximum(np.abs(g) + np.abs(h), 1.0)
    return complex(r) if np.ndim(r) == 0 else r


@dataclass
class InvarianceReport:
    n: int
    k: int
    formations: list[FormationSet]
    spectra: list[SpectrumReport]
    max_deviation: float
    max_residual: float
    tol: float

    @property
    def invariant(self) -> bool:
        return self.max_deviation < self.tol


def random_formations(n: int, k: int, count: int, rng_seed: int) -> list[FormationSet]:
    """``count`` distinct k-subsets (fewer if fewer exist), one Philox stream per draw."""
    if not 0 <= k <= n:
        raise ModelError(f"need 0 <= k <= n (got k={k}, n={n})")
    count = min(count, math.comb(n, k))
    children = np.random.SeedSequence(rng_seed).spawn(count)
    out: list[FormationSet] = []
    seen: set[tuple[int, ...]] = set()
    for child in children:
        rng = np.random.Generator(np.random.Philox(child))
        while True:
            S = FormationSet.of(n, (rng.choice(n, size=k, replace=False) + 1).tolist())
            if S.indices not in seen:
                break
        seen.add(S.indices)
        out.append(S)
    return out


def verify_stability_invariance(
    coeffs: LinearHdvCoeffs,
    gains: AccGains,
    n: int,
    k: int,
    trials: int = 50,
    rng_seed: int = 0,
    tol: float = 1e-8,
) -> InvarianceReport:
    if trials < 2:
        raise ModelError(f"trials must be >= 2 (got {trials})")
    formations = random_formations(n, k, trials, rng_seed)
    spectra = [spectrum(build_acc_closed_loop(coeffs, S, gains)) for S in formations]
    ref = spectra[0].eigenvalues
    deviation = 0.0
    for i, a in enumerate(spectra):
        for b in spectra[i + 1:]:
            deviation = max(deviation, match_spectra(a.eigenvalues, b.eigenvalues))
    residual = max(
        float(np.max(np.abs(characteristic_residual(coeffs, gains, n, k, sp.eigenvalues, scaled=True))))
        for sp in spectra
    ) if ref.size else 0.0
    return InvarianceReport(n, k, formations, spectra, deviation, residual, tol)
