"""Exact optimal/worst formation search and the random-chain submodularity test.

An oracle is any callable ``J(S: FormationSet) -> float`` where larger is
better; ``-inf`` marks an unstable formation. Ring performance is invariant
under rotation of S, so the search evaluates one representative per rotation
orbit (a binary necklace).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable

import numpy as np

from .model import (
    AccGains,
    FormationSet,
    LinearHdvCoeffs,
    ModelError,
)
from .perf import PerformanceWeights, j1, j2

log = logging.getLogger(__name__)

Oracle = Callable[[FormationSet], float]

TIE_TOL = 1e-9
TOL_MONO = 1e-9


class SearchError(RuntimeError):
    pass


class CachedOracle:
    """Memoizes an oracle on the index tuple; safe to share between threads."""

    def __init__(self, fn: Oracle, name: str = "J"):
        self.fn = fn
        self.name = name
        self._cache: dict[tuple[int, tuple[int, ...]], float] = {}

    def __call__(self, S: FormationSet) -> float:
        key = (S.n, S.indices)
        if key not in self._cache:
            self._cache[key] = float(self.fn(S))
        return self._cache[key]

    @property
    def evaluations(self) -> int:
        return len(self._cache)


def j1_oracle(coeffs: LinearHdvCoeffs, gains: AccGains, weights: PerformanceWeights) -> CachedOracle:
    return CachedOracle(lambda S: j1(coeffs, S, gains, weights), "J1")


def j2_oracle(coeffs: LinearHdvCoeffs, weights: PerformanceWeights, backend: str = "riccati") -> CachedOracle:
    return CachedOracle(lambda S: j2(coeffs, S, weights, backend=backend), "J2")


# --- symmetry -----------------------------------------------------------------

def canonical_rotation(S: FormationSet) -> FormationSet:
    """Lexicographically smallest rotation of S."""
    if S.k == 0:
        return S
    return min((S.rotate(m) for m in range(S.n)), key=lambda r: r.indices)


def enumerate_orbits(n: int, k: int) -> list[FormationSet]:
    """One canonical representative per rotation orbit of k-subsets of {1..n}, sorted."""
    if not 0 <= k <= n:
        raise ModelError(f"need 0 <= k <= n (got k={k}, n={n})")
    if k == 0:
        return [FormationSet(n, ())]
    # every canonical representative starts at 1
    out = []
    for rest in combinations(range(2, n + 1), k - 1):
        S = FormationSet(n, (1,) + rest)
        if canonical_rotation(S) == S:
            out.append(S)
    return out


def orbit(S: FormationSet) -> set[tuple[int, ...]]:
    return {S.rotate(m).indices for m in range(S.n)}


def classify(S: FormationSet) -> str:
    """``platoon``, ``uniform``, ``quasi-uniform`` or ``abnormal``.

    Platoon wins when a pattern is both (k <= 1, k >= n - 1).
    """
    n, k = S.n, S.k
    if k == 0:
        return "empty"
    c = canonical_rotation(S)
    if c.indices == tuple(range(1, k + 1)):
        return "platoon"
    idx = c.indices
    gaps = [b - a for a, b in zip(idx, idx[1:])] + [idx[0] + n - idx[-1]]
    if max(gaps) == min(gaps):
        return "uniform"
    if n % k and max(gaps) - min(gaps) <= 1:
        return "quasi-uniform"
    return "abnormal"


def uniform_formation(n: int, k: int) -> FormationSet:
    """Evenly spread formation starting at 1 (gaps differ by at most one)."""
    return FormationSet.of(n, [1 + (i * n) // k for i in range(k)])


def platoon_formation(n: int, k: int, start: int = 1) -> FormationSet:
    return FormationSet.of(n, [((start - 1 + i) % n) + 1 for i in range(k)])


# --- exact search -------------------------------------------------------------

@dataclass
class FormationRanking:
    n: int
    k: int
    mode: str
    ranked: list[tuple[FormationSet, float]]
    best: list[FormationSet]
    worst: list[FormationSet]
    best_class: str
    worst_class: str
    failures: dict[tuple[int, ...], str] = field(default_factory=dict)
    rotation_check: float = 0.0

    @property
    def selected(self) -> list[FormationSet]:
        return self.best if self.mode == "best" else self.worst

    @property
    def best_value(self) -> float:
        return self.ranked[0][1]

    @property
    def worst_value(self) -> float:
        return self.ranked[-1][1]


def _class_of(group: list[FormationSet]) -> str:
    return "+".join(sorted({classify(S) for S in group}))


def check_rotation_invariance(
    oracle: Oracle, sets: list[FormationSet], samples: int, rng_seed: int, tol: float = 1e-6
) -> float:
    """Compare J(S) with J of a random rotation of S; raise if they differ beyond ``tol``."""
    rng = np.random.Generator(np.random.Philox(rng_seed))
    worst = 0.0
    if not sets:
        return worst
    for i in rng.choice(len(sets), size=min(samples, len(sets)), replace=False):
        S = sets[int(i)]
        m = int(rng.integers(1, max(S.n, 2)))
        a, b = oracle(S), oracle(S.rotate(m))
        if math.isinf(a) and a == b:
            continue
        diff = abs(a - b)
        worst = max(worst, diff)
        if not diff < tol:
            raise SearchError(f"oracle not rotation invariant: J({S})={a} vs J({S.rotate(m)})={b}")
    return worst


def _evaluate_all(oracle: Oracle, sets: list[FormationSet], threads: int):
    def one(S):
        try:
            return S, oracle(S), None
        except Exception as exc:  # aggregated below
            return S, None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, sets))
    return [one(S) for S in sets]


def optimal_formation(
    oracle: Oracle,
    n: int,
    k: int,
    mode: str = "best",
    threads: int = 1,
    tie_tol: float = TIE_TOL,
    rng_seed: int = 0,
    rotation_samples: int = 3,
) -> FormationRanking:
    """Rank every rotation orbit of k-subsets by ``oracle`` (brute force over necklaces)."""
    if mode not in ("best", "worst"):
        raise ValueError(f"mode must be 'best' or 'worst' (got {mode!r})")
    orbits = enumerate_orbits(n, k)
    results = _evaluate_all(oracle, orbits, threads)
    failures = {S.indices: err for S, _, err in results if err is not None}
    ok = [(S, v) for S, v, err in results if err is None]
    if not ok:
        raise SearchError(f"oracle failed on all {len(orbits)} orbits: {failures}")
    if failures:
        log.warning("oracle failed on %d of %d orbits", len(failures), len(orbits))
    rot = check_rotation_invariance(oracle, [S for S, _ in ok], rotation_samples, rng_seed)
    ranked = sorted(ok, key=lambda sv: (-sv[1], sv[0].indices))
    top, bottom = ranked[0][1], ranked[-1][1]
    best = [S for S, v in ranked if v == top or abs(v - top) <= tie_tol]
    worst = [S for S, v in ranked if v == bottom or abs(v - bottom) <= tie_tol]
    return FormationRanking(
        n, k, mode, ranked, best, worst, _class_of(best), _class_of(worst), failures, rot
    )


def greedy_formation(oracle: Oracle, n: int, k: int) -> tuple[FormationSet, float]:
    """Greedy baseline: add the best single index k times. No optimality guarantee."""
    S = FormationSet(n, ())
    value = -math.inf
    for _ in range(k):
        cands = [S.add(e) for e in range(1, n + 1) if e not in S]
        S, value = max(((c, oracle(c)) for c in cands), key=lambda cv: (cv[1], [-i for i in cv[0].indices]))
    return S, value


# --- submodularity ------------------------------------------------------------

def marginal_improvement(oracle: Oracle, e: int, S: FormationSet) -> float:
    """``J(S + {e}) - J(S)``."""
    if e in S:
        raise ModelError(f"element {e} already in {S}")
    return oracle(S.add(e)) - oracle(S)


@dataclass(frozen=True)
class PairCheck:
    e: int
    small: FormationSet
    large: FormationSet
    margin_small: float
    margin_large: float

    @property
    def violated(self) -> bool:
        """True when the diminishing-returns inequality fails for this pair."""
        return self.margin_small < self.margin_large


def check_pair(oracle: Oracle, e: int, small: FormationSet, large: FormationSet) -> PairCheck:
    if not set(small.indices) <= set(large.indices):
        raise ModelError(f"{small} is not a subset of {large}")
    return PairCheck(e, small, large, marginal_improvement(oracle, e, small), marginal_improvement(oracle, e, large))


@dataclass
class ChainReport:
    chain_id: int
    chain: list[FormationSet]
    margins: list[float]
    monotone: bool
    seed: int
    valid: bool = True
    error: str | None = None


@dataclass
class SubmodularityResult:
    chains: list[ChainReport]
    trials: int
    invalid: int

    @property
    def counterexample(self) -> ChainReport | None:
        return next((c for c in self.chains if c.valid and not c.monotone), None)

    @property
    def verdict(self) -> str:
        if self.counterexample is not None:
            return "counterexample found"
        return f"no counterexample in {sum(c.valid for c in self.chains)} trials"


def is_non_increasing(values, tol: float = TOL_MONO) -> bool:
    return all(b <= a + tol for a, b in zip(values, values[1:]))


def random_chain(n: int, rng: np.random.Generator, e: int = 1) -> list[FormationSet]:
    """Nested S_1 < S_2 < ... < S_{n-1} over the indices other than ``e``, plus S_n = all."""
    others = np.array([i for i in range(1, n + 1) if i != e])
    order = rng.permutation(others)
    chain = [FormationSet.of(n, order[: i + 1].tolist()) for i in range(n - 1)]
    chain.append(FormationSet.full(n))
    return chain


def _run_chain(oracle: Oracle, n: int, chain_id: int, seed: int, tol: float) -> ChainReport:
    rng = np.random.Generator(np.random.Philox(seed))
    chain = random_chain(n, rng)
    try:
        margins = [marginal_improvement(oracle, 1, S) for S in chain[:-1]]
    except Exception as exc:
        return ChainReport(chain_id, chain, [], False, seed, valid=False, error=str(exc))
    if not all(math.isfinite(m) for m in margins):
        return ChainReport(chain_id, chain, margins, False, seed, valid=False, error="non-finite margin")
    return ChainReport(chain_id, chain, margins, is_non_increasing(margins, tol), seed)


def submodularity_check(
    oracle: Oracle,
    n: int,
    trials: int,
    rng_seed: int = 0,
    tol: float = TOL_MONO,
    stop_on_counterexample: bool = True,
    threads: int = 1,
) -> SubmodularityResult:
    """Monte-Carlo diminishing-returns test on random nested chains.

    Each chain adds the indices other than 1 in random order and records
    ``J(S_i + {1}) - J(S_i)``. One increasing step beyond ``tol`` disproves
    submodularity; no such step only supports it. Chain ``c`` uses a Philox
    stream keyed by ``(rng_seed, c)``, so results do not depend on threading.
    """
    if trials < 1:
        raise ModelError(f"trials must be >= 1 (got {trials})")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(rng_seed).spawn(trials)]
    reports: list[ChainReport] = []
    if threads > 1 and not stop_on_counterexample:
        with ThreadPoolExecutor(threads) as pool:
            reports = list(pool.map(lambda c: _run_chain(oracle, n, c, seeds[c], tol), range(trials)))
    else:
        for c in range(trials):
            rep = _run_chain(oracle, n, c, seeds[c], tol)
            reports.append(rep)
            if stop_on_counterexample and rep.valid and not rep.monotone:
                break
    return SubmodularityResult(reports, trials, sum(not r.valid for r in reports))
