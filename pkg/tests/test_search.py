import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ringform.model import FormationSet, LinearHdvCoeffs, ModelError
from ringform.perf import PerformanceWeights
from ringform.search import (
    CachedOracle,
    SearchError,
    canonical_rotation,
    check_pair,
    check_rotation_invariance,
    classify,
    enumerate_orbits,
    greedy_formation,
    is_non_increasing,
    j2_oracle,
    marginal_improvement,
    optimal_formation,
    orbit,
    platoon_formation,
    random_chain,
    submodularity_check,
    uniform_formation,
)


def necklace_count(n, k):
    """Binary necklaces with k ones (Burnside over rotations)."""
    if k == 0:
        return 1
    g = math.gcd(n, k)
    total = 0
    for d in range(1, g + 1):
        if g % d == 0:
            phi = sum(1 for j in range(1, d + 1) if math.gcd(j, d) == 1)
            total += phi * math.comb(n // d, k // d)
    return total // n


def brute_orbits(n, k):
    reps = set()
    for c in combinations(range(1, n + 1), k):
        rots = [tuple(sorted(((i - 1 + m) % n) + 1 for i in c)) for m in range(n)]
        reps.add(min(rots))
    return sorted(reps)


def gaps(S):
    idx = S.indices
    return [b - a for a, b in zip(idx, idx[1:])] + [idx[0] + S.n - idx[-1]]


# --- orbits -------------------------------------------------------------------

@pytest.mark.parametrize("n, k", [(12, 4), (12, 3), (12, 2), (8, 4), (9, 3), (10, 0), (6, 6), (40, 4)])
def test_orbit_counts(n, k):
    assert len(enumerate_orbits(n, k)) == necklace_count(n, k)


def test_orbit_counts_known_values():
    assert len(enumerate_orbits(12, 4)) == 43
    assert sum(len(orbit(S)) for S in enumerate_orbits(12, 4)) == math.comb(12, 4) == 495


@pytest.mark.parametrize("n, k", [(7, 3), (8, 4), (10, 5)])
def test_orbits_match_brute_force(n, k):
    assert [S.indices for S in enumerate_orbits(n, k)] == brute_orbits(n, k)


@given(st.integers(2, 14).flatmap(lambda n: st.tuples(st.just(n), st.sets(st.integers(1, n), min_size=1))))
def test_canonical_rotation_is_orbit_minimum(case):
    n, idx = case
    S = FormationSet.of(n, idx)
    c = canonical_rotation(S)
    assert c.indices == min(orbit(S))
    assert canonical_rotation(S.rotate(3)) == c


def test_enumerate_rejects_bad_k():
    with pytest.raises(ModelError):
        enumerate_orbits(5, 6)


# --- classification -----------------------------------------------------------

@pytest.mark.parametrize(
    "n, idx, label",
    [
        (12, (1, 2, 3), "platoon"),
        (12, (11, 12, 1), "platoon"),
        (12, (1, 5, 9), "uniform"),
        (12, (1, 7), "uniform"),
        (10, (1, 4, 7), "quasi-uniform"),
        (12, (1, 2, 8), "abnormal"),
        (12, (1, 2, 3, 8), "abnormal"),
        (12, (4,), "platoon"),
        (6, (1, 2, 3, 4, 5, 6), "platoon"),
        (6, (), "empty"),
    ],
)
def test_classify(n, idx, label):
    assert classify(FormationSet.of(n, idx)) == label


@given(st.integers(2, 30), st.integers(1, 30))
def test_uniform_formation_gaps(n, k):
    k = min(k, n)
    S = uniform_formation(n, k)
    g = gaps(S)
    assert S.k == k and max(g) - min(g) <= 1
    assert platoon_formation(n, k).k == k


# --- exact search with synthetic oracles --------------------------------------

def spread(S):
    """Larger when AVs are evenly spread."""
    return -float(np.sum(np.square(gaps(S))))


def test_optimal_formation_finds_uniform_and_platoon():
    r = optimal_formation(CachedOracle(spread), 12, 4)
    assert r.best_class == "uniform" and r.worst_class == "platoon"
    assert r.best == [FormationSet.of(12, (1, 4, 7, 10))]
    assert len(r.ranked) == 43
    assert r.best_value == spread(r.best[0])
    r2 = optimal_formation(CachedOracle(lambda S: -spread(S)), 12, 4, mode="worst")
    assert r2.best_class == "platoon" and r2.selected == r2.worst


def test_ties_are_all_reported():
    r = optimal_formation(CachedOracle(lambda S: 0.0), 8, 2)
    assert len(r.best) == len(r.worst) == 4


def test_threads_do_not_change_ranking():
    a = optimal_formation(CachedOracle(spread), 10, 3, threads=1)
    b = optimal_formation(CachedOracle(spread), 10, 3, threads=4)
    assert [S for S, _ in a.ranked] == [S for S, _ in b.ranked]


def test_partial_failures_are_aggregated():
    def flaky(S):
        if S.indices == (1, 2, 3):
            raise RuntimeError("boom")
        return spread(S)

    r = optimal_formation(CachedOracle(flaky), 9, 3)
    assert list(r.failures) == [(1, 2, 3)]
    with pytest.raises(SearchError):
        optimal_formation(CachedOracle(lambda S: 1 / 0), 6, 2)


def test_rotation_check_catches_position_dependent_oracle():
    with pytest.raises(SearchError, match="rotation"):
        check_rotation_invariance(CachedOracle(lambda S: float(S.indices[0])), enumerate_orbits(8, 2), 5, 0)


def test_greedy_baseline():
    S, v = greedy_formation(CachedOracle(spread), 8, 2)
    assert S.k == 2 and v == spread(S)


def test_mode_validation():
    with pytest.raises(ValueError):
        optimal_formation(CachedOracle(spread), 6, 2, mode="median")


def test_cached_oracle_counts():
    calls = []
    o = CachedOracle(lambda S: calls.append(S) or 1.0)
    S = FormationSet.of(5, [1])
    o(S), o(S)
    assert o.evaluations == 1 and len(calls) == 1


# --- diminishing returns ------------------------------------------------------

def test_random_chain_structure(rng):
    chain = random_chain(9, rng)
    assert len(chain) == 9
    for a, b in zip(chain, chain[1:]):
        assert set(a.indices) < set(b.indices) and b.k == a.k + 1
    assert all(1 not in S for S in chain[:-1])
    assert chain[-1] == FormationSet.full(9)


def test_is_non_increasing():
    assert is_non_increasing([3, 2, 2, 1])
    assert is_non_increasing([1.0, 1.0 + 1e-12])
    assert not is_non_increasing([1.0, 1.1])


def test_concave_cardinality_function_passes():
    res = submodularity_check(CachedOracle(lambda S: math.sqrt(S.k)), 10, trials=30, rng_seed=3)
    assert res.counterexample is None
    assert res.verdict == "no counterexample in 30 trials"


def test_convex_cardinality_function_fails_immediately():
    res = submodularity_check(CachedOracle(lambda S: float(S.k**2)), 10, trials=30, rng_seed=3)
    assert res.verdict == "counterexample found"
    assert len(res.chains) == 1  # stops at the first counterexample


def test_chains_reproducible_and_thread_independent():
    o = CachedOracle(lambda S: -float(np.sum(np.square(gaps(S)))) if S.k else -1e3)
    a = submodularity_check(o, 8, trials=12, rng_seed=9, stop_on_counterexample=False)
    b = submodularity_check(o, 8, trials=12, rng_seed=9, stop_on_counterexample=False, threads=3)
    assert [c.chain for c in a.chains] == [c.chain for c in b.chains]
    assert [c.margins for c in a.chains] == [c.margins for c in b.chains]


def test_failing_oracle_marks_chain_invalid():
    res = submodularity_check(CachedOracle(lambda S: 1 / 0), 6, trials=3, stop_on_counterexample=False)
    assert res.invalid == 3 and res.counterexample is None


def test_trials_validation():
    with pytest.raises(ModelError):
        submodularity_check(CachedOracle(spread), 6, trials=0)


def test_marginal_improvement_and_pair_errors():
    o = CachedOracle(lambda S: float(S.k))
    assert marginal_improvement(o, 2, FormationSet.of(5, [1])) == 1.0
    with pytest.raises(ModelError):
        marginal_improvement(o, 1, FormationSet.of(5, [1]))
    with pytest.raises(ModelError):
        check_pair(o, 3, FormationSet.of(5, [1, 2]), FormationSet.of(5, [1]))


def test_cooperative_counterexample_pair():
    oracle = j2_oracle(LinearHdvCoeffs(0.5, 2.5, 0.5), PerformanceWeights(0.01, 0.05, 0.1))
    pc = check_pair(oracle, 1, FormationSet.of(12, (4, 9, 10)), FormationSet.of(12, (2, 3, 4, 9, 10)))
    assert pc.violated
    assert pc.margin_small == pytest.approx(-0.5982 + 0.5003, abs=1e-3)
    assert pc.margin_large == pytest.approx(-0.7860 + 0.6910, abs=1e-3)
