import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ringform.model import AccGains, FormationSet, LinearHdvCoeffs, ModelError, build_acc_closed_loop
from ringform.spectral import (
    characteristic_residual,
    match_spectra,
    random_formations,
    spectrum,
    verify_stability_invariance,
)

FIG4 = LinearHdvCoeffs(0.94, 1.5, 0.9)
FIG4_GAINS = AccGains(0.1, 1.0)


def test_spectrum_sorted_and_zero_count():
    rep = spectrum(np.diag([0.0, -2.0, -1.0, 0.0]))
    np.testing.assert_array_equal(rep.eigenvalues.real, [-2, -1, 0, 0])
    assert rep.zero_multiplicity == 2
    assert rep.max_real_excluding_zero == -1.0
    assert rep.stable  # semisimple zero


def test_jordan_block_on_axis_is_not_stable():
    rep = spectrum(np.array([[0.0, 1.0], [0.0, 0.0]]))
    assert rep.zero_multiplicity == 2 and not rep.stable


def test_positive_real_part_is_unstable():
    assert not spectrum(np.diag([0.1, -1.0])).stable


def test_spectrum_rejects_non_square():
    with pytest.raises(ModelError):
        spectrum(np.zeros((2, 3)))


@given(st.lists(st.complex_numbers(max_magnitude=10, allow_nan=False), min_size=1, max_size=8), st.randoms())
def test_match_spectra_ignores_ordering(vals, rnd):
    a = np.array(vals)
    b = a.copy()
    rnd.shuffle(b)
    assert match_spectra(a, b) == 0.0


def test_match_spectra_distance():
    assert match_spectra([0, 1j], [1j + 0.5, 0.25]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        match_spectra([0], [0, 1])


def test_ring_has_one_structural_zero():
    A = build_acc_closed_loop(FIG4, FormationSet.of(20, [1, 7, 13]), FIG4_GAINS)
    assert spectrum(A).zero_multiplicity == 1


@st.composite
def invariance_case(draw):
    n = draw(st.integers(3, 10))
    k = draw(st.integers(0, n))
    a1 = draw(st.floats(0.1, 1.5))
    a3 = draw(st.floats(0.1, 1.5))
    a2 = a3 + draw(st.floats(0.1, 1.5))
    gains = AccGains(draw(st.floats(0.0, a1 * 0.9)), draw(st.floats(0.0, 3.0)))
    S1 = FormationSet.of(n, draw(st.permutations(range(1, n + 1)))[:k])
    S2 = FormationSet.of(n, draw(st.permutations(range(1, n + 1)))[:k])
    return LinearHdvCoeffs(a1, a2, a3), gains, S1, S2


@given(invariance_case())
def test_poles_depend_only_on_av_count(case):
    coeffs, gains, S1, S2 = case
    e1 = spectrum(build_acc_closed_loop(coeffs, S1, gains)).eigenvalues
    e2 = spectrum(build_acc_closed_loop(coeffs, S2, gains)).eigenvalues
    scale = max(1.0, np.abs(e1).max())
    assert match_spectra(e1, e2) < 1e-6 * scale
    # every computed pole is a root of the count-only characteristic polynomial
    res = characteristic_residual(coeffs, gains, S1.n, S1.k, e1, scaled=True)
    assert np.abs(res).max() < 1e-6


def test_characteristic_polynomial_matches_determinant():
    n, k = 5, 2
    S = FormationSet.of(n, [2, 4])
    A = build_acc_closed_loop(FIG4, S, FIG4_GAINS)
    for lam in (0.3 + 0.2j, -1.1, 2.0j):
        det = np.linalg.det(lam * np.eye(2 * n) - A)
        assert characteristic_residual(FIG4, FIG4_GAINS, n, k, lam) == pytest.approx(det, rel=1e-9)


def test_random_formations_distinct_and_reproducible():
    a = random_formations(12, 3, 30, rng_seed=4)
    b = random_formations(12, 3, 30, rng_seed=4)
    assert a == b
    assert len({S.indices for S in a}) == 30
    assert all(S.k == 3 for S in a)
    assert len(random_formations(5, 4, 50, rng_seed=0)) == math.comb(5, 4)


def test_verify_invariance_report():
    rep = verify_stability_invariance(FIG4, FIG4_GAINS, 20, 5, trials=10, rng_seed=1)
    assert rep.invariant and rep.max_deviation < 1e-8
    assert rep.max_residual < 1e-6
    assert len(rep.spectra) == 10
    with pytest.raises(ModelError):
        verify_stability_invariance(FIG4, FIG4_GAINS, 20, 5, trials=1)
