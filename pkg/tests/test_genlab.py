import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fvlab import genlab as gl
from fvlab.coalescent import chain_generator, rates
from fvlab.genlab import Atoms, TestFunctional
from fvlab.mechanisms import (BetaPart, CoalescentM, FellerCase, StableCase, phi, psi,
                              theorem1_correspondence)
from fvlab.quadrature import beta_fn

FELLER = FellerCase(2.0, 1.0)
STABLE = StableCase(1.5, 1.0, 1.0)

atoms = st.integers(1, 6).flatmap(lambda k: st.builds(
    Atoms,
    st.lists(st.floats(0.0, 1.0), min_size=k, max_size=k).map(np.array),
    st.lists(st.floats(0.1, 5.0), min_size=k, max_size=k).map(np.array)))
phis = st.one_of(st.just(gl.Monomial(1)), st.just(gl.Monomial(2)),
                 st.lists(st.floats(0.0, 1.0), min_size=17, max_size=17).map(gl.PiecewiseLinear))


# --- Gateaux derivatives -----------------------------------------------------------------

def test_gateaux_examples():
    eta = Atoms([0.2, 0.7], [1.0, 2.0])
    for m in (1, 3):
        assert gl.gateaux(TestFunctional(gl.Constant(1.0), m), eta, 0.4) == 0
    F = TestFunctional(gl.Monomial(1), 1)
    assert gl.gateaux(F, Atoms([0.5], [2.0]), 1.0) == pytest.approx(0.25)
    assert gl.gateaux_fd(F, Atoms([0.5], [2.0]), 1.0) == pytest.approx(0.25, rel=1e-6)
    with pytest.raises(ValueError):
        gl.gateaux(F, Atoms([0.5], [0.0]), 1.0)


@given(atoms, phis, st.integers(1, 4), st.floats(0.0, 1.0), st.booleans())
def test_gateaux_matches_finite_differences(eta, phi_, m, a, exp_psi):
    F = TestFunctional(phi_, m, gl.ExpPsi(0.7) if exp_psi else gl.ConstantPsi())
    assert gl.gateaux_deviation(F, eta, a) <= gl.GATEAUX_TOL


@given(atoms, phis, st.integers(1, 4), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_second_derivative_matches_finite_differences(eta, phi_, m, a, b):
    F = TestFunctional(phi_, m, gl.ExpPsi(0.4))
    h = 1e-5 * eta.z
    fd = (gl.gateaux(F, eta.add(b, h), a) - gl.gateaux(F, eta.add(b, -h), a)) / (2 * h)
    scale = max(1.0, abs(fd)) / eta.z**2
    assert abs(gl.gateaux2(F, eta, a, b) - fd) <= 1e-5 * scale


@given(atoms, phis, st.integers(1, 4))
def test_mass_weighted_integral_vanishes(eta, phi_, m):
    assert abs(gl.mass_weighted_residual(TestFunctional(phi_, m), eta)) <= gl.MASS_WEIGHTED_TOL


# --- generators -----------------------------------------------------------------------------

def test_generators_kill_constants():
    eta = Atoms([0.0, 0.3, 0.9], [0.5, 1.0, 2.0])
    for m in (1, 2, 4):
        F = TestFunctional(gl.Constant(1.0), m)
        for mech in (FELLER, STABLE):
            assert abs(gl.apply_L(mech, F, eta)) < 1e-12
            assert abs(gl.apply_Fgen(theorem1_correspondence(mech), F, eta)) < 1e-12


@pytest.mark.parametrize("mech", [FELLER, STABLE, StableCase(1.2, 0.5, 2.0)],
                         ids=["feller", "stable15", "stable12"])
def test_total_mass_generator(mech):
    for z in (0.5, 2.0):
        eta = Atoms([0.0, 0.5], [0.3 * z, 0.7 * z])
        for q in (0.5, 1.0, 2.0):
            F = TestFunctional(gl.Constant(1.0), 1, gl.ExpPsi(q))
            expected = (z * psi(mech, q) - phi(mech, q)) * math.exp(-q * z)
            assert gl.apply_L(mech, F, eta) == pytest.approx(expected, rel=1e-8)


@pytest.mark.parametrize("M", [CoalescentM(1.0, 2.0), theorem1_correspondence(STABLE),
                               CoalescentM(0.4, 0.3, BetaPart(0.3, 0.8, 2.0), BetaPart(0.8, 1.2, 0.5))],
                         ids=["kingman", "beta", "mixed"])
def test_fleming_viot_generator_is_dual_to_the_block_chain(M):
    rho = Atoms([0.0, 0.2, 0.6], [0.35, 0.4, 0.25])
    r0 = 0.35
    Q = chain_generator(4, rates(M, 4))
    for m in (1, 2, 3, 4):
        G = TestFunctional(gl.IndicatorZero(), m)
        dual = sum(Q[m, b] * r0**b for b in range(m + 1))
        assert gl.apply_Fgen(M, G, rho) == pytest.approx(dual, rel=1e-10, abs=1e-14)


def test_fleming_viot_generator_kingman_two_point():
    rho = Atoms([0.0, 0.5], [0.3, 0.7])
    G = TestFunctional(gl.IndicatorZero(), 2)
    c0, c1 = 1.0, 2.0
    expected = (c1 + 2 * c0) * (0.3 - 0.09)
    assert gl.apply_Fgen(CoalescentM(c0, c1), G, rho) == pytest.approx(expected)


@pytest.mark.parametrize("mech", [FELLER, STABLE, StableCase(1.8, 2.0, 0.3)],
                         ids=["feller", "stable15", "stable18"])
def test_factorization(mech):
    cases = gl.random_cases(3, 12)
    assert gl.factorization_check(mech, cases) <= gl.FACTORIZATION_TOL


def test_factorization_constant_phi_both_sides_zero():
    eta = Atoms([0.0, 0.4], [1.0, 2.0])
    F = TestFunctional(gl.Constant(1.0), 3)
    assert abs(gl.apply_L(STABLE, F, eta)) < 1e-12
    assert abs(gl.apply_Fgen(theorem1_correspondence(STABLE), F, eta)) < 1e-12


def test_feller_decomposition():
    assert gl.decomposition_check(FELLER, gl.random_cases(5, 12)) <= gl.FACTORIZATION_TOL


# --- pushforward --------------------------------------------------------------------------------

def test_pushforward_examples():
    lhs, rhs = gl.pushforward_sides(STABLE, 1.0, [0, 0, 1], "nu1")
    assert lhs == pytest.approx(math.pi / 2, rel=1e-10)
    assert rhs == pytest.approx(beta_fn(0.5, 1.5), rel=1e-12)
    lhs2, _ = gl.pushforward_sides(STABLE, 2.0, [0, 0, 1], "nu1")
    assert lhs2 == pytest.approx(lhs * 2**-1.5, rel=1e-10)
    assert gl.pushforward_sides(STABLE, 1.0, [0, 0, 0], "nu1") == (0.0, 0.0)


def test_pushforward_check():
    assert gl.pushforward_check(STABLE) <= gl.PUSHFORWARD_TOL
    assert gl.pushforward_check(StableCase(1.2, 0.7, 1.3)) <= gl.PUSHFORWARD_TOL


def test_pushforward_rejects_bad_polynomials():
    with pytest.raises(ValueError):
        gl.pushforward_sides(STABLE, 1.0, [0, 1, 0], "nu1")
    with pytest.raises(ValueError):
        gl.pushforward_sides(STABLE, 1.0, [1, 0], "nu0")
    with pytest.raises(ValueError):
        gl.pushforward_sides(STABLE, 1.0, [0, 0, 1], "nu2")
    with pytest.raises(ValueError):
        gl.pushforward_sides(STABLE, 0.0, [0, 0, 1], "nu1")


def test_levy_integral_rejects_divergence():
    with pytest.raises(ValueError):
        gl.levy_integral(lambda h: h, 1.0, 1.5, 1)


def test_levy_integral_value():
    # int_0^inf (1 - e^{-h}) h^{-1-a} dh = Gamma(1-a)/a
    a = 0.5
    val = gl.levy_integral(lambda h: -math.expm1(-h), 1.0, a, 1)
    assert val == pytest.approx(math.gamma(1 - a) / a, rel=1e-10)


# --- the suite -----------------------------------------------------------------------------------

def test_run_suite_small():
    results = gl.run_suite(seed=11, n_cases=10)
    names = {r.name for r in results}
    assert {"gateaux_finite_difference", "factorization_feller", "factorization_stable",
            "pushforward"} <= names
    assert all(r.passed for r in results), [r.as_dict() for r in results if not r.passed]
    with pytest.raises(ValueError):
        gl.run_suite(seed=1, n_cases=2, suite="nothing")


def test_random_cases_are_reproducible():
    a = gl.random_cases(4, 5)
    b = gl.random_cases(4, 5)
    for (e1, f1), (e2, f2) in zip(a, b):
        assert np.array_equal(e1.x, e2.x) and np.array_equal(e1.w, e2.w) and f1.m == f2.m
    for eta, F in a:
        assert 1 <= eta.x.size <= 10 and np.all((eta.w >= 0.1) & (eta.w <= 5.0))
        assert 1 <= F.m <= 4
