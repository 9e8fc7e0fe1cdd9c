import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from fvlab import coalescent as co
from fvlab import streams
from fvlab.coalescent import Partition0
from fvlab.mechanisms import BetaPart, CoalescentM, StableCase, theorem1_correspondence

import oracles

KING = CoalescentM(c0=1.0, c1=2.0)


def beta_M(alpha, c=1.0, cprime=1.0):
    return theorem1_correspondence(StableCase(alpha, c, cprime))


# --- rate tables -----------------------------------------------------------------------

def test_kingman_rates():
    t = co.rates(CoalescentM(c0=0.7, c1=2.0), 8)
    assert t.lam[5, 2] == 2.0 and t.r[5, 1] == 0.7
    lam, r = t.lam.copy(), t.r.copy()
    lam[:, 2] = 0
    r[:, 1] = 0
    assert not lam.any() and not r.any()


def test_beta_rate_examples():
    t = co.rates(beta_M(1.5), 4)
    assert t.lam[3, 2] == pytest.approx(3 * math.pi / 8, rel=1e-14)
    assert t.r[2, 1] == pytest.approx(math.pi / 2, rel=1e-14)
    # the defining integral of lambda_{3,2}: int (1-x) x^-0.5 (1-x)^0.5 dx
    q = integrate.quad(lambda x: (1 - x) * x**-0.5 * (1 - x) ** 0.5, 0, 1, epsabs=0, epsrel=1e-12)[0]
    assert q == pytest.approx(3 * math.pi / 8, rel=1e-10)


@given(st.floats(1.05, 1.95), st.floats(0.1, 3.0), st.floats(0.0, 3.0))
def test_rates_match_quadrature(alpha, c, cprime):
    M = beta_M(alpha, c, cprime)
    t = co.rates(M, 16)
    for n in range(2, 17, 3):
        for k in range(1, n + 1):
            if k >= 2:
                ref = oracles.beta_rate_quad(M.nu1.a, M.nu1.b, M.nu1.scale, k - 2, n - k)
                assert co.relative_deviation(t.lam[n, k], ref) <= 1e-10
            if M.nu0 is not None:
                ref = oracles.beta_rate_quad(M.nu0.a, M.nu0.b, M.nu0.scale, k - 1, n - k)
                assert co.relative_deviation(t.r[n, k], ref) <= 1e-10


def test_rate_by_quadrature():
    M = CoalescentM(0.3, 0.4, BetaPart(0.5, 0.5), BetaPart(0.5, 1.5))
    t = co.rates(M, 16)
    for n in range(2, 17):
        for k in range(2, n + 1):
            assert co.relative_deviation(t.lam[n, k], co.rate_by_quadrature(M, "lambda", n, k)) <= 1e-10
        for k in range(1, n + 1):
            assert co.relative_deviation(t.r[n, k], co.rate_by_quadrature(M, "r", n, k)) <= 1e-10
    with pytest.raises(ValueError):
        co.rate_by_quadrature(M, "mu", 3, 2)


@given(st.floats(1.05, 1.95), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_consistency_recursion(alpha, c0, c1):
    M = CoalescentM(c0, c1, BetaPart(2 - alpha, alpha - 1), BetaPart(2 - alpha, alpha))
    assert co.consistency_deviation(co.rates(M, 32)) <= 1e-10


def test_rates_reject_bad_arguments():
    with pytest.raises(ValueError):
        co.rates(KING, 1)
    with pytest.raises(ValueError):
        co._beta_rate(BetaPart(0.5, 0.5), -1, 0)


# --- Lambda-equivalence -------------------------------------------------------------------

@pytest.mark.parametrize("alpha", [1.2, 1.5, 1.8])
def test_lambda_equivalence_beta(alpha):
    ok, dev = co.lambda_equivalence(CoalescentM(0, 0, BetaPart(2 - alpha, alpha - 1, 0.7),
                                                BetaPart(2 - alpha, alpha, 0.7)))
    assert ok and dev <= 1e-10


def test_lambda_equivalence_kingman():
    assert co.lambda_equivalence(CoalescentM(2.0, 2.0))[0]
    ok, dev = co.lambda_equivalence(CoalescentM(1.0, 2.0))
    assert not ok and dev == pytest.approx(0.5)


def test_beta_domination_on_dyadic_intervals():
    for alpha in (1.2, 1.5, 1.8):
        f0 = lambda x: x ** (1 - alpha) * (1 - x) ** (alpha - 2)
        f1 = lambda x: x ** (1 - alpha) * (1 - x) ** (alpha - 1)
        M = beta_M(alpha)
        assert M.lambda0_mass() >= M.lambda1_mass()
        for level in range(1, 5):
            for j in range(2**level):
                lo, hi = j / 2**level, (j + 1) / 2**level
                a = integrate.quad(f0, lo, hi, limit=200)[0]
                b = integrate.quad(f1, lo, hi, limit=200)[0]
                assert a >= b


# --- partitions ------------------------------------------------------------------------

def test_partition_basics():
    p = Partition0(((0, 3), (2,), (1, 4)))
    assert p.blocks == ((0, 3), (1, 4), (2,))
    assert p.encoding() == (0, 1, 2, 0, 1)
    assert Partition0.from_encoding(p.encoding()) == p
    assert p.restrict(2) == Partition0(((0,), (1,), (2,)))
    assert p.outside == 2 and p.n == 4
    with pytest.raises(ValueError):
        Partition0(((1,), (0,)))
    with pytest.raises(ValueError):
        Partition0(((0,), (2,)))


def test_merge():
    p = Partition0.singletons(3)
    assert p.merge([1, 3], False).blocks == ((0,), (1, 3), (2,))
    assert p.merge([2], True).blocks == ((0, 2), (1,), (3,))


def test_kingman_gillespie_from_two_lineages():
    sigma2, beta = 2.0, 1.0
    t = co.rates(CoalescentM(beta, sigma2), 4)
    assert t.total_rate(2) == pytest.approx(sigma2 + 2 * beta)
    rng = streams.stream(1, 0)
    n = 20_000
    merged = 0
    waits = []
    for _ in range(n):
        w, s = co.gillespie_step(Partition0.singletons(2), t, rng)
        waits.append(w)
        merged += s.blocks == ((0,), (1, 2))
    p = sigma2 / (sigma2 + 2 * beta)
    assert abs(merged / n - p) < 4 * math.sqrt(p * (1 - p) / n)
    assert abs(np.mean(waits) - 1 / (sigma2 + 2 * beta)) < 4 * np.std(waits) / math.sqrt(n)


def test_absorbing_state_does_not_move():
    w, s = co.gillespie_step(Partition0(((0, 1, 2),)), co.rates(KING, 4), streams.stream(1, 0))
    assert math.isinf(w) and s == Partition0(((0, 1, 2),))


def test_trajectories_only_merge_chosen_blocks():
    table = co.rates(beta_M(1.5), 8)
    rng = streams.stream(3, 0)
    for _ in range(200):
        traj = co.simulate(table, 6, 5.0, rng)
        counts = [s.outside for _, s in traj]
        assert all(b <= a for a, b in zip(counts, counts[1:]))
        for (_, a), (_, b) in zip(traj, traj[1:]):
            # every block of the new state is a union of old blocks
            old = {x: i for i, blk in enumerate(a.blocks) for x in blk}
            for blk in b.blocks:
                assert all(set(a.blocks[old[x]]) <= set(blk) for x in blk)


# --- the absorption chain ----------------------------------------------------------------

def test_absorption_single_lineage():
    t = co.rates(CoalescentM(c0=0.8, c1=2.0), 4)
    for s in (0.1, 0.5, 2.0):
        assert co.absorption_chain(1, t, s) == pytest.approx(1 - math.exp(-0.8 * s), rel=1e-12)


def test_absorption_two_lineages_kingman():
    t = co.rates(KING, 4)
    for s in (0.25, 1.0, 3.0):
        assert co.absorption_chain(2, t, s) == pytest.approx(oracles.kingman_p2(1.0, 2.0, s), rel=1e-12)


def test_absorption_at_time_zero():
    for p in (1, 2, 5):
        assert co.absorption_chain(p, co.rates(KING, 8), 0.0) == 0.0
    with pytest.raises(ValueError):
        co.absorption_chain(1, co.rates(KING, 4), -1.0)


@pytest.mark.parametrize("M", [KING, beta_M(1.5), beta_M(1.2, 0.5, 2.0),
                               CoalescentM(0.3, 0.5, BetaPart(0.5, 0.5), BetaPart(0.5, 1.5))],
                         ids=["kingman", "beta15", "beta12", "mixed"])
def test_block_count_chain_matches_full_partition_chain(M):
    table = co.rates(M, 6)
    for p in (1, 2, 3, 4):
        exact = oracles.full_partition_absorption(
            p, lambda b, k: table.lam[b, k], lambda b, k: table.r[b, k], 0.7)
        assert co.absorption_chain(p, table, 0.7) == pytest.approx(exact, rel=1e-10, abs=1e-14)


def test_absorption_chain_matches_simulation():
    table = co.rates(beta_M(1.5), 4)
    for p in (1, 2):
        est, se = co.absorbed_fraction_mc(table, p, 0.5, 20_000, seed=4, tag=p)
        assert abs(est - co.absorption_chain(p, table, 0.5)) < 3.5 * se


@pytest.mark.slow
def test_sampling_consistency():
    table = co.rates(beta_M(1.5), 8)
    for n in (2, 3, 4):
        _, pval = co.sampling_consistency(table, n, 0.3, 100_000, seed=n)
        assert pval > 1e-3


def test_trajectory_csv():
    fh = io.StringIO()
    traj = co.simulate(co.rates(KING, 4), 2, 10.0, streams.stream(1, 0))
    co.write_trajectories_csv(fh, [traj])
    lines = fh.getvalue().splitlines()
    assert lines[0] == "rep_id,time,n_blocks_outside,partition_encoding"
    assert lines[1] == "0,0.0,2,0-1-2"
    assert lines[-1].split(",")[2] == "0"
