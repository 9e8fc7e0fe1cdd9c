"""Finite-particle simulation of M-generalized Fleming-Viot processes with
immigration.

``N`` particles carry types in [0, 1]; type 0 is the immigrant type.  The
events are

* Kingman reproduction: every unordered pair at rate ``c1``, one member
  (chosen by a fair coin) copying the type of the other;
* Kingman immigration: every particle at rate ``c0`` takes type 0;
* large reproduction: at rate ``nu1(dr)`` restricted to ``r > eps``, a
  uniform parent is drawn and every particle copies its type with
  probability ``r``;
* large immigration: at rate ``nu0(dr)`` restricted to ``r > eps``, every
  particle takes type 0 with probability ``r``.

Jumps with ``r <= eps`` are replaced by their Kingman equivalents:
``int_0^eps r^2 nu1(dr)`` is added to ``c1`` and ``int_0^eps r nu0(dr)`` to
``c0``.  In this model the lineages of distinct particles merge exactly
as in the M-coalescent with rates ``c1`` and ``c0``.

The total event rate does not depend on the types, so a run is the
superposition of a Poisson number of i.i.d. events; that is how replicates
are simulated side by side.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, special, stats

from . import streams
from .coalescent import RateTable, absorption_chain, rates
from .mechanisms import BetaPart, CoalescentM

KING_REP = "king-rep"
KING_IMM = "king-imm"
BIG_REP = "big-rep"
BIG_IMM = "big-imm"
KINDS = (KING_REP, KING_IMM, BIG_REP, BIG_IMM)

DEFAULT_N = 1000
DEFAULT_EPS = 1e-3
DEFAULT_REPS = 10_000

ALL_ZERO = ("zero",)


# --- truncated jump measures -------------------------------------------------------

class TruncatedPower:
    """The measure ``scale r^e1 (1-r)^e2 dr`` restricted to ``(eps, 1)``.

    Sampling splits the support at 1/2; each half is drawn from the power
    factor that is singular there and thinned by the other factor.
    """

    def __init__(self, e1: float, e2: float, scale: float, eps: float):
        if not 0 < eps < 1:
            raise ValueError("eps_trunc must lie in (0, 1)")
        if e2 <= -1:
            raise ValueError("measure has infinite mass near 1")
        self.e1, self.e2, self.scale, self.eps = e1, e2, scale, eps
        lo_end = max(eps, 0.5)
        self.m_left = 0.0
        if eps < 0.5:
            self.m_left = scale * integrate.quad(
                lambda r: r**e1 * (1 - r) ** e2, eps, 0.5, epsabs=0.0, epsrel=1e-12)[0]
        self.m_right = scale * integrate.quad(
            lambda r: r**e1, lo_end, 1.0, weight="alg", wvar=(0.0, e2),
            epsabs=0.0, epsrel=1e-12)[0]

    @property
    def mass(self) -> float:
        return self.m_left + self.m_right

    def _power_inv(self, u, e, lo, hi):
        # inverse CDF of x^e on (lo, hi)
        if abs(e + 1.0) < 1e-14:
            return lo * (hi / lo) ** u
        a, b = lo ** (e + 1.0), hi ** (e + 1.0)
        return (a + u * (b - a)) ** (1.0 / (e + 1.0))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        out = np.empty(size)
        left = rng.uniform(size=size) * self.mass < self.m_left
        pending = np.flatnonzero(left)
        while pending.size:
            r = self._power_inv(rng.uniform(size=pending.size), self.e1, self.eps, 0.5)
            # thinning by (1-r)^e2, whose maximum on (eps, 1/2) is at an endpoint
            bound = max((1 - self.eps) ** self.e2, 0.5**self.e2)
            ok = rng.uniform(size=pending.size) * bound < (1 - r) ** self.e2
            out[pending[ok]] = r[ok]
            pending = pending[~ok]
        pending = np.flatnonzero(~left)
        lo = max(self.eps, 0.5)
        while pending.size:
            r = 1.0 - self._power_inv(rng.uniform(size=pending.size), self.e2, 0.0, 1.0 - lo)
            bound = max(lo**self.e1, 1.0)
            ok = rng.uniform(size=pending.size) * bound < r**self.e1
            out[pending[ok]] = r[ok]
            pending = pending[~ok]
        return out


def _small_part(part: Optional[BetaPart], eps: float) -> float:
    # int_0^eps part(dx) = scale B(a,b) I_eps(a,b)
    if part is None:
        return 0.0
    return part.mass() * float(special.betainc(part.a, part.b, eps))


@dataclass
class EventModel:
    """Rates of the truncated particle dynamics for ``N`` particles."""

    c1_eff: float
    c0_eff: float
    big_rep: Optional[TruncatedPower]
    big_imm: Optional[TruncatedPower]
    n: int

    @classmethod
    def build(cls, M: CoalescentM, n: int, eps: float) -> "EventModel":
        if n < 2:
            raise ValueError("need at least two particles")
        if not 0 < eps < 1:
            raise ValueError("eps_trunc must lie in (0, 1)")
        # nu1 = r^-2 Lambda1-part, nu0 = r^-1 Lambda0-part
        rep = (TruncatedPower(M.nu1.a - 3.0, M.nu1.b - 1.0, M.nu1.scale, eps)
               if M.nu1 is not None else None)
        imm = (TruncatedPower(M.nu0.a - 2.0, M.nu0.b - 1.0, M.nu0.scale, eps)
               if M.nu0 is not None else None)
        return cls(M.c1 + _small_part(M.nu1, eps), M.c0 + _small_part(M.nu0, eps), rep, imm, n)

    def kind_rates(self) -> np.ndarray:
        n = self.n
        return np.array([self.c1_eff * n * (n - 1) / 2.0, self.c0_eff * n,
                         self.big_rep.mass if self.big_rep else 0.0,
                         self.big_imm.mass if self.big_imm else 0.0])

    @property
    def total_rate(self) -> float:
        return float(self.kind_rates().sum())


def truncated_rates(M: CoalescentM, eps: float, n_max: int = 16) -> RateTable:
    """Rate table of the coalescent dual to the truncated dynamics (in the
    large-population limit): small jumps contribute only pair mergers and
    single absorptions."""
    lam = np.zeros((n_max + 1, n_max + 1))
    r = np.zeros((n_max + 1, n_max + 1))
    c1 = M.c1 + _small_part(M.nu1, eps)
    c0 = M.c0 + _small_part(M.nu0, eps)
    for n in range(1, n_max + 1):
        for k in range(1, n + 1):
            if k >= 2:
                lam[n, k] = _upper_moment(M.nu1, k - 2, n - k, eps) + (c1 if k == 2 else 0.0)
            r[n, k] = _upper_moment(M.nu0, k - 1, n - k, eps) + (c0 if k == 1 else 0.0)
    return RateTable(lam, r)


def _upper_moment(part, i, j, eps):
    # int_eps^1 x^i (1-x)^j part(dx)
    if part is None:
        return 0.0
    a, b = part.a + i, part.b + j
    return part.scale * math.exp(special.betaln(a, b)) * float(special.betaincc(a, b, eps))


# --- single trajectories with an explicit event log ---------------------------------

@dataclass
class Event:
    time: float
    kind: str
    r: float = 0.0
    source: int = -1          # copied particle (reproduction)
    targets: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))


@dataclass
class ParticleSystem:
    types: np.ndarray
    time: float
    event_log: list

    @property
    def frac_type0(self) -> float:
        return float(np.mean(self.types == 0))

    @property
    def distinct_types(self) -> int:
        return int(np.unique(self.types).size)


def draw_events(M: CoalescentM, N: int, horizon: float, eps_trunc: float,
                rng: np.random.Generator) -> list[Event]:
    """The event sequence on ``[0, horizon]``; it does not depend on types."""
    model = EventModel.build(M, N, eps_trunc)
    lam = model.kind_rates()
    total = lam.sum()
    if total <= 0:
        return []
    k = rng.poisson(total * horizon)
    times = np.sort(rng.uniform(0.0, horizon, k))
    kinds = rng.choice(4, size=k, p=lam / total)
    events = []
    for t, kind in zip(times, kinds):
        if kind == 0:
            i, j = rng.choice(N, size=2, replace=False)
            events.append(Event(float(t), KING_REP, source=int(i), targets=np.array([j])))
        elif kind == 1:
            events.append(Event(float(t), KING_IMM, targets=np.array([rng.integers(N)])))
        elif kind == 2:
            r = float(model.big_rep.sample(rng, 1)[0])
            parent = int(rng.integers(N))
            targets = np.flatnonzero(rng.uniform(size=N) < r)
            events.append(Event(float(t), BIG_REP, r, parent, targets))
        else:
            r = float(model.big_imm.sample(rng, 1)[0])
            events.append(Event(float(t), BIG_IMM, r, targets=np.flatnonzero(rng.uniform(size=N) < r)))
    return events


def apply_events(types: np.ndarray, events: Sequence[Event],
                 relabel: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply ``events`` to a copy of ``types``.  With ``relabel``, particle
    ``i`` of the events acts on particle ``relabel[i]``."""
    out = np.array(types, dtype=float)
    lab = np.arange(out.size) if relabel is None else np.asarray(relabel)
    for ev in events:
        tg = lab[ev.targets]
        if ev.kind in (KING_REP, BIG_REP):
            out[tg] = out[lab[ev.source]]
        else:
            out[tg] = 0.0
    return out


def initial_types(N: int) -> np.ndarray:
    """All-distinct non-zero types ``1/N, 2/N, ..., 1``."""
    return np.arange(1, N + 1) / N


def sim_gfvi(M: CoalescentM, N: int, horizon: float, eps_trunc: float,
             rng: np.random.Generator, types0: Optional[np.ndarray] = None) -> ParticleSystem:
    """One trajectory up to ``horizon`` with its event log."""
    if N < 2:
        raise ValueError("need N >= 2")
    types0 = initial_types(N) if types0 is None else np.asarray(types0, dtype=float)
    if types0.shape != (N,) or np.any(types0 < 0) or np.any(types0 > 1):
        raise ValueError("types0 must hold N values in [0, 1]")
    events = draw_events(M, N, horizon, eps_trunc, rng)
    types = apply_events(types0, events)
    return ParticleSystem(types, horizon, [(ev.time, ev.kind if ev.kind in (KING_REP, KING_IMM)
                                            else f"{ev.kind}({ev.r:.6g})") for ev in events])


# --- replicate batches ---------------------------------------------------------------

def _member(types: np.ndarray, functional) -> np.ndarray:
    if functional[0] == "zero":
        return types == 0
    if functional[0] == "interval":
        lo, hi = functional[1], functional[2]
        return (types >= lo) & (types <= hi)
    raise ValueError(f"unknown functional {functional!r}")


@dataclass
class GFVIBatch:
    """Per-replicate summaries at the record times."""

    times: np.ndarray
    fractions: dict      # functional -> (n_reps, n_times) fraction of particles in the set
    homozygosity: np.ndarray
    distinct: np.ndarray
    N: int


def gfvi_batch(M: CoalescentM, N: int, times: Sequence[float], n_reps: int, seed: int,
               eps_trunc: float = DEFAULT_EPS, functionals=(ALL_ZERO,),
               types0: Optional[np.ndarray] = None, tag: int = 0) -> GFVIBatch:
    """Simulate ``n_reps`` independent replicates and record summaries.

    Between record times every replicate receives a Poisson number of
    events; event ``e`` is applied to all replicates that have at least
    ``e + 1`` events, so the work is vectorised across replicates.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be sorted and non-negative")
    model = EventModel.build(M, N, eps_trunc)
    lam = model.kind_rates()
    total = lam.sum()
    probs = lam / total if total > 0 else lam
    types0 = initial_types(N) if types0 is None else np.asarray(types0, dtype=float)
    fr = {f: np.empty((n_reps, times.size)) for f in functionals}
    homo = np.empty((n_reps, times.size))
    distinct = np.empty((n_reps, times.size), dtype=int)
    for j, sl in streams.blocks(n_reps):
        rng = streams.stream(seed, streams.TAG_GFVI, tag, j)
        R = sl.stop - sl.start
        X = np.tile(types0, (R, 1))
        rows = np.arange(R)
        t = 0.0
        for k, target in enumerate(times):
            counts = rng.poisson(total * (target - t), size=R)
            for e in range(int(counts.max(initial=0))):
                act = rows[counts > e]
                kind = rng.choice(4, size=act.size, p=probs)
                _apply_vector(X, act, kind, model, rng)
            t = target
            for f in functionals:
                fr[f][sl, k] = _member(X, f).mean(axis=1)
            S = np.sort(X, axis=1)
            homo[sl, k], distinct[sl, k] = _run_stats(S, N)
    return GFVIBatch(times, fr, homo, distinct, N)


def _bernoulli_subsets(rng, r: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray]:
    """For each entry of ``r``, the particles hit when each of ``N`` is hit
    independently with probability ``r``.

    Returns ``(owner, position)`` pairs.  The number of hits ``k`` is drawn
    as a Binomial(N, r) variable and the hit set as a uniform ``k``-subset,
    so the cost is proportional to the number of hits.  Small subsets
    (``k**2 <= N``) are drawn with replacement and redrawn on a repeat,
    which succeeds with probability above 1/2; larger ones directly.
    """
    k = rng.binomial(N, r)
    small = k * k <= N
    owner = np.repeat(np.flatnonzero(small), k[small])
    pos = rng.integers(N, size=owner.size)
    while owner.size:
        key = owner * N + pos
        order = np.argsort(key, kind="stable")
        dup = np.zeros(key.size, dtype=bool)
        dup[order[1:]] = key[order[1:]] == key[order[:-1]]
        if not dup.any():
            break
        redo = np.isin(owner, owner[dup])
        pos[redo] = rng.integers(N, size=int(redo.sum()))
    large = np.flatnonzero(~small)
    if large.size:
        owner = np.concatenate([owner] + [np.full(k[i], i) for i in large])
        pos = np.concatenate([pos] + [rng.choice(N, size=k[i], replace=False) for i in large])
    return owner, pos


def _apply_vector(X, act, kind, model: EventModel, rng):
    N = X.shape[1]
    sel = act[kind == 0]
    if sel.size:
        i = rng.integers(N, size=sel.size)
        j = (i + rng.integers(1, N, size=sel.size)) % N
        X[sel, j] = X[sel, i]
    sel = act[kind == 1]
    if sel.size:
        X[sel, rng.integers(N, size=sel.size)] = 0.0
    sel = act[kind == 2]
    if sel.size:
        r = model.big_rep.sample(rng, sel.size)
        parent = X[sel, rng.integers(N, size=sel.size)]
        owner, pos = _bernoulli_subsets(rng, r, N)
        X[sel[owner], pos] = parent[owner]
    sel = act[kind == 3]
    if sel.size:
        r = model.big_imm.sample(rng, sel.size)
        owner, pos = _bernoulli_subsets(rng, r, N)
        X[sel[owner], pos] = 0.0


def _run_stats(S: np.ndarray, N: int):
    # S sorted row-wise: sum of squared type frequencies and number of types
    new = np.ones(S.shape, dtype=bool)
    new[:, 1:] = S[:, 1:] != S[:, :-1]
    distinct = new.sum(axis=1)
    idx = np.flatnonzero(new.ravel())
    bounds = np.append(idx, S.size)
    sizes = np.diff(bounds).astype(float)
    row = idx // N
    homo = np.bincount(row, weights=sizes**2, minlength=S.shape[0]) / N**2
    return homo, distinct


# --- moments ------------------------------------------------------------------------------

@dataclass
class Estimate:
    value: float
    stderr: float
    ci_low: float
    ci_high: float
    n: int

    def as_dict(self) -> dict:
        return {"estimate": self.value, "stderr": self.stderr,
                "ci99": [self.ci_low, self.ci_high], "n": self.n}


Z99 = float(stats.norm.ppf(0.995))


def mean_ci(samples: np.ndarray) -> Estimate:
    """Sample mean with a 99% normal-approximation interval."""
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    m = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return Estimate(m, se, m - Z99 * se, m + Z99 * se, n)


def moment_estimate(batch: GFVIBatch, t: float, p: int, functional=ALL_ZERO) -> Estimate:
    """Estimate of ``E <f, rho_t^(x p)>`` for ``f`` the product of
    indicators of a set.

    Each replicate contributes ``rho_t(A)^p``, the exact expectation of the
    product over ``p`` with-replacement draws from its empirical measure.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    if p > batch.N / 10:
        raise ValueError("p must not exceed N/10")
    idx = np.flatnonzero(np.isclose(batch.times, t))
    if idx.size == 0:
        raise ValueError(f"t={t} is not a recorded time")
    if functional not in batch.fractions:
        raise ValueError(f"functional {functional!r} was not recorded")
    return mean_ci(batch.fractions[functional][:, idx[0]] ** p)


def distinct_draw_probs(p: int, N: int) -> np.ndarray:
    """``P(p with-replacement draws from N hit exactly k particles)``, k=0..p."""
    out = np.zeros(p + 1)
    for k in range(1, p + 1):
        falling = math.prod(N - i for i in range(k))
        out[k] = _stirling2(p, k) * falling / N**p
    return out


def _stirling2(n: int, k: int) -> int:
    return sum((-1) ** i * math.comb(k, i) * (k - i) ** n for i in range(k + 1)) // math.factorial(k)


def all_zero_oracle(M: CoalescentM, p: int, t: float, N: Optional[int] = None) -> float:
    """``E[rho_t({0})^p]`` from the dual coalescent, started from types
    with no zero.  With ``N`` the with-replacement sampling of the finite
    population is accounted for (exact for Kingman-type M)."""
    table = rates(M, max(p, 2))
    if N is None:
        return absorption_chain(p, table, t)
    w = distinct_draw_probs(p, N)
    return float(sum(w[k] * absorption_chain(k, table, t) for k in range(1, p + 1)))


# --- output -----------------------------------------------------------------------------------

def write_batch_csv(fh, batch: GFVIBatch) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["rep_id", "time", "frac_type0", "distinct_types"])
    frac = batch.fractions.get(ALL_ZERO)
    for rep in range(batch.distinct.shape[0]):
        for k, t in enumerate(batch.times):
            w.writerow([rep, repr(float(t)), repr(float(frac[rep, k])) if frac is not None else "",
                        int(batch.distinct[rep, k])])
