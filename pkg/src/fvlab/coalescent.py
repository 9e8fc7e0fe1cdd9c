"""Finite-n M-coalescents.

An M-coalescent lives on partitions of ``{0, 1, ..., n}`` whose block
containing 0 is distinguished.  With ``b`` non-distinguished blocks,

* any ``k >= 2`` of them merge into one at rate ``lambda[b, k]``
  (reproduction, driven by ``Lambda1``);
* any ``k >= 1`` of them merge into the distinguished block at rate
  ``r[b, k]`` (immigration, driven by ``Lambda0``).

The number of non-distinguished blocks is itself a pure-death Markov
chain, which gives the exact matrix-exponential oracle
:func:`absorption_chain` for the duality relation with the all-zero
functional.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg, stats

from . import streams
from .mechanisms import BetaPart, CoalescentM
from .quadrature import beta_fn, beta_integral

DEFAULT_N_MAX = 64


# --- rate tables -----------------------------------------------------------------

@dataclass(frozen=True)
class RateTable:
    """``lam[n, k]`` for ``2 <= k <= n`` and ``r[n, k]`` for ``1 <= k <= n``,
    ``n <= n_max``; all other entries are zero."""

    lam: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        for name in ("lam", "r"):
            arr = getattr(self, name)
            if np.any(~np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"rate table {name} must be finite and non-negative")
            arr.setflags(write=False)

    @property
    def n_max(self) -> int:
        return self.lam.shape[0] - 1

    def total_rate(self, b: int) -> float:
        """Total jump rate out of a state with ``b`` non-distinguished blocks."""
        if b < 1:
            return 0.0
        rep, imm = self.event_weights(b)
        return float(rep.sum() + imm.sum())

    def event_weights(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        """Weights ``C(b,k) lam[b,k]`` and ``C(b,k) r[b,k]`` indexed by ``k``
        (entries for impossible ``k`` are zero)."""
        w = _binom_row(b)
        rep = np.zeros(b + 1)
        imm = np.zeros(b + 1)
        rep[2:] = w[2:] * self.lam[b, 2:b + 1]
        imm[1:] = w[1:] * self.r[b, 1:b + 1]
        return rep, imm


def _binom_row(b: int) -> np.ndarray:
    return np.array([math.comb(b, k) for k in range(b + 1)], dtype=float)


def _beta_rate(part: Optional[BetaPart], i: int, j: int) -> float:
    # int x^i (1-x)^j part(dx) in closed form
    if part is None or part.scale == 0:
        return 0.0
    if part.a + i <= 0 or part.b + j <= 0:
        raise ValueError(f"rate integral diverges for Beta part {part} at exponents ({i}, {j})")
    return part.scale * beta_fn(part.a + i, part.b + j)


def rates(M: CoalescentM, n_max: int = DEFAULT_N_MAX) -> RateTable:
    """Closed-form rate table of the M-coalescent up to ``n_max`` blocks."""
    if n_max < 2:
        raise ValueError("n_max must be at least 2")
    lam = np.zeros((n_max + 1, n_max + 1))
    r = np.zeros((n_max + 1, n_max + 1))
    for n in range(1, n_max + 1):
        for k in range(1, n + 1):
            if k >= 2:
                lam[n, k] = _beta_rate(M.nu1, k - 2, n - k) + (M.c1 if k == 2 else 0.0)
            r[n, k] = _beta_rate(M.nu0, k - 1, n - k) + (M.c0 if k == 1 else 0.0)
    return RateTable(lam, r)


def rate_by_quadrature(M: CoalescentM, kind: str, n: int, k: int) -> float:
    """The defining integral of ``lam[n, k]`` (``kind="lambda"``) or
    ``r[n, k]`` (``kind="r"``) evaluated by adaptive quadrature."""
    if kind == "lambda":
        i, dirac, part = k - 2, (M.c1 if k == 2 else 0.0), M.nu1
    elif kind == "r":
        i, dirac, part = k - 1, (M.c0 if k == 1 else 0.0), M.nu0
    else:
        raise ValueError("kind must be 'lambda' or 'r'")
    if part is None or part.scale == 0:
        return dirac
    j = n - k
    val = beta_integral(lambda x: x**i * (1.0 - x) ** j, part.a, part.b)
    return dirac + part.scale * val


def consistency_deviation(table: RateTable) -> float:
    """Max relative violation of ``x[n,k] = x[n+1,k] + x[n+1,k+1]`` over both
    rate families and every stored ``n``."""
    worst = 0.0
    for arr, kmin in ((table.lam, 2), (table.r, 1)):
        for n in range(kmin, table.n_max):
            for k in range(kmin, n + 1):
                lhs, rhs = arr[n, k], arr[n + 1, k] + arr[n + 1, k + 1]
                worst = max(worst, relative_deviation(lhs, rhs))
    return worst


def relative_deviation(x: float, y: float) -> float:
    scale = max(abs(x), abs(y))
    return 0.0 if scale == 0 else abs(x - y) / scale


def lambda_equivalence(M: CoalescentM, n_max: int = 16,
                       tol: float = 1e-10) -> tuple[bool, float]:
    """Test whether the M-coalescent is a plain Lambda-coalescent, i.e.
    whether ``(1 - x) Lambda0(dx) = Lambda1(dx)``.

    Compares ``lam[n, k]`` computed from ``Lambda1`` with the same moment of
    ``(1 - x) Lambda0`` for all ``2 <= k <= n <= n_max``.  Returns the
    verdict and the maximal relative deviation.
    """
    if n_max < 2:
        raise ValueError("n_max must be at least 2")
    worst = 0.0
    for n in range(2, n_max + 1):
        for k in range(2, n + 1):
            from_l1 = _beta_rate(M.nu1, k - 2, n - k) + (M.c1 if k == 2 else 0.0)
            from_l0 = _beta_rate(M.nu0, k - 2, n - k + 1) + (M.c0 if k == 2 else 0.0)
            worst = max(worst, relative_deviation(from_l1, from_l0))
    return worst <= tol, worst


# --- partitions ----------------------------------------------------------------------

@dataclass(frozen=True)
class Partition0:
    """Partition of ``{0, ..., n}``; ``blocks[0]`` contains 0 and blocks are
    ordered by their least element."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(tuple(sorted(b)) for b in self.blocks)
        blocks = (blocks[0],) + tuple(sorted(blocks[1:], key=lambda b: b[0]))
        object.__setattr__(self, "blocks", blocks)
        flat = sorted(x for b in blocks for x in b)
        if flat != list(range(len(flat))) or any(len(b) == 0 for b in blocks):
            raise ValueError(f"blocks do not form a partition of {{0..n}}: {blocks}")
        if 0 not in blocks[0]:
            raise ValueError("the first block must contain 0")

    @classmethod
    def singletons(cls, n: int) -> "Partition0":
        """The finest partition ``{0}, {1}, ..., {n}``."""
        return cls(tuple((i,) for i in range(n + 1)))

    @classmethod
    def from_encoding(cls, word: Sequence[int]) -> "Partition0":
        groups: dict[int, list[int]] = {}
        for i, idx in enumerate(word):
            groups.setdefault(int(idx), []).append(i)
        return cls(tuple(tuple(groups[k]) for k in sorted(groups)))

    @property
    def n(self) -> int:
        return sum(len(b) for b in self.blocks) - 1

    @property
    def outside(self) -> int:
        """Number of non-distinguished blocks."""
        return len(self.blocks) - 1

    def encoding(self) -> tuple[int, ...]:
        """The word ``(index of the block containing i)_{i=0..n}``."""
        word = [0] * (self.n + 1)
        for idx, b in enumerate(self.blocks):
            for x in b:
                word[x] = idx
        return tuple(word)

    def restrict(self, m: int) -> "Partition0":
        """Restriction to ``{0, ..., m}``."""
        if not 0 <= m <= self.n:
            raise ValueError("restriction level out of range")
        blocks = [tuple(x for x in b if x <= m) for b in self.blocks]
        return Partition0((blocks[0],) + tuple(b for b in blocks[1:] if b))

    def merge(self, chosen: Sequence[int], into_distinguished: bool) -> "Partition0":
        """Merge the non-distinguished blocks with indices ``chosen``
        (1-based block positions) together, or into block 0."""
        chosen = set(int(i) for i in chosen)
        merged = tuple(x for i in chosen for x in self.blocks[i])
        rest = [b for i, b in enumerate(self.blocks) if i not in chosen and i > 0]
        if into_distinguished:
            return Partition0((self.blocks[0] + merged,) + tuple(rest))
        return Partition0((self.blocks[0],) + tuple(rest) + (merged,))


# --- simulation -------------------------------------------------------------------------

def gillespie_step(state: Partition0, table: RateTable,
                   rng: np.random.Generator) -> tuple[float, Partition0]:
    """One jump of the coalescent from ``state``.

    The event type and size ``k`` are drawn with weights ``C(b,k)`` times the
    rate, then the ``k`` participating blocks are a uniform subset.  From
    the absorbing state (no non-distinguished block) the waiting time is
    infinite and the state is returned unchanged.
    """
    b = state.outside
    if b == 0:
        return math.inf, state
    if b > table.n_max:
        raise ValueError(f"rate table covers {table.n_max} blocks, state has {b}")
    rep, imm = table.event_weights(b)
    w = np.concatenate((rep, imm))
    total = w.sum()
    if total <= 0:
        return math.inf, state
    wait = rng.exponential(1.0 / total)
    e = int(rng.choice(w.size, p=w / total))
    into0 = e > b
    k = e - (b + 1) if into0 else e
    chosen = 1 + rng.choice(b, size=k, replace=False)
    return wait, state.merge(chosen, into0)


def simulate(table: RateTable, n: int, horizon: float,
             rng: np.random.Generator) -> list[tuple[float, Partition0]]:
    """Trajectory from the finest partition of ``{0..n}`` up to ``horizon``:
    the list of ``(jump time, new state)``, starting with ``(0, start)``."""
    state = Partition0.singletons(n)
    t = 0.0
    traj = [(0.0, state)]
    while True:
        wait, nxt = gillespie_step(state, table, rng)
        if t + wait > horizon:
            return traj
        t += wait
        state = nxt
        traj.append((t, state))


def state_at(traj: Sequence[tuple[float, Partition0]], t: float) -> Partition0:
    state = traj[0][1]
    for s, p in traj:
        if s > t:
            break
        state = p
    return state


def absorbed_fraction_mc(table: RateTable, p: int, t: float, n_reps: int,
                         seed: int, tag: int = 0) -> tuple[float, float]:
    """Monte Carlo estimate (and its standard error) of the probability that
    the ``p`` lineages ``1..p`` all lie in the distinguished block at time ``t``."""
    hits = 0
    for j, sl in streams.blocks(n_reps):
        rng = streams.stream(seed, streams.TAG_COALESCENT, tag, j)
        for _ in range(sl.stop - sl.start):
            hits += state_at(simulate(table, p, t, rng), t).outside == 0
    est = hits / n_reps
    return est, math.sqrt(est * (1 - est) / n_reps)


# --- the exact block-count chain ------------------------------------------------------

def chain_generator(p: int, table: RateTable) -> np.ndarray:
    """Generator of the number of non-distinguished blocks, states ``0..p``."""
    if p > table.n_max:
        raise ValueError(f"rate table covers {table.n_max} blocks, need {p}")
    Q = np.zeros((p + 1, p + 1))
    for b in range(1, p + 1):
        rep, imm = table.event_weights(b)
        for k in range(2, b + 1):
            Q[b, b - k + 1] += rep[k]
        for k in range(1, b + 1):
            Q[b, b - k] += imm[k]
        Q[b, b] = -Q[b].sum()
    return Q


def absorption_chain(p: int, table: RateTable, t: float) -> float:
    """Probability that ``p`` singleton lineages have all joined the
    distinguished block by time ``t``.

    The number of non-distinguished blocks is a pure-death chain (rates
    depend only on the current count), and the event depends only on
    whether that count has reached 0, so the answer is an entry of the
    matrix exponential of the small generator.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return 0.0
    P = linalg.expm(chain_generator(p, table) * t)
    return float(min(max(P[p, 0], 0.0), 1.0))


# --- diagnostics ------------------------------------------------------------------------

def sampling_consistency(table: RateTable, n: int, t: float, n_reps: int,
                         seed: int) -> tuple[float, float]:
    """Chi-square test that the restriction to ``{0..n-1}`` of an
    n-coalescent at time ``t`` has the law of an (n-1)-coalescent.

    Returns ``(statistic, p_value)`` of the two-sample homogeneity test on
    the partition frequencies.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    counts: list[dict] = [{}, {}]
    for which, (size, tag) in enumerate(((n, 1), (n - 1, 2))):
        for j, sl in streams.blocks(n_reps):
            rng = streams.stream(seed, streams.TAG_COALESCENT, tag, j)
            for _ in range(sl.stop - sl.start):
                part = state_at(simulate(table, size, t, rng), t)
                key = part.restrict(n - 1).encoding()
                counts[which][key] = counts[which].get(key, 0) + 1
    keys = sorted(set(counts[0]) | set(counts[1]))
    obs = np.array([[c.get(k, 0) for k in keys] for c in counts])
    if obs.shape[1] < 2:
        return 0.0, 1.0
    stat, pval = stats.chi2_contingency(obs, correction=False)[:2]
    return float(stat), float(pval)


def write_trajectories_csv(fh, trajs: Sequence[Sequence[tuple[float, Partition0]]]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["rep_id", "time", "n_blocks_outside", "partition_encoding"])
    for rep, traj in enumerate(trajs):
        for t, part in traj:
            w.writerow([rep, repr(float(t)), part.outside,
                        "-".join(str(i) for i in part.encoding())])


def table_for(M: Union[CoalescentM, RateTable], n_max: int = DEFAULT_N_MAX) -> RateTable:
    return M if isinstance(M, RateTable) else rates(M, n_max)
