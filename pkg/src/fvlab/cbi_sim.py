"""Path simulation of CBI processes, the measure-valued flow and its time change.

Feller case
    Transitions are exact: over a step ``dt`` the branching part of a
    population of size ``y`` is a Poisson(y/u) number of Exp(u) clusters
    (``u = sigma2 dt / 2``) and the immigration part is an independent
    Gamma(2 beta / sigma2, u) variable.

Stable case
    Reproduction jumps above a truncation level are simulated as a
    compound Poisson process with compensating drift, jumps below it are
    replaced by a Gaussian term of matched variance, and immigration is an
    exact increment of the one-sided stable subordinator.  The truncation
    level is ``eps_trunc * y`` and the substep is ``dt * min(1, y)**(alpha-1)``,
    so the scheme commutes with the scaling ``y -> k y, t -> k**(alpha-1) t``
    of the process; this keeps the behaviour near zero (and hence the
    extinction dichotomy) faithful down to arbitrarily small masses.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from . import streams
from .mechanisms import FellerCase, Mechanism, StableCase

# masses below this are treated as exactly zero by the stable scheme
STABLE_FLOOR = 1e-12

REPRODUCTION = "reproduction"
IMMIGRATION = "immigration"


@dataclass
class PathGrid:
    """A sampled scalar trajectory.

    ``jumps`` holds ``(time, size, source)`` records; every jump time is a
    grid time (jumps are attributed to the end of the step they occur in).
    ``left`` optionally holds the left limits ``Y_{t-}`` at the grid times.
    """

    times: np.ndarray
    values: np.ndarray
    jumps: list = field(default_factory=list)
    absorbed_at: Optional[float] = None
    left: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must have the same length")
        if self.times[0] != 0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must start at 0 and increase strictly")
        if np.any(self.values < 0):
            raise ValueError("values must be non-negative")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def left_limits(self) -> np.ndarray:
        if self.left is not None:
            return self.left
        left = self.values.copy()
        if self.jumps:
            index = {t: i for i, t in enumerate(self.times.tolist())}
            for t, size, _ in self.jumps:
                left[index[t]] -= size
            np.maximum(left, 0.0, out=left)
        return left


@dataclass
class AtomicMeasure:
    """Finite measure on [0, 1]: an atom at 0 plus weighted atoms in (0, 1]."""

    immigrant: float
    labels: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=float)
        self.masses = np.asarray(self.masses, dtype=float)
        if self.immigrant < 0 or np.any(self.masses < 0):
            raise ValueError("masses must be non-negative")
        if np.any(self.labels <= 0) or np.any(self.labels > 1):
            raise ValueError("cell labels must lie in (0, 1]")

    @property
    def total(self) -> float:
        return float(self.immigrant + self.masses.sum())

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """All atom locations (0 first) and their masses."""
        return (np.concatenate(([0.0], self.labels)),
                np.concatenate(([self.immigrant], self.masses)))

    def normalized(self) -> Optional["AtomicMeasure"]:
        z = self.total
        if z <= 0:
            return None
        return AtomicMeasure(self.immigrant / z, self.labels, self.masses / z)


# the cemetery state of the ratio process
DELTA = None


# --- exact one-sided stable increments ----------------------------------------

def positive_stable(a: float, size, rng: np.random.Generator) -> np.ndarray:
    """Standard positive ``a``-stable variables, ``E exp(-l X) = exp(-l**a)``.

    Kanter's exponential-uniform representation of the Chambers-Mallows-Stuck
    construction, valid for ``0 < a < 1``.
    """
    u = rng.uniform(0.0, np.pi, size)
    e = rng.exponential(1.0, size)
    return (np.sin(a * u) / np.sin(u) ** (1.0 / a)
            * (np.sin((1.0 - a) * u) / e) ** ((1.0 - a) / a))


def stable_immigration(mech: StableCase, h, rng: np.random.Generator) -> np.ndarray:
    """Increments over durations ``h`` of the subordinator with Levy measure
    ``cprime x**(-alpha) dx``; its Laplace exponent is ``phi``."""
    h = np.asarray(h, dtype=float)
    a = mech.alpha - 1.0
    rate = mech.dprime * mech.alpha
    return (rate * h) ** (1.0 / a) * positive_stable(a, h.shape, rng)


# --- single steps on arrays of independent populations -------------------------

def feller_step(mech: FellerCase, y: np.ndarray, dt: float,
                rng: np.random.Generator, immigration: bool = True) -> np.ndarray:
    """Exact transition of the Feller CBI over ``dt`` for every entry of ``y``."""
    beta = mech.beta if immigration else 0.0
    if mech.sigma2 == 0:
        return y + beta * dt
    u = 0.5 * mech.sigma2 * np.asarray(dt, dtype=float)
    n = rng.poisson(y / u)
    out = rng.gamma(n, u)
    if beta > 0:
        out = out + rng.gamma(2.0 * beta / mech.sigma2, u, size=np.shape(y))
    return out


def stable_substep(mech: StableCase, y: np.ndarray, h: np.ndarray, eps_trunc: float,
                   rng: np.random.Generator, immigration: bool = True):
    """One splitting substep of length ``h`` (entrywise) of the stable scheme.

    Returns ``(new, reproduction_jumps, immigration_increment)``.  Entries
    below ``STABLE_FLOOR`` are treated as extinct and only receive immigration.
    """
    a, c = mech.alpha, mech.c
    h = np.broadcast_to(np.asarray(h, dtype=float), y.shape)
    dead = y < STABLE_FLOOR
    new = np.where(dead, 0.0, y)
    big = np.zeros(y.size)
    if c > 0:
        live = np.flatnonzero(~dead)
        yl, hl = y[live], h[live]
        eps = eps_trunc * yl
        drift = yl * hl * c * eps ** (1.0 - a) / (a - 1.0)
        var = yl * hl * c * eps ** (2.0 - a) / (2.0 - a)
        cont = np.maximum(yl - drift + np.sqrt(var) * rng.standard_normal(yl.size), 0.0)
        counts = rng.poisson(yl * hl * c * eps ** (-a) / a)
        total = int(counts.sum())
        jumps = np.zeros(yl.size)
        if total:
            owner = np.repeat(np.arange(yl.size), counts)
            sizes = np.repeat(eps, counts) * rng.uniform(size=total) ** (-1.0 / a)
            jumps = np.bincount(owner, weights=sizes, minlength=yl.size)
        new[live] = cont + jumps
        big[live] = jumps
    imm = np.zeros(y.size)
    if immigration and mech.cprime > 0:
        imm = stable_immigration(mech, h, rng)
        new = new + imm
    return new, big, imm


def substep_length(mech: Mechanism, y: np.ndarray, dt,
                   min_scale=STABLE_FLOOR, max_scale: float = 1.0) -> np.ndarray:
    """Self-similar substep ``dt * y**(alpha-1)`` with ``y`` clipped to
    ``[min_scale, max_scale]``."""
    return dt * np.minimum(np.maximum(y, min_scale), max_scale) ** (mech.alpha - 1.0)


def stable_advance(mech: StableCase, y: np.ndarray, dt: float, eps_trunc: float,
                   rng: np.random.Generator, immigration: bool = True,
                   record: bool = False, min_scale=STABLE_FLOOR, base=None,
                   max_scale: float = 1.0):
    """Advance every entry of ``y`` by exactly ``dt`` (scalar or per entry)
    with adaptive substeps ``base * min(1, y)**(alpha-1)``.

    ``base`` defaults to ``dt``.  ``y`` is clipped to ``[min_scale, max_scale]``
    in the substep rule (``min_scale`` may be given per entry).  Returns the new values; with
    ``record=True`` also returns the per-entry totals of reproduction jumps
    and immigration increments, and the left limit at the end of the step.
    """
    y = np.array(y, dtype=float)
    rep_tot = np.zeros_like(y)
    imm_tot = np.zeros_like(y)
    left = y.copy()
    remaining = np.array(np.broadcast_to(np.asarray(dt, dtype=float), y.shape))
    dt = remaining.copy()
    base = dt if base is None else np.broadcast_to(np.asarray(base, dtype=float), y.shape)
    floor = np.broadcast_to(np.asarray(min_scale, dtype=float), y.shape)
    active = np.flatnonzero(remaining > 0)
    while active.size:
        yi = y[active]
        # below the floor there is nothing left to branch: finish the step
        h = np.where(yi < STABLE_FLOOR, remaining[active],
                     np.minimum(remaining[active], substep_length(mech, yi, base[active], floor[active], max_scale)))
        new, big, imm = stable_substep(mech, yi, h, eps_trunc, rng, immigration)
        y[active] = new
        remaining[active] -= h
        done = remaining[active] <= 1e-15 * dt[active]
        if record:
            rep_tot[active] += big
            imm_tot[active] += imm
            jump = big + imm
            left[active[done]] = np.maximum(new[done] - jump[done], 0.0)
        active = active[~done]
    if record:
        return y, rep_tot, imm_tot, left
    return y


def advance(mech: Mechanism, y: np.ndarray, dt: float, rng: np.random.Generator,
            eps_trunc: float = 0.01, immigration: bool = True) -> np.ndarray:
    """One grid step for either case."""
    if isinstance(mech, FellerCase):
        return feller_step(mech, y, dt, rng, immigration)
    return stable_advance(mech, y, dt, eps_trunc, rng, immigration)


def _grid(horizon: float, dt: float) -> np.ndarray:
    if dt <= 0 or horizon < dt:
        raise ValueError("need dt > 0 and horizon >= dt")
    n = int(round(horizon / dt))
    return dt * np.arange(n + 1)


def _check_stable(mech, eps_trunc):
    if not isinstance(mech, StableCase):
        raise TypeError("stable simulator needs a StableCase mechanism")
    if not 0 < eps_trunc < 1:
        raise ValueError("eps_trunc must lie in (0, 1)")


# --- path-level simulators ----------------------------------------------------

def sim_feller_cbi(mech: FellerCase, x0: float, horizon: float, dt: float,
                   rng: np.random.Generator) -> PathGrid:
    if not isinstance(mech, FellerCase):
        raise TypeError("sim_feller_cbi needs a FellerCase mechanism")
    times = _grid(horizon, dt)
    vals = np.empty(times.size)
    vals[0] = x0
    y = np.array([float(x0)])
    absorbed = None
    for i in range(1, times.size):
        y = feller_step(mech, y, dt, rng)
        vals[i] = y[0]
        if absorbed is None and mech.beta == 0 and y[0] == 0:
            absorbed = times[i]
    return PathGrid(times, vals, absorbed_at=absorbed)


def sim_stable_cbi(mech: StableCase, x0: float, horizon: float, dt: float,
                   eps_trunc: float, rng: np.random.Generator) -> PathGrid:
    _check_stable(mech, eps_trunc)
    times = _grid(horizon, dt)
    vals = np.empty(times.size)
    left = np.empty(times.size)
    vals[0] = left[0] = x0
    y = np.array([float(x0)])
    jumps = []
    absorbed = None
    for i in range(1, times.size):
        y, rep, imm, lft = stable_advance(mech, y, dt, eps_trunc, rng, record=True)
        vals[i], left[i] = y[0], lft[0]
        if rep[0] > 0:
            jumps.append((float(times[i]), float(rep[0]), REPRODUCTION))
        if imm[0] > 0:
            jumps.append((float(times[i]), float(imm[0]), IMMIGRATION))
        if absorbed is None and mech.cprime == 0 and y[0] == 0:
            absorbed = times[i]
    return PathGrid(times, vals, jumps, absorbed, left)


def sim_cbi_batch(mech: Mechanism, x0: float, times: Sequence[float], n_paths: int,
                  seed: int, eps_trunc: float = 0.01, dt: float = 0.01,
                  tag: int = 0) -> np.ndarray:
    """Values at ``times`` of ``n_paths`` independent CBI paths.

    Returns an array of shape ``(n_paths, len(times))``.  Output times are
    reached exactly; steps in between are at most ``dt``.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be non-negative and sorted")
    out = np.empty((n_paths, times.size))
    sim_tag = streams.TAG_FELLER if isinstance(mech, FellerCase) else streams.TAG_STABLE
    for j, sl in streams.blocks(n_paths):
        rng = streams.stream(seed, sim_tag, tag, j)
        y = np.full(sl.stop - sl.start, float(x0))
        t = 0.0
        for k, target in enumerate(times):
            while target - t > 1e-12:
                h = min(dt, target - t)
                y = advance(mech, y, h, rng, eps_trunc)
                t += h
            t = target
            out[sl, k] = y
    return out


# --- the measure-valued flow ---------------------------------------------------

def cell_labels(k: int) -> np.ndarray:
    return np.arange(1, k + 1) / k


def initial_flow(n_paths: int, k: int) -> np.ndarray:
    """Components ``[Y(0), cell_1, ..., cell_k]`` at time 0: no immigrant mass
    and Lebesgue measure on (0, 1] cut into ``k`` cells."""
    if k < 1:
        raise ValueError("need at least one cell")
    comp = np.zeros((n_paths, k + 1))
    comp[:, 1:] = 1.0 / k
    return comp


# Substeps of flow components stop shrinking below this mass; such
# components carry a negligible share of the measure.
FLOW_MIN_SCALE = 1e-4


def flow_step(mech: Mechanism, comp: np.ndarray, dt: float,
              rng: np.random.Generator, eps_trunc: float = 0.01,
              with_left: bool = False):
    """Advance flow components by ``dt``.  Column 0 is the CBI started at 0
    (immigration on); the other columns are independent CBs.

    With ``with_left=True`` also returns the left limits of the components
    at the end of the step.
    """
    n = comp.shape[0]
    if isinstance(mech, FellerCase):
        out = np.empty_like(comp)
        out[:, 0] = feller_step(mech, comp[:, 0], dt, rng, immigration=True)
        out[:, 1:] = feller_step(mech, comp[:, 1:].ravel(), dt, rng,
                                 immigration=False).reshape(n, -1)
        return (out, out) if with_left else out
    _check_stable(mech, eps_trunc)
    col0 = stable_advance(mech, comp[:, 0], dt, eps_trunc, rng, immigration=True,
                          record=True, min_scale=FLOW_MIN_SCALE)
    cells = stable_advance(mech, comp[:, 1:].ravel(), dt, eps_trunc, rng, immigration=False,
                           record=True, min_scale=FLOW_MIN_SCALE)
    out = np.column_stack((col0[0], cells[0].reshape(n, -1)))
    if not with_left:
        return out
    left = np.column_stack((col0[3], cells[3].reshape(n, -1)))
    return out, left


def sim_flow(mech: Mechanism, k: int, horizon: float, dt: float,
             eps_trunc: float, rng: np.random.Generator) -> list[AtomicMeasure]:
    """One realisation of the flow on the grid ``0, dt, ..., horizon``."""
    times = _grid(horizon, dt)
    labels = cell_labels(k)
    comp = initial_flow(1, k)
    out = [AtomicMeasure(comp[0, 0], labels, comp[0, 1:].copy())]
    for _ in times[1:]:
        comp = flow_step(mech, comp, dt, rng, eps_trunc)
        out.append(AtomicMeasure(comp[0, 0], labels, comp[0, 1:].copy()))
    return out


def ratio_process(measures: Iterable[AtomicMeasure]) -> list[Optional[AtomicMeasure]]:
    """Normalise each measure; once the total mass hits 0 the ratio process
    stays in the cemetery state ``DELTA`` (``None``)."""
    out = []
    dead = False
    for m in measures:
        dead = dead or m.total <= 0
        out.append(DELTA if dead else m.normalized())
    return out


# --- time change -----------------------------------------------------------------

def time_change_C(path: PathGrid, alpha: float, t: float) -> float:
    """``int_0^t Y_s^(1-alpha) ds`` by the trapezoid rule on the grid.

    The right end of each step uses the left limit ``Y_{s-}``.  Returns
    ``inf`` once the path is absorbed.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    if path.absorbed_at is not None and t >= path.absorbed_at:
        return math.inf
    if t > path.horizon + 1e-12:
        raise ValueError(f"t={t} beyond simulated horizon {path.horizon}; extend horizon")
    cum = cumulative_C(path, alpha)
    return float(np.interp(t, path.times, cum))


def cumulative_C(path: PathGrid, alpha: float) -> np.ndarray:
    """``C`` at every grid time (``inf`` from the absorption time on)."""
    y = path.values
    yl = path.left_limits()
    with np.errstate(divide="ignore"):
        f_start = y[:-1] ** (1.0 - alpha)
        f_end = yl[1:] ** (1.0 - alpha)
    inc = 0.5 * (f_start + f_end) * np.diff(path.times)
    cum = np.concatenate(([0.0], np.cumsum(inc)))
    if path.absorbed_at is not None:
        cum[path.times >= path.absorbed_at] = math.inf
    return cum


def inverse_C(path: PathGrid, alpha: float, s: float) -> float:
    """Smallest grid time ``t`` with ``C(t) >= s``."""
    if s < 0:
        raise ValueError("s must be non-negative")
    cum = cumulative_C(path, alpha)
    idx = int(np.searchsorted(cum, s, side="left"))
    if idx >= cum.size:
        raise ValueError(f"C(horizon)={cum[-1]:.4g} < {s}; extend horizon")
    return float(path.times[idx])


# --- absorption --------------------------------------------------------------------

def absorption_step(values: np.ndarray, eps_abs: float) -> np.ndarray:
    """First grid index at which a path is declared absorbed, or -1.

    ``values`` has shape ``(n_paths, n_times)``.  A path is absorbed at the
    first index ``i`` with ``Y_i < eps_abs`` whose next step, immigration
    included, fails to lift it back above ``eps_abs``.
    """
    below = values < eps_abs
    both = below[:, :-1] & below[:, 1:]
    hit = both.any(axis=1)
    return np.where(hit, both.argmax(axis=1), -1)


def absorbed_path(path: PathGrid, eps_abs: float) -> PathGrid:
    """Copy of ``path`` with the absorption time set and zero mass after it."""
    i = int(absorption_step(path.values[None, :], eps_abs)[0])
    if i < 0:
        return path
    vals = path.values.copy()
    vals[i:] = 0.0
    t = float(path.times[i])
    return PathGrid(path.times, vals, [j for j in path.jumps if j[0] < t], t)


@dataclass
class HittingStats:
    frequency: float
    ci_low: float
    ci_high: float
    n_paths: int
    n_hit: int


def hitting_zero_stats(mech: Mechanism, x0: float, horizon: float, dt: float,
                       eps_abs: float, n_paths: int, seed: int,
                       eps_trunc: float = 0.1, tag: int = 0) -> HittingStats:
    """Fraction of paths absorbed before ``horizon``, with a 99%
    normal-approximation interval.

    Every path runs on its own clock with the self-similar substep
    ``dt * min(1, y)**(alpha-1)`` (``alpha = 2`` in the Feller case, whose
    transitions are exact for any step), so excursions towards zero are
    observed at their natural time scale instead of being stepped over.  A
    path is absorbed at the first observation below ``eps_abs`` whose next
    step, immigration included, leaves it below ``eps_abs``.
    """
    if eps_abs <= 0:
        raise ValueError("eps_abs must be positive")
    if dt <= 0 or horizon < dt:
        raise ValueError("need dt > 0 and horizon >= dt")
    stable = isinstance(mech, StableCase)
    n_hit = 0
    for j, sl in streams.blocks(n_paths):
        rng = streams.stream(seed, streams.TAG_HITTING, tag, j)
        n = sl.stop - sl.start
        y = np.full(n, float(x0))
        clock = np.zeros(n)
        prev_below = y < eps_abs
        hit = np.zeros(n, dtype=bool)
        live = np.arange(n)
        while live.size:
            yl = y[live]
            h = np.minimum(horizon - clock[live], substep_length(mech, yl, dt))
            if stable:
                yl = stable_substep(mech, yl, h, eps_trunc, rng)[0]
            else:
                yl = feller_step(mech, yl, h, rng)
            y[live] = yl
            clock[live] += h
            below = yl < eps_abs
            hit[live] = prev_below[live] & below
            prev_below[live] = below
            live = live[~hit[live] & (clock[live] < horizon * (1 - 1e-12))]
        n_hit += int(hit.sum())
    p = n_hit / n_paths
    half = stats.norm.ppf(0.995) * math.sqrt(max(p * (1 - p), 0.0) / n_paths)
    return HittingStats(p, max(0.0, p - half), min(1.0, p + half), n_paths, n_hit)


# --- flows under the time change, many paths at once -----------------------------

@dataclass
class FlowTimeChange:
    """Per-path observables of the flow and its time change.

    ``moments_at_s[i, j, l]`` is ``R({0})**p_values[l]`` at ``C^{-1}(s_values[j])``,
    interpolated linearly between the grid times around the crossing;
    ``r0_at_s`` is the same for ``p = 1``.  ``resolved[i, j]`` is False when
    path ``i`` had not reached ``C = s_values[j]`` by ``max_horizon``.
    ``c_at_t`` and ``r0_at_t`` are ``C(t)`` and ``R_t({0})`` at ``t_values``.
    """

    s_values: np.ndarray
    t_values: np.ndarray
    p_values: tuple
    moments_at_s: np.ndarray
    r0_at_s: np.ndarray
    resolved: np.ndarray
    c_at_t: np.ndarray
    r0_at_t: np.ndarray


def flow_time_change(mech: Mechanism, k: int, n_paths: int, seed: int,
                     s_values: Sequence[float] = (), t_values: Sequence[float] = (),
                     p_values: Sequence[int] = (1,), dt: float = 0.01,
                     eps_trunc: float = 0.01, max_horizon: float = 1e9,
                     tag: int = 0) -> FlowTimeChange:
    """Simulate ``n_paths`` flows with ``k`` cells and observe the ratio
    process at the time-changed times ``C^{-1}(s)`` and at fixed times ``t``.

    Every path runs on its own clock with steps ``dt * Y**(alpha-1)`` (``Y``
    the total mass), cut so that each fixed time is hit exactly.  The
    increment of ``C`` over a step is then of order ``dt`` whatever the size
    of ``Y``, so the number of steps needed to reach ``C = s`` does not grow
    with ``Y``.  ``C`` is integrated by the trapezoid rule with the left
    limit at the right end of the step.
    """
    s_values = np.asarray(s_values, dtype=float)
    t_values = np.asarray(t_values, dtype=float)
    p_values = tuple(int(p) for p in p_values)
    if np.any(s_values < 0) or np.any(t_values < 0):
        raise ValueError("observation times must be non-negative")
    if t_values.size and t_values.max() > max_horizon:
        raise ValueError("fixed observation times exceed max_horizon")
    a = mech.alpha
    ns, nt, npw = s_values.size, t_values.size, len(p_values)
    mom = np.full((n_paths, ns, npw), np.nan)
    r0s = np.full((n_paths, ns), np.nan)
    resolved = np.zeros((n_paths, ns), dtype=bool)
    cat = np.full((n_paths, nt), np.nan)
    r0t = np.full((n_paths, nt), np.nan)
    t_sorted = np.sort(np.unique(t_values))
    for j, sl in streams.blocks(n_paths):
        rng = streams.stream(seed, streams.TAG_FLOW, tag, j)
        n = sl.stop - sl.start
        comp = initial_flow(n, k)
        C = np.zeros(n)
        R = np.zeros(n)          # R({0}) at the current clock
        clock = np.zeros(n)
        Y = comp.sum(axis=1)
        pending_s = np.ones((n, ns), dtype=bool)
        pending_t = np.ones((n, nt), dtype=bool)
        # observations at time zero
        for js in np.flatnonzero(s_values == 0):
            mom[sl.start:sl.stop, js] = 0.0
            r0s[sl.start:sl.stop, js] = 0.0
            resolved[sl.start:sl.stop, js] = True
            pending_s[:, js] = False
        for jt in np.flatnonzero(t_values == 0):
            cat[sl.start:sl.stop, jt] = 0.0
            r0t[sl.start:sl.stop, jt] = 0.0
            pending_t[:, jt] = False
        while True:
            live = np.flatnonzero((pending_s.any(axis=1) | pending_t.any(axis=1))
                                  & (clock < max_horizon * (1 - 1e-12)))
            if live.size == 0:
                break
            ck = clock[live]
            # next fixed time still ahead of each clock
            nxt_idx = np.searchsorted(t_sorted, ck, side="right") if nt else None
            bound = np.full(live.size, float(max_horizon))
            if nt:
                ahead = nxt_idx < t_sorted.size
                bound[ahead] = np.minimum(bound[ahead], t_sorted[nxt_idx[ahead]])
            with np.errstate(divide="ignore"):
                h = np.minimum(bound - ck,
                               dt * np.maximum(Y[live], STABLE_FLOOR) ** (a - 1.0))
            new, left = _flow_substep(mech, comp[live], h, rng, eps_trunc, dt)
            Yn = new.sum(axis=1)
            Yl = left.sum(axis=1)
            # a zero left limit only arises when the whole mass arrived by a
            # jump in the final substep; fall back to the value after it
            Yl = np.where(Yl > 0, Yl, Yn)
            with np.errstate(divide="ignore"):
                inc = 0.5 * (Y[live] ** (1.0 - a) + Yl ** (1.0 - a)) * h
            Cn = C[live] + inc
            with np.errstate(invalid="ignore", divide="ignore"):
                Rn = np.where(Yn > 0, new[:, 0] / Yn, 1.0)
            for js in range(ns):
                cross = pending_s[live, js] & (Cn >= s_values[js])
                if cross.any():
                    idx = live[cross]
                    c0, c1 = C[idx], Cn[cross]
                    with np.errstate(invalid="ignore"):
                        theta = np.where(np.isfinite(c1) & (c1 > c0),
                                         (s_values[js] - c0) / (c1 - c0), 1.0)
                    r_lo, r_hi = R[idx], Rn[cross]
                    for l, p in enumerate(p_values):
                        mom[idx + sl.start, js, l] = (1 - theta) * r_lo**p + theta * r_hi**p
                    r0s[idx + sl.start, js] = (1 - theta) * r_lo + theta * r_hi
                    resolved[idx + sl.start, js] = True
                    pending_s[idx, js] = False
            newclock = ck + h
            for jt in range(nt):
                hit = pending_t[live, jt] & (newclock >= t_values[jt] * (1 - 1e-12))
                if hit.any():
                    idx = live[hit]
                    cat[idx + sl.start, jt] = Cn[hit]
                    r0t[idx + sl.start, jt] = Rn[hit]
                    pending_t[idx, jt] = False
            comp[live], C[live], R[live], Y[live] = new, Cn, Rn, Yn
            clock[live] = newclock
    return FlowTimeChange(s_values, t_values, p_values, mom, r0s, resolved, cat, r0t)


def _flow_substep(mech: Mechanism, comp: np.ndarray, h: np.ndarray,
                  rng: np.random.Generator, eps_trunc: float, base: float):
    """Advance flow rows by per-row durations ``h``; returns values and left limits.

    In the stable case a component's own substeps stop shrinking once it
    holds less than ``FLOW_MIN_SCALE`` of its row's total mass.
    """
    n, width = comp.shape
    hh = np.repeat(h, width - 1)
    floor = FLOW_MIN_SCALE * comp.sum(axis=1)
    if isinstance(mech, FellerCase):
        col0 = feller_step(mech, comp[:, 0], h, rng, immigration=True)
        cells = feller_step(mech, comp[:, 1:].ravel(), hh, rng, immigration=False)
        out = np.column_stack((col0, cells.reshape(n, -1)))
        return out, out
    _check_stable(mech, eps_trunc)
    c0 = stable_advance(mech, comp[:, 0], h, eps_trunc, rng, immigration=True,
                        record=True, min_scale=floor, base=base, max_scale=np.inf)
    cl = stable_advance(mech, comp[:, 1:].ravel(), hh, eps_trunc, rng, immigration=False,
                        record=True, min_scale=np.repeat(floor, width - 1), base=base,
                        max_scale=np.inf)
    out = np.column_stack((c0[0], cl[0].reshape(n, -1)))
    left = np.column_stack((c0[3], cl[3].reshape(n, -1)))
    return out, left


# --- CSV dumps -----------------------------------------------------------------------

def write_paths_csv(fh, paths: Sequence[PathGrid]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path_id", "time", "value", "absorbed"])
    for pid, p in enumerate(paths):
        for t, v in zip(p.times, p.values):
            absorbed = int(p.absorbed_at is not None and t >= p.absorbed_at)
            w.writerow([pid, repr(float(t)), repr(float(v)), absorbed])


def write_measures_csv(fh, runs: Sequence[Sequence[AtomicMeasure]], times: Sequence[float]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path_id", "time", "atom_label", "mass"])
    for pid, run in enumerate(runs):
        for t, m in zip(times, run):
            w.writerow([pid, repr(float(t)), "0", repr(float(m.immigrant))])
            for lab, mass in zip(m.labels, m.masses):
                w.writerow([pid, repr(float(t)), repr(float(lab)), repr(float(mass))])
