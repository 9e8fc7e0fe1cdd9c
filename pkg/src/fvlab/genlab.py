"""Deterministic checks of the generator calculus linking CBI flows and M-GFVIs.

Test functionals are ``F(eta) = psi(z) <phi, rho>^m`` with ``z = |eta|`` and
``rho = eta / z``.  Two independent computations are compared:

* :func:`apply_L` evaluates the generator of the measure-valued branching
  process.  The jump terms are integrals in the jump size ``h`` against
  the stable Levy measures, done with QUADPACK's algebraic-weight rule on
  ``(0, z]`` and the inversion ``h = z / w`` on ``(z, inf)``.
* :func:`apply_Fgen` evaluates the M-GFVI generator, whose jump terms are
  integrals in the proportion ``r`` against Beta densities, done with
  :func:`fvlab.quadrature.beta_integral`.

The two sides only meet through the identities being tested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import integrate

from . import streams
from .cbi_sim import AtomicMeasure
from .mechanisms import (CoalescentM, FellerCase, Mechanism, StableCase, phi as phi_mech,
                         psi as psi_mech, theorem1_correspondence)
from .quadrature import QuadratureError, beta_integral

GATEAUX_TOL = 1e-6
MASS_WEIGHTED_TOL = 1e-10
FACTORIZATION_TOL = 1e-6
PUSHFORWARD_TOL = 1e-8


# --- measures ------------------------------------------------------------------

@dataclass(frozen=True)
class Atoms:
    """A finite atomic measure ``sum_i w_i delta_{x_i}`` on [0, 1]."""

    x: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))
        if self.x.shape != self.w.shape:
            raise ValueError("locations and masses must have the same shape")

    @classmethod
    def from_measure(cls, m: AtomicMeasure) -> "Atoms":
        x, w = m.points()
        return cls(x, w)

    @property
    def z(self) -> float:
        return float(self.w.sum())

    def add(self, a: float, eps: float) -> "Atoms":
        """``eta + eps delta_a`` (``eps`` may be negative)."""
        return Atoms(np.append(self.x, a), np.append(self.w, eps))

    def normalized(self) -> "Atoms":
        z = self.z
        if z <= 0:
            raise ValueError("total mass must be positive")
        return Atoms(self.x, self.w / z)


# --- test functions ---------------------------------------------------------------

class PiecewiseLinear:
    """Continuous piecewise-linear map on equally spaced nodes of [0, 1]."""

    def __init__(self, values: Sequence[float]):
        self.values = np.asarray(values, dtype=float)
        self.nodes = np.linspace(0.0, 1.0, self.values.size)

    def __call__(self, x):
        return np.interp(x, self.nodes, self.values)

    def __repr__(self):
        return f"PiecewiseLinear({self.values.size - 1} cells)"


class Monomial:
    def __init__(self, k: int):
        self.k = k

    def __call__(self, x):
        return np.asarray(x, dtype=float) ** self.k

    def __repr__(self):
        return f"Monomial({self.k})"


class Constant:
    def __init__(self, value: float = 1.0):
        self.value = value

    def __call__(self, x):
        return np.full(np.shape(x), self.value, dtype=float)

    def __repr__(self):
        return f"Constant({self.value})"


class IndicatorZero:
    """``1_{x = 0}``, the immigrant-type indicator."""

    def __call__(self, x):
        return (np.asarray(x) == 0).astype(float)

    def __repr__(self):
        return "IndicatorZero()"


class ConstantPsi:
    """``psi = 1``: the functional then depends on ``rho`` only."""

    def value(self, z):
        return 1.0

    def d1(self, z):
        return 0.0

    def d2(self, z):
        return 0.0

    def diff(self, z, h):
        # psi(z + h) - psi(z)
        return 0.0

    def diff2(self, z, h):
        # psi(z + h) - psi(z) - h psi'(z)
        return 0.0


def _exp_remainder(x: float) -> float:
    """``exp(-x) - 1 + x`` without cancellation for small ``x``."""
    if abs(x) < 0.1:
        # sum_{k>=2} (-x)^k / k!
        term = x * x / 2.0
        total = term
        for k in range(3, 14):
            term *= -x / k
            total += term
        return total
    return math.expm1(-x) + x


@dataclass(frozen=True)
class ExpPsi:
    """``psi(z) = exp(-q z)``."""

    q: float

    def value(self, z):
        return math.exp(-self.q * z)

    def d1(self, z):
        return -self.q * math.exp(-self.q * z)

    def d2(self, z):
        return self.q**2 * math.exp(-self.q * z)

    def diff(self, z, h):
        return math.exp(-self.q * z) * math.expm1(-self.q * h)

    def diff2(self, z, h):
        return math.exp(-self.q * z) * _exp_remainder(self.q * h)


@dataclass
class TestFunctional:
    """``F(eta) = psi(|eta|) <phi, eta/|eta|>^m``."""

    phi: Callable
    m: int
    psi: object = field(default_factory=ConstantPsi)

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")

    def pair(self, eta: Atoms) -> float:
        """``<phi, rho>``."""
        return float(np.dot(self.phi(eta.x), eta.w) / eta.z)

    def __call__(self, eta: Atoms) -> float:
        z = eta.z
        if z <= 0:
            raise ValueError("F is defined for eta with positive mass")
        return self.psi.value(z) * self.pair(eta) ** self.m


# --- Gateaux derivatives --------------------------------------------------------------

def gateaux(F: TestFunctional, eta: Atoms, a: float) -> float:
    """Closed-form ``F'(eta; a)``."""
    z = eta.z
    if z <= 0:
        raise ValueError("Gateaux derivative needs positive total mass")
    p, m = F.pair(eta), F.m
    fa = float(F.phi(a))
    return F.psi.d1(z) * p**m + F.psi.value(z) * m / z * (fa * p ** (m - 1) - p**m)


def gateaux2(F: TestFunctional, eta: Atoms, a: float, b: float) -> float:
    """Closed-form ``F''(eta; a, b)``."""
    z = eta.z
    if z <= 0:
        raise ValueError("Gateaux derivative needs positive total mass")
    p, m = F.pair(eta), F.m
    fa, fb = float(F.phi(a)), float(F.phi(b))
    pm2 = p ** (m - 2) if m >= 2 else 0.0
    return (F.psi.d2(z) * p**m
            + F.psi.d1(z) * m / z * ((fa + fb) * p ** (m - 1) - 2.0 * p**m)
            + F.psi.value(z) * m / z**2 * ((m - 1) * fa * fb * pm2
                                           - m * (fa + fb) * p ** (m - 1)
                                           + (m + 1) * p**m))


def gateaux_fd(F: TestFunctional, eta: Atoms, a: float, rel_step: float = 1e-6) -> float:
    """Central finite difference of ``F`` along ``delta_a`` with step
    ``rel_step * |eta|``."""
    eps = rel_step * eta.z
    return (F(eta.add(a, eps)) - F(eta.add(a, -eps))) / (2.0 * eps)


def gateaux_deviation(F: TestFunctional, eta: Atoms, a: float) -> float:
    """Finite-difference error of :func:`gateaux`, relative to the natural
    scale ``max(|F'|, (|psi(z)|/z + |psi'(z)|) sup|phi|^m)`` of the
    derivative (a plain relative error is meaningless where ``F'``
    vanishes)."""
    cf = gateaux(F, eta, a)
    fd = gateaux_fd(F, eta, a)
    z = eta.z
    sup = float(np.max(np.abs(F.phi(np.concatenate((np.linspace(0.0, 1.0, 257), eta.x, [a]))))))
    natural = (abs(F.psi.value(z)) / z + abs(F.psi.d1(z))) * sup**F.m
    scale = max(abs(cf), natural, 1e-300)
    return abs(cf - fd) / scale


def mass_weighted_residual(F: TestFunctional, eta: Atoms) -> float:
    """``int F'(eta; a) eta(da)``, which vanishes when ``psi`` is constant."""
    return float(sum(w * gateaux(F, eta, a) for a, w in zip(eta.x, eta.w)))


# --- jump integrals in h --------------------------------------------------------------

def _quad_alg(f, lo, hi, expo, what, scale=1.0, epsrel=1e-12):
    # integral of f(x) (x - lo)^expo on (lo, hi): QUADPACK qaws.  ``scale`` is
    # the natural magnitude of the integral, used as an absolute floor so
    # that integrands vanishing up to rounding are accepted.
    val, err = integrate.quad(f, lo, hi, weight="alg", wvar=(expo, 0.0),
                              epsabs=1e-15 * scale, epsrel=epsrel, limit=400,
                              full_output=1)[:2]
    if abs(err) > 1e-9 * abs(val) + 1e-13 * scale:
        raise QuadratureError(f"{what}: value={val!r}, error estimate={err!r}")
    return val


def levy_integral(g: Callable[[float], float], z: float, index: float, order: int,
                  growth: int = 0, what: str = "levy_integral", scale: float = 1.0) -> float:
    """``int_0^inf g(h) h^(-1-index) dh`` for ``g`` vanishing to ``order`` at 0
    and growing like ``h^growth`` at infinity (``growth < index``).

    ``(0, z]`` integrates ``g(h)/h^order`` against the weight
    ``h^(order-1-index)``; ``(z, inf)`` is mapped to ``(0, 1)`` by
    ``h = z / w`` and integrates ``g(z/w) w^growth`` against
    ``w^(index-1-growth)``.  Both are QUADPACK algebraic-weight rules, so
    the integrands handed to them are smooth.
    """
    if not order - 1.0 - index > -1.0 or not index - 1.0 - growth > -1.0:
        raise ValueError("Levy integral diverges for these orders")

    def near(h):
        h = max(h, 1e-9 * z)
        return g(h) / h**order

    def tail(w):
        w = max(w, 1e-12)
        return g(z / w) * w**growth

    lo = _quad_alg(near, 0.0, z, order - 1.0 - index, what + "[near]", scale)
    hi = _quad_alg(tail, 0.0, 1.0, index - 1.0 - growth, what + "[tail]", scale * z**index)
    return lo + z ** (-index) * hi


# --- the branching-process generator ---------------------------------------------------

def _binom(m, j):
    return math.comb(m, j)


def apply_L(mech: Mechanism, F: TestFunctional, eta: Atoms) -> float:
    """Generator of the measure-valued CBI applied to ``F`` at ``eta``."""
    z = eta.z
    if z <= 0:
        raise ValueError("apply_L needs positive total mass")
    if isinstance(mech, FellerCase):
        second = sum(w * gateaux2(F, eta, a, a) for a, w in zip(eta.x, eta.w))
        return 0.5 * mech.sigma2 * second + mech.beta * gateaux(F, eta, 0.0)
    return _reproduction_jumps(mech, F, eta) + _immigration_jumps(mech, F, eta)


def _jump_parts(F: TestFunctional, eta: Atoms):
    z, m = eta.z, F.m
    p = F.pair(eta)
    rho = eta.w / z
    delta = F.phi(eta.x) - p
    return z, m, p, rho, delta


def _reproduction_jumps(mech: StableCase, F: TestFunctional, eta: Atoms) -> float:
    """``int eta(da) int nu1hat(dh) [F(eta + h delta_a) - F(eta) - h F'(eta; a)]``."""
    if mech.c == 0:
        return 0.0
    z, m, p, rho, delta = _jump_parts(F, eta)
    psi = F.psi
    psi_z = psi.value(z)

    def g(h):
        r = h / (z + h)
        rd = r * delta
        # E = (p + r delta)^m - p^m and its part of order >= 2 in r delta
        e1 = m * rd * p ** (m - 1)
        e2 = sum(_binom(m, j) * rd**j * p ** (m - j) for j in range(2, m + 1)) \
            if m >= 2 else 0.0 * rd
        e = e1 + e2
        val = (psi.diff2(z, h) * p**m + psi.diff(z, h) * e
               + psi_z * (-m * delta * p ** (m - 1) * r * h / z + e2))
        return float(np.dot(rho, val)) * z

    size = max(1.0, abs(p), float(np.max(np.abs(delta)))) ** m
    scale = z ** (1.0 - mech.alpha) * size * (abs(psi_z) + z * abs(psi.d1(z)) + z * z * abs(psi.d2(z)))
    return mech.c * levy_integral(g, z, mech.alpha, 2, 1, "reproduction term", scale)


def _immigration_jumps(mech: StableCase, F: TestFunctional, eta: Atoms) -> float:
    """``int nu0hat(dh) [F(eta + h delta_0) - F(eta)]``."""
    if mech.cprime == 0:
        return 0.0
    z, m = eta.z, F.m
    p = F.pair(eta)
    d0 = float(F.phi(0.0)) - p
    psi = F.psi
    psi_z = psi.value(z)

    def g(h):
        r = h / (z + h)
        e = sum(_binom(m, j) * (r * d0) ** j * p ** (m - j) for j in range(1, m + 1))
        return psi.diff(z, h) * (p**m + e) + psi_z * e

    # nu0hat(dh) = c' h^(-alpha) dh = c' h^(-1-(alpha-1)) dh
    size = max(1.0, abs(p), abs(d0)) ** m
    scale = z ** (2.0 - mech.alpha) * size * (abs(psi_z) + z * abs(psi.d1(z)))
    return mech.cprime * levy_integral(g, z, mech.alpha - 1.0, 1, 0, "immigration term", scale)


# --- the M-GFVI generator -----------------------------------------------------------------

def apply_Fgen(M: CoalescentM, G: TestFunctional, rho: Atoms) -> float:
    """M-GFVI generator applied to ``G(rho) = <phi, rho>^m``.

    The Kingman parts are exact finite sums over atoms; the Beta parts are
    Beta-weighted quadratures in ``r``.  ``G.psi`` is ignored.
    """
    rho = rho.normalized()
    m = G.m
    fx = G.phi(rho.x)
    p = float(np.dot(fx, rho.w))
    out = 0.0
    if M.c1 and m >= 2:
        p2 = float(np.dot(fx**2, rho.w))
        out += M.c1 * _binom(m, 2) * (p2 * p ** (m - 2) - p**m)
    f0 = float(G.phi(0.0))
    if M.c0:
        out += M.c0 * m * (f0 * p ** (m - 1) - p**m)
    delta = fx - p
    if M.nu1 is not None and m >= 2:
        # int rho(da) [(p + r delta_a)^m - p^m]: the order-1 term integrates to 0
        mu = [float(np.dot(rho.w, delta**j)) for j in range(m + 1)]
        coef = [_binom(m, j) * mu[j] * p ** (m - j) for j in range(2, m + 1)]

        def g1(r):
            return sum(cj * r ** (j - 2) for j, cj in zip(range(2, m + 1), coef))

        out += M.nu1.scale * beta_integral(g1, M.nu1.a, M.nu1.b)
    if M.nu0 is not None:
        d0 = f0 - p
        coef0 = [_binom(m, j) * d0**j * p ** (m - j) for j in range(1, m + 1)]

        def g0(r):
            return sum(cj * r ** (j - 1) for j, cj in zip(range(1, m + 1), coef0))

        out += M.nu0.scale * beta_integral(g0, M.nu0.a, M.nu0.b)
    return out


# --- randomised suites ------------------------------------------------------------------

N_NODES = 17  # 16 cells


def random_eta(rng: np.random.Generator) -> Atoms:
    """1-10 atoms at uniform locations (one pinned at 0 half the time),
    log-uniform masses on [0.1, 5]."""
    k = int(rng.integers(1, 11))
    x = rng.uniform(0.0, 1.0, k)
    if rng.uniform() < 0.5:
        x[0] = 0.0
    w = np.exp(rng.uniform(math.log(0.1), math.log(5.0), k))
    return Atoms(x, w)


def random_phi(rng: np.random.Generator):
    kind = int(rng.integers(0, 4))
    if kind == 0:
        return Monomial(1)
    if kind == 1:
        return Monomial(2)
    return PiecewiseLinear(rng.uniform(0.0, 1.0, N_NODES))


def random_cases(seed: int, n: int = 50, max_m: int = 4):
    """``n`` pairs ``(eta, TestFunctional)`` with ``psi = 1``."""
    rng = streams.stream(seed, streams.TAG_GENLAB, 0)
    return [(random_eta(rng), TestFunctional(random_phi(rng), int(rng.integers(1, max_m + 1))))
            for _ in range(n)]


def rel_dev(x: float, y: float, floor: float = 1e-12) -> float:
    return abs(x - y) / max(abs(x), abs(y), floor)


@dataclass
class CheckResult:
    name: str
    max_deviation: float
    tolerance: float
    n_cases: int

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance

    def as_dict(self) -> dict:
        return {"check": self.name, "max_deviation": self.max_deviation,
                "tolerance": self.tolerance, "n_cases": self.n_cases,
                "pass": self.passed}


def natural_scale(M: CoalescentM, F: TestFunctional, eta: Atoms) -> float:
    """``sup|phi|^m (Lambda0([0,1]) + Lambda1([0,1]))``: every term of the
    M-GFVI generator is bounded by a small multiple of it."""
    grid = np.concatenate((np.linspace(0.0, 1.0, 257), eta.x))
    sup = float(np.max(np.abs(F.phi(grid))))
    return sup**F.m * (M.lambda0_mass() + M.lambda1_mass())


def factorization_check(mech: Mechanism, cases) -> float:
    """Max relative deviation between ``z^(alpha-1) L F(eta)`` and
    ``F G_f(rho)`` for the M given by :func:`theorem1_correspondence`.

    Deviations are taken relative to the larger side, floored at
    :func:`natural_scale` so that cases whose exact value is 0 are judged
    by their rounding error against the size of the generator terms.
    """
    M = theorem1_correspondence(mech)
    worst = 0.0
    for eta, F in cases:
        lhs = eta.z ** (mech.alpha - 1.0) * apply_L(mech, F, eta)
        rhs = apply_Fgen(M, F, eta)
        worst = max(worst, rel_dev(lhs, rhs, natural_scale(M, F, eta)))
    return worst


def decomposition_check(mech: FellerCase, cases, psi_q: float = 0.7) -> float:
    """Feller case with ``psi(z) = exp(-q z)``: the generator splits as the
    total-mass generator times ``<phi,rho>^m`` plus ``psi(z)/z`` times the
    Fleming-Viot generator.  Returns the max relative deviation."""
    M = theorem1_correspondence(mech)
    psi = ExpPsi(psi_q)
    worst = 0.0
    for eta, F0 in cases:
        F = TestFunctional(F0.phi, F0.m, psi)
        z, p = eta.z, F.pair(eta)
        lhs = apply_L(mech, F, eta)
        mass_part = (z * 0.5 * mech.sigma2 * psi.d2(z) + mech.beta * psi.d1(z)) * p**F.m
        rhs = mass_part + psi.value(z) / z * apply_Fgen(M, F0, eta)
        floor = natural_scale(M, F0, eta) * (psi.value(z) / z + z * abs(psi.d2(z)) + abs(psi.d1(z)))
        worst = max(worst, rel_dev(lhs, rhs, floor))
    return worst


def total_mass_check(mech: Mechanism, zs=(0.5, 1.0, 2.0), qs=(0.5, 1.0, 2.0)) -> float:
    """``L`` applied to ``exp(-q |eta|)`` against ``(z Psi(q) - Phi(q)) e^(-qz)``,
    the time derivative of the Laplace transform at 0."""
    worst = 0.0
    for z in zs:
        eta = Atoms(np.array([0.0, 0.5]), np.array([0.25 * z, 0.75 * z]))
        for q in qs:
            F = TestFunctional(Constant(1.0), 1, ExpPsi(q))
            lhs = apply_L(mech, F, eta)
            rhs = (z * psi_mech(mech, q) - phi_mech(mech, q)) * math.exp(-q * z)
            worst = max(worst, rel_dev(lhs, rhs))
    return worst


# --- pushforward of the Levy measures ----------------------------------------------------

DEFAULT_POLYS = (np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 0.0, 1.0]),
                 np.array([0.0, 0.0, 1.0, -1.0]))


def _check_poly(coef, order):
    coef = np.asarray(coef, dtype=float)
    if np.any(coef[:order] != 0):
        raise ValueError(f"test polynomial must vanish to order {order} at 0")
    return coef


def pushforward_sides(mech: StableCase, z: float, coef, family: str) -> tuple[float, float]:
    """Both sides of the pushforward identity for one ``z`` and polynomial.

    ``family="nu1"``: ``int g(h/(h+z)) nu1hat(dh)`` and
    ``z^(-alpha) int g(r) r^(-2) c Beta(2-alpha, alpha)(dr)``;
    ``family="nu0"``: the immigration analogue with index ``alpha - 1``.
    """
    if z <= 0:
        raise ValueError("z must be positive")
    a = mech.alpha
    if family == "nu1":
        coef = _check_poly(coef, 2)
        lhs = mech.c * levy_integral(lambda h: P.polyval(h / (h + z), coef), z, a, 2, 0,
                                          "nu1 pushforward")
        rhs = z ** (-a) * mech.c * beta_integral(lambda r: P.polyval(r, coef[2:]), 2.0 - a, a)
    elif family == "nu0":
        coef = _check_poly(coef, 1)
        lhs = mech.cprime * levy_integral(lambda h: P.polyval(h / (h + z), coef), z, a - 1.0, 1, 0,
                                          "nu0 pushforward")
        rhs = z ** (1.0 - a) * mech.cprime * beta_integral(lambda r: P.polyval(r, coef[1:]),
                                                           2.0 - a, a - 1.0)
    else:
        raise ValueError("family must be 'nu0' or 'nu1'")
    return lhs, rhs


def pushforward_check(mech: StableCase, zs=(0.5, 1.0, 2.0), polys=DEFAULT_POLYS,
                      families=("nu1", "nu0")) -> float:
    """Max absolute deviation of the pushforward identity over the grid."""
    worst = 0.0
    for fam in families:
        for z in zs:
            for coef in polys:
                lhs, rhs = pushforward_sides(mech, z, coef, fam)
                worst = max(worst, abs(lhs - rhs))
    return worst


# --- the full suite -------------------------------------------------------------------------

DEFAULT_FELLER = FellerCase(2.0, 1.0)
DEFAULT_STABLE = StableCase(1.5, 1.0, 1.0)


def run_suite(seed: int, n_cases: int = 50, feller: FellerCase = DEFAULT_FELLER,
              stable: StableCase = DEFAULT_STABLE, suite: str = "all") -> list[CheckResult]:
    """Every deterministic generator check, as a list of results."""
    cases = random_cases(seed, n_cases)
    out = []
    if suite in ("all", "gateaux"):
        rng = streams.stream(seed, streams.TAG_GENLAB, 1)
        worst, worst_mass = 0.0, 0.0
        for eta, F in cases:
            a = float(rng.uniform())
            worst = max(worst, gateaux_deviation(F, eta, a),
                        gateaux_deviation(TestFunctional(F.phi, F.m, ExpPsi(0.7)), eta, a))
            worst_mass = max(worst_mass, abs(mass_weighted_residual(F, eta)))
        out.append(CheckResult("gateaux_finite_difference", worst, GATEAUX_TOL, len(cases)))
        out.append(CheckResult("gateaux_mass_weighted_integral", worst_mass,
                               MASS_WEIGHTED_TOL, len(cases)))
    if suite in ("all", "factorization"):
        out.append(CheckResult("factorization_feller", factorization_check(feller, cases),
                               FACTORIZATION_TOL, len(cases)))
        out.append(CheckResult("factorization_stable", factorization_check(stable, cases),
                               FACTORIZATION_TOL, len(cases)))
        out.append(CheckResult("feller_decomposition", decomposition_check(feller, cases),
                               FACTORIZATION_TOL, len(cases)))
        out.append(CheckResult("total_mass_generator_feller", total_mass_check(feller),
                               FACTORIZATION_TOL, 9))
        out.append(CheckResult("total_mass_generator_stable", total_mass_check(stable),
                               FACTORIZATION_TOL, 9))
    if suite in ("all", "pushforward"):
        out.append(CheckResult("pushforward", pushforward_check(stable), PUSHFORWARD_TOL, 18))
    if not out:
        raise ValueError(f"unknown suite {suite!r}")
    return out
