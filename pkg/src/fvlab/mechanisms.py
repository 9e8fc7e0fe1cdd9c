"""Branching and immigration mechanisms of the two self-similar CBI families.

Two cases are supported:

* :class:`FellerCase` -- Feller diffusion with continuous immigration,
  ``psi(q) = sigma2 q^2 / 2`` and ``phi(q) = beta q``;
* :class:`StableCase` -- stable reproduction with stable immigration,
  reproduction Levy measure ``c h^(-1-alpha) dh`` and immigration Levy
  measure ``c' h^(-alpha) dh``, giving ``psi(q) = d q^alpha`` and
  ``phi(q) = d' alpha q^(alpha-1)``.

All functions here are closed forms; they are the exact oracles the
simulators are tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .quadrature import beta_fn


class DomainError(ValueError):
    """Argument outside the domain of a mechanism function."""


def _stable_factor(alpha: float) -> float:
    # d = factor * c
    return math.gamma(2.0 - alpha) / (alpha * (alpha - 1.0))


@dataclass(frozen=True)
class FellerCase:
    sigma2: float
    beta: float = 0.0

    def __post_init__(self):
        if self.sigma2 < 0 or self.beta < 0:
            raise ValueError("sigma2 and beta must be non-negative")
        if self.sigma2 == 0 and self.beta == 0:
            raise ValueError("FellerCase needs sigma2 > 0 or beta > 0")

    @property
    def alpha(self) -> float:
        # the Feller case is the alpha = 2 end of the stable family
        return 2.0

    def without_immigration(self) -> "FellerCase":
        return FellerCase(self.sigma2, 0.0) if self.sigma2 > 0 else self


@dataclass(frozen=True)
class StableCase:
    alpha: float
    c: float
    cprime: float = 0.0

    def __post_init__(self):
        if not 1.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must lie strictly inside (1, 2), got {self.alpha}")
        if self.c < 0 or self.cprime < 0:
            raise ValueError("c and cprime must be non-negative")

    @classmethod
    def from_d(cls, alpha: float, d: float, dprime: float = 0.0) -> "StableCase":
        f = _stable_factor(alpha)
        return cls(alpha, d / f, dprime / f)

    @property
    def d(self) -> float:
        return _stable_factor(self.alpha) * self.c

    @property
    def dprime(self) -> float:
        return _stable_factor(self.alpha) * self.cprime

    def without_immigration(self) -> "StableCase":
        return StableCase(self.alpha, self.c, 0.0)


Mechanism = Union[FellerCase, StableCase]


def _check_q(q):
    q = np.asarray(q, dtype=float)
    if np.any(q < 0):
        raise DomainError("Laplace argument q must be non-negative")
    return q


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def psi(mech: Mechanism, q):
    """Branching mechanism."""
    q = _check_q(q)
    if isinstance(mech, FellerCase):
        return _out(0.5 * mech.sigma2 * q**2)
    return _out(mech.d * q**mech.alpha)


def phi(mech: Mechanism, q):
    """Immigration mechanism."""
    q = _check_q(q)
    if isinstance(mech, FellerCase):
        return _out(mech.beta * q)
    return _out(mech.dprime * mech.alpha * q ** (mech.alpha - 1.0))


def flow_v(mech: Mechanism, t, q):
    """Solution of ``dv/dt = -psi(v)``, ``v_0 = q``."""
    q = _check_q(q)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("time must be non-negative")
    if isinstance(mech, FellerCase):
        return _out(q / (1.0 + 0.5 * mech.sigma2 * q * t))
    a, d = mech.alpha, mech.d
    with np.errstate(divide="ignore"):
        return _out(np.where(q > 0, (q ** (1.0 - a) + (a - 1.0) * d * t) ** (-1.0 / (a - 1.0)), 0.0))


def immigration_integral(mech: Mechanism, t, q):
    """``int_0^t phi(v_s(q)) ds`` in closed form."""
    q = _check_q(q)
    t = np.asarray(t, dtype=float)
    if isinstance(mech, FellerCase):
        if mech.sigma2 == 0:
            return _out(mech.beta * q * t)
        return _out(2.0 * mech.beta / mech.sigma2 * np.log1p(0.5 * mech.sigma2 * q * t))
    a, d, dp = mech.alpha, mech.d, mech.dprime
    if d == 0:
        return _out(dp * a * q ** (a - 1.0) * t)
    return _out(dp * a / (d * (a - 1.0)) * np.log1p(d * (a - 1.0) * t * q ** (a - 1.0)))


def cbi_laplace(mech: Mechanism, x, t, q):
    """``E_x[exp(-q Y_t)]`` for the CBI with mechanism ``mech``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("initial mass must be non-negative")
    return _out(np.exp(-x * flow_v(mech, t, q) - immigration_integral(mech, t, q)))


def reciprocal_psi_integral(mech: Mechanism, lower: float, eps: float = 1.0) -> float:
    """``int_lower^eps dq / psi(q)``, evaluated in closed form."""
    if isinstance(mech, FellerCase):
        if mech.sigma2 == 0:
            return math.inf
        return 2.0 / mech.sigma2 * (1.0 / lower - 1.0 / eps)
    a, d = mech.alpha, mech.d
    if d == 0:
        return math.inf
    return (lower ** (1.0 - a) - eps ** (1.0 - a)) / (d * (a - 1.0))


def conservativity_check(mech: Mechanism, eps: float = 1.0) -> bool:
    """Numeric divergence test of ``int_0^eps dq/|psi(q)|``.

    The integral is evaluated on ``(lower, eps)`` for cutoffs shrinking
    by factors of 10 from 1e-2 to 1e-8.  A convergent integral gains
    geometrically less on each successive decade, a divergent one does
    not; the mechanism is reported conservative when the gains are
    positive and never decrease.
    """
    cutoffs = [10.0 ** (-k) for k in range(2, 9)]
    vals = [reciprocal_psi_integral(mech, lo, eps) for lo in cutoffs]
    if any(math.isinf(v) for v in vals):
        return True
    gains = np.diff(vals)
    return bool(np.all(gains > 0) and np.all(gains[1:] >= gains[:-1] * (1.0 - 1e-9)))


# --- coalescent side -------------------------------------------------------

@dataclass(frozen=True)
class BetaPart:
    """``scale * Beta(a, b)(dr)``: the finite measure with density
    ``scale * r^(a-1) (1-r)^(b-1)`` on (0, 1)."""

    a: float
    b: float
    scale: float = 1.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0 or self.scale < 0:
            raise ValueError(f"invalid Beta part {self}")

    def mass(self) -> float:
        return self.scale * beta_fn(self.a, self.b)

    def moment(self, i: int, j: int) -> float:
        """``int r^i (1-r)^j scale Beta(a,b)(dr)``."""
        if self.a + i <= 0 or self.b + j <= 0:
            raise ValueError("moment diverges")
        return self.scale * beta_fn(self.a + i, self.b + j)

    def density(self, r):
        return self.scale * r ** (self.a - 1.0) * (1.0 - r) ** (self.b - 1.0)


@dataclass(frozen=True)
class CoalescentM:
    """The pair ``(Lambda0, Lambda1)``.

    ``Lambda0 = c0 delta_0 + nu0part`` and ``Lambda1 = c1 delta_0 + nu1part``
    where the Beta parts are the measures ``x nu0(dx)`` and
    ``x^2 nu1(dx)`` respectively.
    """

    c0: float = 0.0
    c1: float = 0.0
    nu0: Optional[BetaPart] = None
    nu1: Optional[BetaPart] = None

    def __post_init__(self):
        if self.c0 < 0 or self.c1 < 0:
            raise ValueError("c0 and c1 must be non-negative")

    def lambda0_mass(self) -> float:
        return self.c0 + (self.nu0.mass() if self.nu0 else 0.0)

    def lambda1_mass(self) -> float:
        return self.c1 + (self.nu1.mass() if self.nu1 else 0.0)

    def nu0_density(self, r):
        if self.nu0 is None:
            return 0.0 * np.asarray(r)
        return self.nu0.density(r) / r

    def nu1_density(self, r):
        if self.nu1 is None:
            return 0.0 * np.asarray(r)
        return self.nu1.density(r) / r**2


def theorem1_correspondence(mech: Mechanism) -> CoalescentM:
    """The pair M whose generalized Fleming-Viot process with immigration
    is the time-changed ratio process of ``mech``."""
    if isinstance(mech, FellerCase):
        return CoalescentM(c0=mech.beta, c1=mech.sigma2)
    a = mech.alpha
    nu0 = BetaPart(2.0 - a, a - 1.0, mech.cprime) if mech.cprime > 0 else None
    nu1 = BetaPart(2.0 - a, a, mech.c) if mech.c > 0 else None
    return CoalescentM(0.0, 0.0, nu0, nu1)
