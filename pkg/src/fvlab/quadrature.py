"""Adaptive quadrature for integrals with algebraic endpoint singularities."""

from __future__ import annotations

import math
from typing import Callable

from scipy import integrate


class QuadratureError(RuntimeError):
    pass


def _gk(f, lo, hi, epsrel, what):
    # QUADPACK qags: adaptive 21-point Gauss-Kronrod with extrapolation
    val, err, info = integrate.quad(f, lo, hi, epsabs=0.0, epsrel=epsrel,
                                    limit=400, full_output=1)[:3]
    if abs(err) > 1e-9 * abs(val) + 1e-14:
        raise QuadratureError(f"{what}: quadrature did not converge "
                              f"(value={val!r}, error estimate={err!r})")
    return val


def beta_integral(g: Callable[[float], float], a: float, b: float,
                  epsrel: float = 1e-13) -> float:
    """Integrate ``g(x) x**(a-1) (1-x)**(b-1)`` over ``(0, 1)``.

    ``a`` and ``b`` must be positive.  The interval is split at 1/2 and the
    substitutions ``x = u**(1/a)`` near 0 and ``1 - x = w**(1/b)`` near 1
    absorb the power singularities exactly, leaving smooth integrands for
    Gauss-Kronrod.
    """
    if a <= 0 or b <= 0:
        raise ValueError(f"Beta exponents must be positive, got a={a}, b={b}")

    def left(u):
        x = u ** (1.0 / a)
        return g(x) * (1.0 - x) ** (b - 1.0) / a

    def right(w):
        y = w ** (1.0 / b)
        return g(1.0 - y) * (1.0 - y) ** (a - 1.0) / b

    lo = _gk(left, 0.0, 0.5 ** a, epsrel, "beta_integral[left]")
    hi = _gk(right, 0.0, 0.5 ** b, epsrel, "beta_integral[right]")
    return lo + hi


def log_beta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def beta_fn(a: float, b: float) -> float:
    """Beta function through log-Gamma."""
    return math.exp(log_beta(a, b))
