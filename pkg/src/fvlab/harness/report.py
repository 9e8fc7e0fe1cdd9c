"""Verdict reports and the statistics used to reach them."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

PASS = "pass"
FAIL = "fail"
INCONCLUSIVE = "inconclusive"

Z99 = float(stats.norm.ppf(0.995))
# pre-registered Monte Carlo tolerance, in combined standard errors
N_SIGMA = 3.0


@dataclass
class Estimate:
    """A Monte Carlo mean with its standard error and 99% interval."""

    value: float
    stderr: float
    n: int

    @property
    def ci99(self) -> tuple[float, float]:
        return (self.value - Z99 * self.stderr, self.value + Z99 * self.stderr)

    @classmethod
    def of(cls, samples) -> "Estimate":
        x = np.asarray(samples, dtype=float)
        if x.size < 2:
            raise ValueError("an estimate needs at least two samples")
        return cls(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)), int(x.size))

    def as_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "ci99": list(self.ci99),
                "n": self.n}


@dataclass
class Oracle:
    """A reference value and the operation that produced it.  Monte Carlo
    oracles carry a standard error; exact ones have ``stderr = 0``."""

    value: float
    source: str
    stderr: float = 0.0
    n: Optional[int] = None

    def as_dict(self) -> dict:
        d = {"value": self.value, "source": self.source, "stderr": self.stderr}
        if self.stderr > 0:
            d["ci99"] = [self.value - Z99 * self.stderr, self.value + Z99 * self.stderr]
        if self.n is not None:
            d["n"] = self.n
        return d


@dataclass
class Criterion:
    name: str
    status: str
    estimate: Optional[Estimate] = None
    oracle: Optional[Oracle] = None
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"name": self.name, "status": self.status}
        if self.estimate is not None:
            d["estimate"] = self.estimate.as_dict()
        if self.oracle is not None:
            d["oracle"] = self.oracle.as_dict()
        if self.details:
            d["details"] = self.details
        return d


def agreement(name: str, est: Estimate, oracle: Oracle, n_sigma: float = N_SIGMA,
              **details) -> Criterion:
    """Pass iff ``|estimate - oracle| <= n_sigma`` combined standard errors."""
    se = math.hypot(est.stderr, oracle.stderr)
    diff = est.value - oracle.value
    if se == 0:
        ok = diff == 0
        z = 0.0 if ok else math.copysign(math.inf, diff)
    else:
        z = diff / se
        ok = abs(z) <= n_sigma
    return Criterion(name, PASS if ok else FAIL, est, oracle,
                     {"z_score": z, "combined_stderr": se, "tolerance_sigma": n_sigma,
                      **details})


@dataclass
class VerdictReport:
    experiment: str
    config: dict
    criteria: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    data: dict = field(default_factory=dict)
    # CSV outputs by file name; written next to the JSON report
    files: dict = field(default_factory=dict, repr=False)

    def add(self, crit: Criterion) -> Criterion:
        self.criteria.append(crit)
        return crit

    @property
    def verdict(self) -> str:
        states = {c.status for c in self.criteria}
        if FAIL in states:
            return FAIL
        if not states or INCONCLUSIVE in states:
            return INCONCLUSIVE
        return PASS

    @property
    def exit_code(self) -> int:
        return {PASS: 0, FAIL: 1, INCONCLUSIVE: 2}[self.verdict]

    def as_dict(self) -> dict:
        d = {"experiment": self.experiment, "verdict": self.verdict,
             "criteria": [c.as_dict() for c in self.criteria],
             "notes": list(self.notes), "config": self.config}
        if self.data:
            d["data"] = self.data
        return d

    def to_json(self) -> str:
        # deterministic text: sorted keys, shortest round-trip floats
        return json.dumps(_clean(self.as_dict()), indent=2, sort_keys=True) + "\n"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# --- tests of association -----------------------------------------------------------

def pearson_with_ci(x, y):
    """Pearson correlation, its two-sided p-value and the 99% Fisher-z
    interval.  Returns ``None`` when either sample is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    res = stats.pearsonr(x, y)
    r = float(res.statistic)
    half = Z99 / math.sqrt(x.size - 3)
    zr = math.atanh(max(min(r, 1 - 1e-15), -1 + 1e-15))
    return {"r": r, "p_value": float(res.pvalue),
            "ci99": [math.tanh(zr - half), math.tanh(zr + half)]}


def median_split_chi2(x, y):
    """Chi-square test of independence on the 2x2 table of median splits.
    Returns ``None`` when either split is degenerate."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = x > np.median(x)
    b = y > np.median(y)
    if a.all() or not a.any() or b.all() or not b.any():
        return None
    table = np.array([[np.sum(~a & ~b), np.sum(~a & b)],
                      [np.sum(a & ~b), np.sum(a & b)]])
    stat, p, _, _ = stats.chi2_contingency(table, correction=False)
    return {"table": table.tolist(), "statistic": float(stat), "p_value": float(p)}
