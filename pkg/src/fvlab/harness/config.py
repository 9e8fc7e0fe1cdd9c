"""Experiment configuration: one flat record shared by every command.

A configuration is assembled from three layers, later ones winning:
the command's defaults, an optional JSON file, and command-line flags.
The seed has no default; every run must name one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional, Union

from ..mechanisms import (BetaPart, CoalescentM, FellerCase, Mechanism, StableCase,
                          theorem1_correspondence)


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    experiment: str
    seed: Optional[int] = None
    output_dir: Optional[str] = None
    # mechanism; case "i" is Feller, "ii" is stable
    case: Optional[str] = None
    sigma2: float = 2.0
    beta: float = 1.0
    alpha: float = 1.5
    c: float = 1.0
    cprime: float = 1.0
    # "derive" (from the mechanism) or {"c0", "c1", "nu0": [a, b, scale], "nu1": [...]}
    coalescent: Union[str, dict] = "derive"
    # Monte Carlo sizes
    n_paths: int = 10_000
    n_outer: int = 1000
    n_reps: int = 10_000
    n_cells: int = 10
    # observation times and moments
    times: list = field(default_factory=lambda: [0.5, 1.0])
    powers: list = field(default_factory=lambda: [1, 2])
    t0: float = 0.5
    s0: float = 0.5
    # discretisation
    x0: float = 1.0
    horizon: float = 20.0
    max_horizon: float = 1e9
    dt: float = 0.01
    eps_trunc: float = 0.05
    eps_abs: float = 1e-4
    # extinction regimes on either side of the threshold
    beta_sub: float = 0.5
    beta_super: float = 1.5
    cprime_sub: float = 0.2
    cprime_super: float = 0.5
    sensitivity: list = field(default_factory=lambda: [1e-3, 1e-4, 1e-5])
    pure_cb_horizons: list = field(default_factory=lambda: [5.0, 10.0, 20.0])
    # rates, genlab, particle system
    n: int = 16
    suite: str = "all"
    n_cases: int = 50
    N: int = 1000

    def to_dict(self) -> dict:
        return asdict(self)

    # --- derived objects ----------------------------------------------------

    def mechanism(self) -> Mechanism:
        if self.case == "i":
            return FellerCase(self.sigma2, self.beta)
        if self.case == "ii":
            return StableCase(self.alpha, self.c, self.cprime)
        raise ConfigError("case", f"must be 'i' or 'ii', got {self.case!r}")

    def feller(self, beta: Optional[float] = None) -> FellerCase:
        return FellerCase(self.sigma2, self.beta if beta is None else beta)

    def stable(self, cprime: Optional[float] = None) -> StableCase:
        return StableCase(self.alpha, self.c, self.cprime if cprime is None else cprime)

    def coalescent_m(self) -> CoalescentM:
        if self.coalescent == "derive":
            return theorem1_correspondence(self.mechanism())
        desc = self.coalescent

        def part(key):
            v = desc.get(key)
            return None if v is None else BetaPart(*map(float, v))

        return CoalescentM(float(desc.get("c0", 0.0)), float(desc.get("c1", 0.0)),
                           part("nu0"), part("nu1"))


FIELD_NAMES = tuple(f.name for f in fields(ExperimentConfig))

COMMANDS = (
    "verify-theorem1", "verify-fixed-time", "verify-independence", "verify-extinction",
    "rates", "genlab", "sim-feller", "sim-stable", "sim-flow", "sim-gfvi", "sim-coalescent",
)

# per-command defaults on top of the dataclass defaults
COMMAND_DEFAULTS: dict[str, dict[str, Any]] = {
    "verify-theorem1": {"dt": 0.005},
    "verify-fixed-time": {"case": "i", "beta": 2.0},
    "verify-independence": {"beta": 2.0},
    "verify-extinction": {"eps_trunc": 0.1},
    "rates": {"case": "ii"},
    "genlab": {},
    "sim-feller": {"case": "i", "n_paths": 10, "horizon": 1.0},
    "sim-stable": {"case": "ii", "n_paths": 10, "horizon": 1.0},
    "sim-flow": {"case": "i", "n_paths": 5, "horizon": 1.0},
    "sim-gfvi": {"case": "i", "n_reps": 100, "eps_trunc": 1e-3},
    "sim-coalescent": {"case": "i", "n": 6, "n_reps": 10, "horizon": 1.0},
}

# commands bound to one mechanism family
FIXED_CASE = {"verify-fixed-time": "i", "sim-feller": "i", "sim-stable": "ii"}
FIXED_CASE_REASON = {
    "verify-fixed-time": "the fixed-time genealogy is only established in case 'i' "
                         "(Feller); the stable case is an open question",
    "sim-feller": "sim-feller simulates case 'i' only",
    "sim-stable": "sim-stable simulates case 'ii' only",
}

_FELLER_KEYS = {"sigma2", "beta"}
_STABLE_KEYS = {"alpha", "c", "cprime"}


def build_config(command: str, file_values: Optional[dict] = None,
                 flag_values: Optional[dict] = None) -> ExperimentConfig:
    """Merge defaults, file and flags for ``command`` and validate the result."""
    if command not in COMMANDS:
        raise ConfigError("experiment", f"unknown command {command!r}")
    values: dict[str, Any] = dict(COMMAND_DEFAULTS[command])
    explicit: dict[str, Any] = {}
    for layer in (file_values or {}, flag_values or {}):
        for key, val in layer.items():
            if key not in FIELD_NAMES:
                raise ConfigError(key, "unknown configuration field")
            if val is not None:
                explicit[key] = val
    if "experiment" in explicit and explicit["experiment"] != command:
        raise ConfigError("experiment",
                          f"config names {explicit['experiment']!r} but command is {command!r}")
    values.update(explicit)
    values["experiment"] = command
    fixed = FIXED_CASE.get(command)
    if fixed is not None:
        if explicit.get("case", fixed) != fixed:
            raise ConfigError("case", FIXED_CASE_REASON[command])
    elif "case" not in explicit:
        # given only one family's parameters, a command runs that family
        keys = set(explicit)
        if keys & _STABLE_KEYS and not keys & _FELLER_KEYS:
            values["case"] = "ii"
        elif keys & _FELLER_KEYS and not keys & _STABLE_KEYS:
            values["case"] = "i"
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return data


# --- validation ---------------------------------------------------------------------

def _num(cfg, name, lo=-math.inf, hi=math.inf, lo_open=False, hi_open=False):
    v = getattr(cfg, name)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(name, f"must be a finite number, got {v!r}")
    below = v <= lo if lo_open else v < lo
    above = v >= hi if hi_open else v > hi
    if below or above:
        lb = "(" if lo_open else "["
        rb = ")" if hi_open else "]"
        raise ConfigError(name, f"must lie in {lb}{lo}, {hi}{rb}, got {v!r}")
    setattr(cfg, name, float(v))


def _int(cfg, name, lo=1):
    v = getattr(cfg, name)
    if isinstance(v, bool) or not isinstance(v, int) and not (
            isinstance(v, float) and v.is_integer()):
        raise ConfigError(name, f"must be an integer, got {v!r}")
    if v < lo:
        raise ConfigError(name, f"must be >= {lo}, got {v!r}")
    setattr(cfg, name, int(v))


def _list(cfg, name, lo, lo_open=False, integer=False):
    v = getattr(cfg, name)
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(name, f"must be a non-empty list, got {v!r}")
    out = []
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise ConfigError(name, f"entries must be finite numbers, got {x!r}")
        if integer and not float(x).is_integer():
            raise ConfigError(name, f"entries must be integers, got {x!r}")
        if x < lo or (lo_open and x == lo):
            raise ConfigError(name, f"entries must be {'>' if lo_open else '>='} {lo}, got {x!r}")
        out.append(int(x) if integer else float(x))
    setattr(cfg, name, out)


def validate(cfg: ExperimentConfig) -> None:
    if cfg.seed is None:
        raise ConfigError("seed", "is mandatory (no default seed is ever chosen)")
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed", f"must be a non-negative integer, got {cfg.seed!r}")
    if cfg.case not in (None, "i", "ii"):
        raise ConfigError("case", f"must be 'i' or 'ii', got {cfg.case!r}")
    if cfg.output_dir is not None and not isinstance(cfg.output_dir, str):
        raise ConfigError("output_dir", "must be a path string")
    _num(cfg, "sigma2", 0.0, lo_open=True)
    _num(cfg, "beta", 0.0)
    _num(cfg, "alpha", 1.0, 2.0, lo_open=True, hi_open=True)
    _num(cfg, "c", 0.0, lo_open=True)
    _num(cfg, "cprime", 0.0)
    for name in ("n_paths", "n_outer", "n_reps", "n_cells", "n", "n_cases", "N"):
        _int(cfg, name)
    _list(cfg, "times", 0.0)
    _list(cfg, "powers", 1, integer=True)
    _num(cfg, "t0", 0.0)
    _num(cfg, "s0", 0.0)
    _num(cfg, "x0", 0.0)
    _num(cfg, "horizon", 0.0, lo_open=True)
    _num(cfg, "max_horizon", 0.0, lo_open=True)
    _num(cfg, "dt", 0.0, 1.0, lo_open=True)
    _num(cfg, "eps_trunc", 0.0, 1.0, lo_open=True, hi_open=True)
    _num(cfg, "eps_abs", 0.0, lo_open=True)
    for name in ("beta_sub", "beta_super", "cprime_sub", "cprime_super"):
        _num(cfg, name, 0.0)
    _list(cfg, "sensitivity", 0.0, lo_open=True)
    _list(cfg, "pure_cb_horizons", 0.0, lo_open=True)
    if cfg.suite not in ("all", "gateaux", "factorization", "pushforward"):
        raise ConfigError("suite", f"must be all, gateaux, factorization or pushforward, "
                                   f"got {cfg.suite!r}")
    if cfg.coalescent != "derive":
        _check_coalescent(cfg.coalescent)
    if cfg.dt > cfg.horizon:
        raise ConfigError("dt", f"must not exceed horizon ({cfg.horizon})")


def _check_coalescent(desc) -> None:
    if not isinstance(desc, dict):
        raise ConfigError("coalescent", "must be 'derive' or an object with c0, c1, nu0, nu1")
    unknown = set(desc) - {"c0", "c1", "nu0", "nu1"}
    if unknown:
        raise ConfigError("coalescent", f"unknown keys {sorted(unknown)}")
    for key in ("c0", "c1"):
        v = desc.get(key, 0.0)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
            raise ConfigError(f"coalescent.{key}", f"must be a non-negative number, got {v!r}")
    for key in ("nu0", "nu1"):
        v = desc.get(key)
        if v is None:
            continue
        if (not isinstance(v, (list, tuple)) or len(v) != 3
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
            raise ConfigError(f"coalescent.{key}", "must be [a, b, scale] or null")
        a, b, scale = v
        if a <= 0 or b <= 0 or scale < 0:
            raise ConfigError(f"coalescent.{key}", "needs a > 0, b > 0 and scale >= 0")
