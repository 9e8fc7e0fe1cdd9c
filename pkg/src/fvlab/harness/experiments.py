"""The verification experiments and the pass-through commands.

Every ``cmd_*`` function takes a validated :class:`ExperimentConfig` and
returns a :class:`VerdictReport`; simulators additionally write CSV files.
Nothing here reads the clock, so identical configurations give identical
reports.
"""

from __future__ import annotations

import io
import math
import os
from typing import Callable

import numpy as np

from .. import cbi_sim, coalescent, genlab, gfvi_sim, streams
from ..mechanisms import FellerCase, theorem1_correspondence
from .config import ConfigError, ExperimentConfig
from .report import (FAIL, INCONCLUSIVE, PASS, Criterion, Estimate, Oracle, VerdictReport,
                     agreement, median_split_chi2, pearson_with_ci)

# sub-stream tags, one per independent Monte Carlo run inside an experiment
_TAG_T1 = {"i": 10, "ii": 20}
_TAG_FIXED_FORWARD = 30
_TAG_FIXED_OUTER = 31
_TAG_INDEPENDENCE = {"i": 40, "ii": 50}
_TAG_EXTINCTION = 60
_TAG_PURE_CB = 70
_TAG_DUAL = 80


def _cases(cfg: ExperimentConfig) -> list[str]:
    return ["i", "ii"] if cfg.case is None else [cfg.case]


def _mech_for(cfg: ExperimentConfig, case: str):
    return cfg.feller() if case == "i" else cfg.stable()


def _describe(mech) -> dict:
    if isinstance(mech, FellerCase):
        return {"case": "i", "sigma2": mech.sigma2, "beta": mech.beta}
    return {"case": "ii", "alpha": mech.alpha, "c": mech.c, "cprime": mech.cprime}


# --- duality at the time-changed times ---------------------------------------------

def cmd_verify_theorem1(cfg: ExperimentConfig) -> VerdictReport:
    """Forward moments ``E[R_{C^{-1}(t)}({0})^p]`` of the flow against the
    coalescent with the M of :func:`theorem1_correspondence`.

    Case i is compared with the exact block-count chain, case ii with an
    independent Monte Carlo run of the coalescent (the exact chain value is
    reported alongside).  Paths that never reach ``C = t`` within
    ``max_horizon`` make the criterion inconclusive.
    """
    rep = VerdictReport(cfg.experiment, cfg.to_dict())
    for case in _cases(cfg):
        mech = _mech_for(cfg, case)
        M = theorem1_correspondence(mech)
        table = coalescent.rates(M, max(16, max(cfg.powers)))
        flow = cbi_sim.flow_time_change(
            mech, cfg.n_cells, cfg.n_paths, cfg.seed, s_values=cfg.times,
            p_values=cfg.powers, dt=cfg.dt, eps_trunc=cfg.eps_trunc,
            max_horizon=cfg.max_horizon, tag=_TAG_T1[case])
        for js, t in enumerate(cfg.times):
            unresolved = int((~flow.resolved[:, js]).sum())
            for lp, p in enumerate(cfg.powers):
                name = f"case_{case}_p{p}_t{t:g}"
                exact = coalescent.absorption_chain(p, table, t)
                if unresolved:
                    rep.add(Criterion(name, INCONCLUSIVE, details={
                        "mechanism": _describe(mech), "unresolved_paths": unresolved,
                        "reason": "C did not reach t within max_horizon on every path"}))
                    continue
                est = Estimate.of(flow.moments_at_s[:, js, lp])
                if case == "i":
                    oracle = Oracle(exact, "coalescent.absorption_chain")
                    details = {}
                else:
                    mc, se = coalescent.absorbed_fraction_mc(
                        table, p, t, cfg.n_reps, cfg.seed,
                        tag=_TAG_DUAL + 10 * js + lp)
                    oracle = Oracle(mc, "coalescent.absorbed_fraction_mc", se, cfg.n_reps)
                    details = {"exact_chain": exact,
                               "exact_chain_source": "coalescent.absorption_chain"}
                rep.add(agreement(name, est, oracle, mechanism=_describe(mech), **details))
    return rep


# --- fixed-time genealogy -------------------------------------------------------------

def cmd_verify_fixed_time(cfg: ExperimentConfig) -> VerdictReport:
    """``E[R_t({0})^p]`` against ``E[P(all p lineages absorbed by C(t))]``
    with ``C(t)`` sampled from independent flow runs."""
    mech = cfg.feller()
    if mech.beta / mech.sigma2 < 0.5:
        raise ConfigError("beta", f"the fixed-time genealogy needs beta/sigma2 >= 1/2 so that "
                                  f"the total mass never hits zero; got "
                                  f"{mech.beta}/{mech.sigma2} = {mech.beta / mech.sigma2:g}")
    rep = VerdictReport(cfg.experiment, cfg.to_dict())
    table = coalescent.rates(theorem1_correspondence(mech), max(16, max(cfg.powers)))
    fwd = cbi_sim.flow_time_change(mech, cfg.n_cells, cfg.n_paths, cfg.seed,
                                   t_values=cfg.times, dt=cfg.dt,
                                   max_horizon=max(cfg.times), tag=_TAG_FIXED_FORWARD)
    outer = cbi_sim.flow_time_change(mech, cfg.n_cells, cfg.n_outer, cfg.seed,
                                     t_values=cfg.times, dt=cfg.dt,
                                     max_horizon=max(cfg.times), tag=_TAG_FIXED_OUTER)
    for jt, t in enumerate(cfg.times):
        cs = outer.c_at_t[:, jt]
        for p in cfg.powers:
            est = Estimate.of(fwd.r0_at_t[:, jt] ** p)
            inner = np.array([coalescent.absorption_chain(p, table, c) for c in cs])
            o = Estimate.of(inner)
            oracle = Oracle(o.value, "coalescent.absorption_chain at C(t) sampled by "
                                     "cbi_sim.flow_time_change", o.stderr, cfg.n_outer)
            rep.add(agreement(f"p{p}_t{t:g}", est, oracle, mechanism=_describe(mech),
                              mean_C=float(cs.mean())))
    return rep


# --- independence of the clock and the time-changed ratio -----------------------------

def cmd_verify_independence(cfg: ExperimentConfig) -> VerdictReport:
    """Association between ``C(t0)`` and ``R_{C^{-1}(s0)}({0})`` along paths.

    Case i passes when neither test rejects independence at level 0.01
    (the 99% correlation interval contains 0 and the chi-square p-value
    exceeds 0.01).  Case ii passes when at least one of them rejects it.
    """
    rep = VerdictReport(cfg.experiment, cfg.to_dict())
    for case in _cases(cfg):
        mech = _mech_for(cfg, case)
        flow = cbi_sim.flow_time_change(
            mech, cfg.n_cells, cfg.n_paths, cfg.seed, s_values=[cfg.s0], t_values=[cfg.t0],
            dt=cfg.dt, eps_trunc=cfg.eps_trunc, max_horizon=max(cfg.max_horizon, cfg.t0),
            tag=_TAG_INDEPENDENCE[case])
        name = f"case_{case}_" + ("independent" if case == "i" else "dependent")
        unresolved = int((~flow.resolved[:, 0]).sum())
        if unresolved:
            rep.add(Criterion(name, INCONCLUSIVE, details={
                "mechanism": _describe(mech), "unresolved_paths": unresolved}))
            continue
        c_t, r_s = flow.c_at_t[:, 0], flow.r0_at_s[:, 0]
        corr = pearson_with_ci(c_t, r_s)
        chi = median_split_chi2(c_t, r_s)
        if corr is None or chi is None:
            rep.notes.append(f"{name}: a sample is constant; test skipped")
            rep.add(Criterion(name, INCONCLUSIVE, details={
                "mechanism": _describe(mech), "reason": "zero-variance sample"}))
            continue
        ci_has_zero = corr["ci99"][0] <= 0.0 <= corr["ci99"][1]
        chi_accepts = chi["p_value"] > 0.01
        ok = (ci_has_zero and chi_accepts) if case == "i" else not (ci_has_zero and chi_accepts)
        rep.add(Criterion(name, PASS if ok else FAIL, details={
            "mechanism": _describe(mech), "t0": cfg.t0, "s0": cfg.s0, "n_paths": cfg.n_paths,
            "pearson": corr, "median_split_chi2": chi,
            "oracle_source": "independence of C and the time-changed ratio process"
                             if case == "i" else "common jumps of C and the ratio process"}))
    return rep


# --- extinction dichotomy ----------------------------------------------------------------

def _hitting(cfg, mech, eps_abs, horizon, tag):
    return cbi_sim.hitting_zero_stats(mech, cfg.x0, horizon, cfg.dt, eps_abs, cfg.n_paths,
                                      cfg.seed, eps_trunc=cfg.eps_trunc, tag=tag)


def _hit_dict(h) -> dict:
    return {"frequency": h.frequency, "ci99": [h.ci_low, h.ci_high], "n_hit": h.n_hit,
            "n_paths": h.n_paths}


def cmd_verify_extinction(cfg: ExperimentConfig) -> VerdictReport:
    """Hitting frequencies of zero on both sides of the extinction threshold.

    The criterion per case is ``f_sub - f_super >= 0.5``.  Frequencies at
    the other thresholds in ``sensitivity`` and the pure-branching
    frequencies at growing horizons are reported as well; the latter must
    be non-decreasing.
    """
    s2 = cfg.sigma2
    if not cfg.beta_sub / s2 < 0.5 < cfg.beta_super / s2:
        raise ConfigError("beta_sub", "need beta_sub/sigma2 < 1/2 < beta_super/sigma2")
    thr = (cfg.alpha - 1.0) / cfg.alpha
    if not cfg.cprime_sub / cfg.c < thr < cfg.cprime_super / cfg.c:
        raise ConfigError("cprime_sub",
                          f"need cprime_sub/c < (alpha-1)/alpha = {thr:g} < cprime_super/c")
    rep = VerdictReport(cfg.experiment, cfg.to_dict())
    pairs = {
        "i": (cfg.feller(cfg.beta_sub), cfg.feller(cfg.beta_super)),
        "ii": (cfg.stable(cfg.cprime_sub), cfg.stable(cfg.cprime_super)),
    }
    eps_list = sorted(set(cfg.sensitivity) | {cfg.eps_abs}, reverse=True)
    for ci, case in enumerate(_cases(cfg)):
        sub, sup = pairs[case]
        freqs = {}
        for je, eps in enumerate(eps_list):
            hs = _hitting(cfg, sub, eps, cfg.horizon, _TAG_EXTINCTION + 10 * ci + 2 * je)
            hp = _hitting(cfg, sup, eps, cfg.horizon, _TAG_EXTINCTION + 10 * ci + 2 * je + 1)
            freqs[eps] = (hs, hp)
        hs, hp = freqs[cfg.eps_abs]
        sep = hs.frequency - hp.frequency
        se = math.sqrt(hs.frequency * (1 - hs.frequency) / hs.n_paths
                       + hp.frequency * (1 - hp.frequency) / hp.n_paths)
        rep.add(Criterion(
            f"case_{case}_separation", PASS if sep >= 0.5 else FAIL,
            Estimate(sep, se, hs.n_paths + hp.n_paths),
            Oracle(0.5, "pre-registered minimum separation"),
            {"sub_threshold": {**_describe(sub), **_hit_dict(hs)},
             "super_threshold": {**_describe(sup), **_hit_dict(hp)},
             "horizon": cfg.horizon, "eps_abs": cfg.eps_abs,
             "sensitivity": [{"eps_abs": e, "sub": freqs[e][0].frequency,
                              "super": freqs[e][1].frequency,
                              "separation": freqs[e][0].frequency - freqs[e][1].frequency}
                             for e in eps_list]}))
        pure = sub.without_immigration()
        hz = [_hitting(cfg, pure, cfg.eps_abs, T, _TAG_PURE_CB + ci)
              for T in cfg.pure_cb_horizons]
        f = [h.frequency for h in hz]
        monotone = all(b >= a for a, b in zip(f, f[1:]))
        rep.add(Criterion(f"case_{case}_pure_branching_monotone", PASS if monotone else FAIL,
                          details={"mechanism": _describe(pure),
                                   "horizons": list(cfg.pure_cb_horizons), "frequencies": f}))
    return rep


# --- pass-through commands --------------------------------------------------------------

RATE_TOL = 1e-10


def cmd_rates(cfg: ExperimentConfig) -> VerdictReport:
    """Rate table of the configured M, checked against quadrature and the
    consistency recursion."""
    M = cfg.coalescent_m()
    table = coalescent.rates(M, cfg.n)
    rows = []
    worst = 0.0
    for n in range(1, cfg.n + 1):
        for k in range(1, n + 1):
            row = {"n": n, "k": k, "r": float(table.r[n, k])}
            q = coalescent.rate_by_quadrature(M, "r", n, k)
            worst = max(worst, coalescent.relative_deviation(table.r[n, k], q))
            if k >= 2:
                row["lambda"] = float(table.lam[n, k])
                q = coalescent.rate_by_quadrature(M, "lambda", n, k)
                worst = max(worst, coalescent.relative_deviation(table.lam[n, k], q))
            rows.append(row)
    rep = VerdictReport(cfg.experiment, cfg.to_dict(), data={"rates": rows})
    rep.add(Criterion("quadrature_agreement", PASS if worst <= RATE_TOL else FAIL,
                      details={"max_relative_deviation": worst, "tolerance": RATE_TOL,
                               "oracle_source": "coalescent.rate_by_quadrature"}))
    dev = coalescent.consistency_deviation(table)
    rep.add(Criterion("consistency_recursion", PASS if dev <= RATE_TOL else FAIL,
                      details={"max_relative_deviation": dev, "tolerance": RATE_TOL,
                               "oracle_source": "coalescent.consistency_deviation"}))
    return rep


def cmd_genlab(cfg: ExperimentConfig) -> VerdictReport:
    """The deterministic generator identities."""
    rep = VerdictReport(cfg.experiment, cfg.to_dict())
    for res in genlab.run_suite(cfg.seed, cfg.n_cases, cfg.feller(), cfg.stable(), cfg.suite):
        rep.add(Criterion(res.name, PASS if res.passed else FAIL,
                          details={"max_deviation": res.max_deviation,
                                   "tolerance": res.tolerance, "n_cases": res.n_cases}))
    return rep


def _csv_text(writer: Callable, *args) -> str:
    buf = io.StringIO()
    writer(buf, *args)
    return buf.getvalue()


def _sim_report(cfg, files: dict, **data) -> VerdictReport:
    rep = VerdictReport(cfg.experiment, cfg.to_dict(), data=dict(data), files=files)
    rep.add(Criterion("simulation_completed", PASS, details={"files": sorted(files)}))
    return rep


def cmd_sim_feller(cfg: ExperimentConfig) -> VerdictReport:
    mech = cfg.mechanism()
    paths = [cbi_sim.sim_feller_cbi(mech, cfg.x0, cfg.horizon, cfg.dt,
                                    streams.stream(cfg.seed, streams.TAG_FELLER, 0, i))
             for i in range(cfg.n_paths)]
    return _sim_report(cfg, {"paths.csv": _csv_text(cbi_sim.write_paths_csv, paths)})


def cmd_sim_stable(cfg: ExperimentConfig) -> VerdictReport:
    mech = cfg.mechanism()
    paths = [cbi_sim.sim_stable_cbi(mech, cfg.x0, cfg.horizon, cfg.dt, cfg.eps_trunc,
                                    streams.stream(cfg.seed, streams.TAG_STABLE, 0, i))
             for i in range(cfg.n_paths)]
    return _sim_report(cfg, {"paths.csv": _csv_text(cbi_sim.write_paths_csv, paths)})


def cmd_sim_flow(cfg: ExperimentConfig) -> VerdictReport:
    mech = cfg.mechanism()
    runs = [cbi_sim.sim_flow(mech, cfg.n_cells, cfg.horizon, cfg.dt, cfg.eps_trunc,
                             streams.stream(cfg.seed, streams.TAG_FLOW, 0, i))
            for i in range(cfg.n_paths)]
    times = cfg.dt * np.arange(len(runs[0]))
    return _sim_report(cfg, {"flow.csv": _csv_text(cbi_sim.write_measures_csv, runs, times)})


def cmd_sim_gfvi(cfg: ExperimentConfig) -> VerdictReport:
    """Particle system of the configured M, with moment estimates of the
    all-zero functional against the exact finite-N dual."""
    M = cfg.coalescent_m()
    batch = gfvi_sim.gfvi_batch(M, cfg.N, cfg.times, cfg.n_reps, cfg.seed,
                                eps_trunc=cfg.eps_trunc)
    rep = _sim_report(cfg, {"gfvi.csv": _csv_text(gfvi_sim.write_batch_csv, batch)})
    rep.criteria.clear()
    for t in cfg.times:
        for p in cfg.powers:
            if p > cfg.N / 10:
                rep.notes.append(f"p={p} skipped: needs p <= N/10")
                continue
            e = gfvi_sim.moment_estimate(batch, t, p)
            est = Estimate(e.value, e.stderr, e.n)
            oracle = Oracle(gfvi_sim.all_zero_oracle(M, p, t, cfg.N), "gfvi_sim.all_zero_oracle")
            rep.add(agreement(f"all_zero_p{p}_t{t:g}", est, oracle))
    return rep


def cmd_sim_coalescent(cfg: ExperimentConfig) -> VerdictReport:
    table = coalescent.rates(cfg.coalescent_m(), max(cfg.n, 2))
    trajs = []
    for j, sl in streams.blocks(cfg.n_reps):
        rng = streams.stream(cfg.seed, streams.TAG_COALESCENT, 0, j)
        trajs.extend(coalescent.simulate(table, cfg.n, cfg.horizon, rng)
                     for _ in range(sl.stop - sl.start))
    return _sim_report(cfg, {"coalescent.csv":
                             _csv_text(coalescent.write_trajectories_csv, trajs)})


COMMAND_FUNCS = {
    "verify-theorem1": cmd_verify_theorem1,
    "verify-fixed-time": cmd_verify_fixed_time,
    "verify-independence": cmd_verify_independence,
    "verify-extinction": cmd_verify_extinction,
    "rates": cmd_rates,
    "genlab": cmd_genlab,
    "sim-feller": cmd_sim_feller,
    "sim-stable": cmd_sim_stable,
    "sim-flow": cmd_sim_flow,
    "sim-gfvi": cmd_sim_gfvi,
    "sim-coalescent": cmd_sim_coalescent,
}


def run(cfg: ExperimentConfig) -> VerdictReport:
    return COMMAND_FUNCS[cfg.experiment](cfg)


def write_outputs(rep: VerdictReport, output_dir: str) -> list[str]:
    """Write the JSON report and any CSV files; returns the written paths."""
    os.makedirs(output_dir, exist_ok=True)
    written = []
    for name, text in sorted(rep.files.items()):
        path = os.path.join(output_dir, name)
        with open(path, "w", newline="") as fh:
            fh.write(text)
        written.append(path)
    path = os.path.join(output_dir, f"{rep.experiment}.json")
    with open(path, "w") as fh:
        fh.write(rep.to_json())
    written.append(path)
    return written
