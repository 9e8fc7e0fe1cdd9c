import json
import math

import numpy as np
import pytest

from fvlab.harness import cli
from fvlab.harness.config import (COMMANDS, FIXED_CASE, ConfigError, build_config, load_json,
                                  validate)
from fvlab.harness.experiments import run
from fvlab.harness.report import (FAIL, INCONCLUSIVE, PASS, Criterion, Estimate, Oracle,
                                  VerdictReport, agreement, median_split_chi2, pearson_with_ci)
from fvlab.mechanisms import FellerCase, StableCase


# --- configuration ---------------------------------------------------------------------

def test_every_command_builds_with_a_seed():
    for cmd in COMMANDS:
        cfg = build_config(cmd, flag_values={"seed": 1})
        assert cfg.experiment == cmd and cfg.seed == 1


def test_seed_is_mandatory():
    with pytest.raises(ConfigError) as err:
        build_config("rates")
    assert err.value.field == "seed"
    with pytest.raises(ConfigError):
        build_config("rates", flag_values={"seed": -3})


def test_layers_flags_override_file():
    cfg = build_config("verify-theorem1", {"seed": 1, "n_paths": 50}, {"n_paths": 20})
    assert cfg.n_paths == 20 and cfg.dt == 0.005
    with pytest.raises(ConfigError) as err:
        build_config("rates", {"seed": 1, "experiment": "genlab"})
    assert err.value.field == "experiment"


@pytest.mark.parametrize("field,value", [
    ("alpha", 2.0), ("alpha", 1.0), ("sigma2", 0.0), ("c", -1.0), ("dt", 0.0),
    ("eps_trunc", 1.0), ("n_paths", 0), ("n_paths", 2.5), ("times", []), ("times", [-1.0]),
    ("powers", [1.5]), ("suite", "bogus"), ("case", "iii"), ("horizon", math.inf),
    ("sensitivity", [0.0]), ("beta", True), ("bogus_field", 1),
])
def test_validation_names_the_field(field, value):
    with pytest.raises(ConfigError) as err:
        build_config("sim-coalescent", flag_values={"seed": 1, field: value})
    assert err.value.field == field
    assert str(err.value).startswith(field + ":")


def test_coalescent_spec_validation():
    good = {"c0": 0.5, "c1": 1.0, "nu0": None, "nu1": [0.5, 1.5, 1.0]}
    cfg = build_config("rates", flag_values={"seed": 1, "coalescent": good})
    M = cfg.coalescent_m()
    assert (M.c0, M.c1, M.nu0, M.nu1.b) == (0.5, 1.0, None, 1.5)
    for bad, name in [({"c0": -1}, "coalescent.c0"), ({"nu1": [0.5, 1.5]}, "coalescent.nu1"),
                      ({"nu0": [0.0, 1.0, 1.0]}, "coalescent.nu0"), ({"x": 1}, "coalescent"),
                      ("kingman", "coalescent")]:
        with pytest.raises(ConfigError) as err:
            build_config("rates", flag_values={"seed": 1, "coalescent": bad})
        assert err.value.field == name


def test_case_inference_and_fixed_cases():
    assert build_config("verify-theorem1", flag_values={"seed": 1}).case is None
    assert build_config("verify-theorem1", flag_values={"seed": 1, "alpha": 1.2}).case == "ii"
    assert build_config("verify-theorem1", flag_values={"seed": 1, "beta": 0.7}).case == "i"
    assert build_config("rates", flag_values={"seed": 1}).case == "ii"
    for cmd, case in FIXED_CASE.items():
        assert build_config(cmd, flag_values={"seed": 1}).case == case
        other = "ii" if case == "i" else "i"
        with pytest.raises(ConfigError) as err:
            build_config(cmd, flag_values={"seed": 1, "case": other})
        assert err.value.field == "case"


def test_mechanism_from_config():
    cfg = build_config("rates", flag_values={"seed": 1, "alpha": 1.2, "c": 2.0})
    assert cfg.mechanism() == StableCase(1.2, 2.0, 1.0)
    cfg = build_config("sim-feller", flag_values={"seed": 1})
    assert cfg.mechanism() == FellerCase(2.0, 1.0)
    cfg.case = None
    with pytest.raises(ConfigError):
        cfg.mechanism()


def test_dt_not_beyond_horizon():
    with pytest.raises(ConfigError) as err:
        build_config("sim-feller", flag_values={"seed": 1, "dt": 0.5, "horizon": 0.1})
    assert err.value.field == "dt"


def test_load_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "n": 5}))
    assert load_json(str(p)) == {"seed": 3, "n": 5}
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_json(str(p))
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_json(str(p))
    with pytest.raises(ConfigError):
        load_json(str(tmp_path / "missing.json"))


def test_validate_normalises_numbers():
    cfg = build_config("rates", flag_values={"seed": 1, "n": 6.0, "c": 2})
    validate(cfg)
    assert cfg.n == 6 and isinstance(cfg.n, int)
    assert cfg.c == 2.0 and isinstance(cfg.c, float)


# --- reports ---------------------------------------------------------------------------------

def test_estimate_and_oracle():
    e = Estimate.of([0.0, 1.0, 0.0, 1.0])
    lo, hi = e.ci99
    assert e.value == 0.5 and lo < 0.5 < hi
    assert set(e.as_dict()) == {"value", "stderr", "ci99", "n"}
    with pytest.raises(ValueError):
        Estimate.of([1.0])
    assert "ci99" not in Oracle(0.3, "exact").as_dict()
    assert Oracle(0.3, "mc", 0.01, 100).as_dict()["n"] == 100


def test_agreement():
    est = Estimate(1.0, 0.1, 100)
    assert agreement("a", est, Oracle(1.25, "x")).status == PASS
    assert agreement("a", est, Oracle(1.35, "x")).status == FAIL
    # combined error of two Monte Carlo sides
    assert agreement("a", est, Oracle(1.35, "x", 0.1)).status == PASS
    c = agreement("a", Estimate(0.0, 0.0, 5), Oracle(0.0, "x"))
    assert c.status == PASS and c.details["z_score"] == 0.0
    c = agreement("a", Estimate(0.1, 0.0, 5), Oracle(0.0, "x"))
    assert c.status == FAIL and math.isinf(c.details["z_score"])


def test_verdicts_and_exit_codes():
    rep = VerdictReport("x", {})
    assert rep.verdict == INCONCLUSIVE and rep.exit_code == 2
    rep.add(Criterion("a", PASS))
    assert rep.exit_code == 0
    rep.add(Criterion("b", INCONCLUSIVE))
    assert rep.exit_code == 2
    rep.add(Criterion("c", FAIL))
    assert rep.verdict == FAIL and rep.exit_code == 1


def test_report_json_is_deterministic():
    rep = VerdictReport("x", {"b": 1, "a": [np.float64(0.1), np.int64(3)]})
    rep.add(agreement("z", Estimate(1.0, 0.1, 10), Oracle(1.0, "src"), extra=np.bool_(True)))
    rep.add(Criterion("inf", FAIL, details={"v": math.inf}))
    text = rep.to_json()
    assert text == rep.to_json()
    d = json.loads(text)
    assert d["config"]["a"] == [0.1, 3] and d["criteria"][0]["details"]["extra"] is True
    assert d["criteria"][1]["details"]["v"] == "inf"
    assert d["criteria"][0]["oracle"]["source"] == "src"
    assert list(d) == sorted(d)


def test_association_tests():
    rng = np.random.default_rng(1)
    x = rng.normal(size=2000)
    y = rng.normal(size=2000)
    r = pearson_with_ci(x, y)
    assert r["ci99"][0] < r["r"] < r["ci99"][1]
    r = pearson_with_ci(x, x + 0.1 * y)
    assert r["p_value"] < 1e-10 and r["ci99"][0] > 0.9
    assert median_split_chi2(x, x)["p_value"] < 1e-10
    assert pearson_with_ci(x, np.ones_like(x)) is None
    assert median_split_chi2(x, np.ones_like(x)) is None


# --- experiments on small configurations -------------------------------------------------------

def _run(cmd, **flags):
    return run(build_config(cmd, flag_values={"seed": 7, **flags}))


def test_verify_theorem1_small():
    rep = _run("verify-theorem1", n_paths=300, n_reps=2000, times=[0.5], powers=[1], dt=0.01)
    names = [c.name for c in rep.criteria]
    assert names == ["case_i_p1_t0.5", "case_ii_p1_t0.5"]
    for c in rep.criteria:
        assert c.oracle.source.startswith("coalescent.")
        assert c.estimate.ci99[0] <= c.estimate.value <= c.estimate.ci99[1]
    assert rep.criteria[1].details["exact_chain_source"] == "coalescent.absorption_chain"


def test_verify_theorem1_at_time_zero():
    rep = _run("verify-theorem1", case="i", n_paths=50, times=[0.0], powers=[1, 2])
    for c in rep.criteria:
        assert c.estimate.value == 0 and c.oracle.value == 0 and c.status == PASS


def test_verify_theorem1_unresolved_is_inconclusive():
    # finite lifetime regime with a tiny horizon: C never reaches t
    rep = _run("verify-theorem1", case="ii", cprime=0.1, n_paths=50, times=[5.0], powers=[1],
               max_horizon=0.05, dt=0.01)
    assert rep.verdict == INCONCLUSIVE and rep.exit_code == 2
    assert rep.criteria[0].details["unresolved_paths"] > 0


def test_verify_fixed_time_small():
    rep = _run("verify-fixed-time", n_paths=400, n_outer=200, times=[0.0, 0.5], powers=[1])
    zero, half = rep.criteria
    assert zero.estimate.value == 0 and zero.oracle.value == 0
    assert "absorption_chain" in half.oracle.source and half.oracle.n == 200


def test_verify_fixed_time_rejects_small_beta():
    with pytest.raises(ConfigError) as err:
        _run("verify-fixed-time", beta=0.5, sigma2=2.0)
    assert err.value.field == "beta" and "1/2" in str(err.value)


def test_verify_independence_small():
    rep = _run("verify-independence", n_paths=400)
    i, ii = rep.criteria
    assert i.name == "case_i_independent" and ii.name == "case_ii_dependent"
    for c in (i, ii):
        assert {"pearson", "median_split_chi2", "oracle_source"} <= set(c.details)


def test_verify_extinction_small():
    rep = _run("verify-extinction", n_paths=200, horizon=5.0, sensitivity=[1e-3],
               pure_cb_horizons=[1.0, 4.0])
    names = [c.name for c in rep.criteria]
    assert names == ["case_i_separation", "case_i_pure_branching_monotone",
                     "case_ii_separation", "case_ii_pure_branching_monotone"]
    sens = rep.criteria[0].details["sensitivity"]
    assert [s["eps_abs"] for s in sens] == [1e-3, 1e-4]


def test_verify_extinction_rejects_parameters_on_one_side():
    with pytest.raises(ConfigError):
        _run("verify-extinction", beta_sub=1.2)
    with pytest.raises(ConfigError):
        _run("verify-extinction", cprime_super=0.3)


def test_rates_command():
    rep = _run("rates", n=6)
    assert rep.verdict == PASS
    rows = rep.data["rates"]
    assert len(rows) == 21
    row = next(r for r in rows if r["n"] == 3 and r["k"] == 2)
    assert row["lambda"] == pytest.approx(3 * math.pi / 8)


def test_rates_command_kingman_table():
    rep = _run("rates", n=4, coalescent={"c0": 1.0, "c1": 2.0})
    assert rep.verdict == PASS
    assert {(r["n"], r["k"], r.get("lambda")) for r in rep.data["rates"]
            if r.get("lambda")} == {(2, 2, 2.0), (3, 2, 2.0), (4, 2, 2.0)}


def test_sim_commands_produce_csv():
    for cmd, name, header in [
        ("sim-feller", "paths.csv", "path_id,time,value,absorbed"),
        ("sim-stable", "paths.csv", "path_id,time,value,absorbed"),
        ("sim-flow", "flow.csv", "path_id,time,atom_label,mass"),
        ("sim-coalescent", "coalescent.csv", "rep_id,time,n_blocks_outside,partition_encoding"),
    ]:
        rep = _run(cmd, n_paths=2, n_reps=2, horizon=0.1, dt=0.05)
        assert rep.verdict == PASS and list(rep.files) == [name]
        assert rep.files[name].splitlines()[0] == header


def test_sim_gfvi_command():
    rep = _run("sim-gfvi", N=20, n_reps=200, times=[0.5], powers=[1, 2, 5])
    assert [c.name for c in rep.criteria] == ["all_zero_p1_t0.5", "all_zero_p2_t0.5"]
    assert any("p=5" in n for n in rep.notes)
    assert rep.files["gfvi.csv"].startswith("rep_id,time,frac_type0,distinct_types")


# --- the command line ---------------------------------------------------------------------------

def test_cli_missing_seed_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["rates", "--n", "4"])
    assert exc.value.code == 2
    assert "seed" in capsys.readouterr().err


def test_cli_config_errors_exit_2(capsys, tmp_path):
    assert cli.main(["rates", "--seed", "1", "--alpha", "2.5"]) == 2
    assert "alpha" in capsys.readouterr().err
    assert cli.main(["rates", "--seed", "1", "--n", "abc"]) == 2
    assert cli.main(["verify-fixed-time", "--seed", "1", "--case", "ii"]) == 2
    assert "open question" in capsys.readouterr().err
    assert cli.main(["verify-fixed-time", "--seed", "1", "--beta", "0.5"]) == 2
    assert cli.main(["rates", "--seed", "1", "--config", str(tmp_path / "none.json")]) == 2


def test_cli_rates_example(capsys):
    code = cli.main(["rates", "--alpha", "1.5", "--c", "1", "--cprime", "1", "--n", "6",
                     "--seed", "7"])
    out = capsys.readouterr()
    assert code == 0
    d = json.loads(out.out)
    assert d["verdict"] == "pass"
    assert all(c["details"]["max_relative_deviation"] <= 1e-10 for c in d["criteria"])
    assert "runtime" in out.err and "runtime" not in out.out


def test_cli_genlab_example(tmp_path, capsys):
    code = cli.main(["genlab", "--suite", "all", "--seed", "7", "--output-dir", str(tmp_path)])
    assert code == 0
    d = json.loads((tmp_path / "genlab.json").read_text())
    assert d["verdict"] == "pass"
    for c in d["criteria"]:
        assert c["details"]["max_deviation"] <= c["details"]["tolerance"]


def test_cli_config_file_and_list_flags(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 2, "n": 3, "coalescent": {"c0": 1.0, "c1": 1.0}}))
    assert cli.main(["rates", "--config", str(cfg)]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["config"]["n"] == 3 and d["config"]["seed"] == 2
    args = cli.build_parser().parse_args(["sim-gfvi", "--seed", "1", "--times", "0.5,1",
                                          "--powers", "[1, 2]", "--N", "30"])
    c = cli.config_from_args(args)
    assert c.times == [0.5, 1.0] and c.powers == [1, 2] and c.N == 30


def test_cli_writes_csv_and_json(tmp_path, capsys):
    out = tmp_path / "o"
    code = cli.main(["sim-coalescent", "--seed", "3", "--n-reps", "4", "--output-dir", str(out)])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["coalescent.csv", "sim-coalescent.json"]


def test_cli_failing_criterion_exits_1(tmp_path, capsys, monkeypatch):
    from fvlab.harness import experiments

    def failing(cfg):
        rep = VerdictReport(cfg.experiment, cfg.to_dict())
        rep.add(Criterion("forced", FAIL))
        return rep

    monkeypatch.setitem(experiments.COMMAND_FUNCS, "rates", failing)
    assert cli.main(["rates", "--seed", "1"]) == 1
