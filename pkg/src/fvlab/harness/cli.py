"""``fvlab <command> [--config file.json] [--flag value ...]``.

Exit codes: 0 when every criterion passes, 1 when any fails, 2 for an
inconclusive verdict or an invalid configuration.  Reports go to
``<output_dir>/<command>.json`` (CSV outputs alongside) or, without an
output directory, to standard output.  The wall-clock runtime is printed
to standard error only, so that reports are byte-identical across runs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from typing import Optional, Sequence

from .config import COMMANDS, ConfigError, ExperimentConfig, build_config, load_json
from .experiments import run, write_outputs

_HELP = {
    "verify-theorem1": "duality at the time-changed times, both cases",
    "verify-fixed-time": "fixed-time genealogy with a random clock, case i",
    "verify-independence": "independence of the clock and the ratio (case i), "
                           "dependence (case ii)",
    "verify-extinction": "hitting frequencies of zero across the extinction thresholds",
    "rates": "coalescent rate table checked against quadrature",
    "genlab": "deterministic generator identities",
    "sim-feller": "Feller CBI paths as CSV",
    "sim-stable": "stable CBI paths as CSV",
    "sim-flow": "measure-valued flow as CSV",
    "sim-gfvi": "particle system replicates as CSV, with moment estimates",
    "sim-coalescent": "coalescent trajectories as CSV",
}

_LIST_FIELDS = {"times", "powers", "sensitivity", "pure_cb_horizons"}
_INT_FIELDS = {"seed", "n_paths", "n_outer", "n_reps", "n_cells", "n", "n_cases", "N"}
_STR_FIELDS = {"output_dir", "case", "suite"}


def _parse_value(name: str, text: str):
    try:
        if name in _STR_FIELDS:
            return text
        if name in _INT_FIELDS:
            return int(text)
        if name in _LIST_FIELDS:
            if text.strip().startswith("["):
                return json.loads(text)
            return [json.loads(x) for x in text.split(",") if x.strip()]
        if name == "coalescent":
            return text if text == "derive" else json.loads(text)
        return float(text)
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(name, f"cannot parse {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fvlab",
        description="Verification experiments and simulators for CBI ratio processes.",
        epilog="exit status: 0 all criteria pass, 1 a criterion fails, "
               "2 inconclusive or invalid configuration")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for cmd in COMMANDS:
        p = sub.add_parser(cmd, help=_HELP[cmd], description=_HELP[cmd], allow_abbrev=False)
        p.add_argument("--config", help="JSON file mirroring the configuration fields")
        for f in fields(ExperimentConfig):
            if f.name == "experiment":
                continue
            flag = "--" + f.name.replace("_", "-")
            names = [flag] if flag == "--" + f.name else [flag, "--" + f.name]
            p.add_argument(*names, dest=f.name, default=None, metavar="VALUE")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    file_values = load_json(args.config) if args.config else {}
    flags = {}
    for f in fields(ExperimentConfig):
        text = getattr(args, f.name, None)
        if text is not None:
            flags[f.name] = _parse_value(f.name, text)
    return build_config(args.command, file_values, flags)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        if exc.field == "seed":
            parser.error(str(exc))  # usage error, exit status 2
        print(f"fvlab: config error: {exc}", file=sys.stderr)
        return 2
    start = time.perf_counter()
    try:
        rep = run(cfg)
    except ConfigError as exc:
        print(f"fvlab: config error: {exc}", file=sys.stderr)
        return 2
    elapsed = time.perf_counter() - start
    if cfg.output_dir:
        for path in write_outputs(rep, cfg.output_dir):
            print(f"wrote {path}", file=sys.stderr)
    else:
        for name, text in sorted(rep.files.items()):
            sys.stdout.write(text)
        if not rep.files:
            sys.stdout.write(rep.to_json())
    print(f"{cfg.experiment}: {rep.verdict} (runtime {elapsed:.1f} s)", file=sys.stderr)
    return rep.exit_code


if __name__ == "__main__":
    sys.exit(main())
