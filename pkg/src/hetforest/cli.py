"""Batch command-line interface.

Every command writes its tables into ``--out-dir`` together with
``manifest.json`` (configuration, library versions and output digests)
and ``run_info.json`` (wall time and worker count).  For a fixed seed all
files except ``run_info.json`` are byte-identical across runs and worker
counts.

Exit codes: 0 success, 2 usage, 3 invalid input, 4 schema mismatch,
5 file I/O, 6 numerical degeneracy.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from ._accel import USE_NUMBA
from .data import (CovariateSchema, DataError, SchemaMismatchError, load_covariates, load_csv,
                   write_csv)
from .features import (BENCHMARK_PERIOD, TARIFFS, TRIAL_PERIOD, TariffSchedule, assemble_dataset,
                       extract_features, feature_names, peak_outcome, read_holidays,
                       read_readings, read_survey)
from .forest import CausalForest, ForestParams, _fit, fit_causal_forest
from .importance import (MAX_DEPTH, ImportanceReport, PermutationTestConfig, column_importance,
                         fold_columns, permutation_pvalues)
from .inference import RankDeficientError, blp, clan, clan_columns, gate, run_splits
from .simulation import BENCHMARK_FOREST, run_appendix_benchmark
from .trees import TreeParams

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_SCHEMA, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5, 6

# settings that change wall time only, kept out of the manifest
_RUNTIME_KEYS = {"workers", "out_dir", "config", "func"}


def _forest_args(p: argparse.ArgumentParser, trees: int = 2000, bag_size: int = 2):
    g = p.add_argument_group("forest")
    g.add_argument("--trees", type=int, default=trees)
    g.add_argument("--sample-fraction", type=float, default=0.5)
    g.add_argument("--mtry-fraction", type=float, default=1.0 / 3.0)
    g.add_argument("--min-node", type=int, default=5, help="minimum leaf size")
    g.add_argument("--min-treat-control", type=int, default=5,
                   help="minimum treated and control rows per leaf")
    g.add_argument("--max-depth", type=int, default=None)
    g.add_argument("--no-honest", dest="honest", action="store_false")
    g.add_argument("--bag-size", type=int, default=bag_size, help="trees sharing a half-sample")


def _data_args(p: argparse.ArgumentParser, outcome: bool = True):
    p.add_argument("--data", required=True, help="CSV with covariates, outcome and treatment")
    p.add_argument("--schema", help="covariate schema JSON (default: all non-reserved columns continuous)")
    p.add_argument("--id-col", default="id")
    if outcome:
        p.add_argument("--outcome-col", default="y")
        p.add_argument("--treatment-col", default="d")
        p.add_argument("--propensity-col", default=None)


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="hetforest", description="Causal forests and sample-splitting inference.")
    root.add_argument("--version", action="version", version=f"hetforest {__version__}")
    sub = root.add_subparsers(dest="command", required=True)

    def command(name, help_, func):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None, help="random seed (required)")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out-dir", required=False, default=None)
        p.add_argument("--config", default=None, help="JSON file of option defaults; flags override")
        p.set_defaults(func=func)
        return p

    p = command("fit", "fit a causal forest", cmd_fit)
    _data_args(p)
    _forest_args(p)

    p = command("predict", "effect estimates with confidence intervals", cmd_predict)
    p.add_argument("--forest", required=True)
    _data_args(p, outcome=False)
    p.add_argument("--level", type=float, default=0.90)

    p = command("importance", "split-frequency importance and permutation p-values", cmd_importance)
    _data_args(p)
    _forest_args(p, trees=2000, bag_size=1)
    p.add_argument("--permutations", type=int, default=1000)
    p.add_argument("--smoothed", action="store_true", help="report (count+1)/(R+1) p-values")

    for name, func in (("blp", cmd_blp), ("gate", cmd_gate), ("clan", cmd_clan)):
        p = command(name, f"{name.upper()} with median aggregation over sample splits", func)
        _data_args(p)
        _forest_args(p, trees=2000, bag_size=1)
        p.add_argument("--splits", type=int, default=1000)
        if name != "blp":
            p.add_argument("--groups", type=int, default=4)
        if name == "gate":
            p.add_argument("--gate-form", choices=("interacted", "printed"), default="interacted")
        if name == "clan":
            p.add_argument("--clan-vars", default=None,
                           help="comma-separated expanded column names (default: all plus outcome)")

    p = command("simulate", "appendix simulation benchmark", cmd_simulate)
    p.add_argument("--designs", default="1,2,3")
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--permutations", type=int, default=100)
    p.add_argument("--n", type=int, default=500)
    _forest_args(p, trees=BENCHMARK_FOREST.num_trees, bag_size=1)

    p = command("features", "household usage features and peak outcome", cmd_features)
    p.add_argument("--readings", required=True)
    p.add_argument("--holidays", default=None)
    p.add_argument("--survey", default=None)
    p.add_argument("--survey-schema", default=None)
    p.add_argument("--assignment", default=None, help="CSV household_id,treatment")
    p.add_argument("--tariff", default="C", help="built-in tariff A-D or a schedule JSON file")
    p.add_argument("--benchmark-start", default=BENCHMARK_PERIOD[0].isoformat())
    p.add_argument("--benchmark-end", default=BENCHMARK_PERIOD[1].isoformat())
    p.add_argument("--trial-start", default=TRIAL_PERIOD[0].isoformat())
    p.add_argument("--trial-end", default=TRIAL_PERIOD[1].isoformat())
    return root


# ------------------------------------------------------------- helpers --

def forest_params(args) -> ForestParams:
    tp = TreeParams(min_leaf=args.min_node, min_treat_control_per_leaf=args.min_treat_control,
                    honest=args.honest, max_depth=args.max_depth)
    return ForestParams(num_trees=args.trees, sample_fraction=args.sample_fraction,
                        mtry_fraction=args.mtry_fraction, tree_params=tp, bag_size=args.bag_size,
                        seed=args.seed)


_RESERVED = ("outcome_col", "treatment_col", "propensity_col", "id_col")


def _schema(args, path=None) -> CovariateSchema:
    if args.schema:
        return CovariateSchema.read(args.schema)
    with open(path or args.data, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    skip = {getattr(args, k, None) for k in _RESERVED}
    return CovariateSchema.continuous([h for h in header if h and h not in skip])


def _dataset(args):
    return load_csv(args.data, _schema(args), args.outcome_col, args.treatment_col, args.id_col,
                    args.propensity_col)


class Output:
    """Collects output files and writes the manifest."""

    def __init__(self, args, command: str):
        self.dir = Path(args.out_dir or ".")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.args = args
        self.command = command
        self.files: list[str] = []

    def csv(self, name: str, frame: pd.DataFrame):
        frame.to_csv(self.dir / name, index=False, lineterminator="\n", float_format=None)
        self.files.append(name)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def finish(self, started: float):
        config = {k: v for k, v in sorted(vars(self.args).items()) if k not in _RUNTIME_KEYS}
        digests = {}
        for name in sorted(self.files):
            digests[name] = hashlib.sha256((self.dir / name).read_bytes()).hexdigest()
        manifest = {
            "command": self.command,
            "config": config,
            "seed": self.args.seed,
            "versions": {"hetforest": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "pandas": pd.__version__, "python": platform.python_version()},
            "numba_kernels": USE_NUMBA,
            "outputs": digests,
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        info = {"wall_time_seconds": round(time.perf_counter() - started, 3), "workers": self.args.workers}
        (self.dir / "run_info.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------ commands --

def cmd_fit(args):
    data = _dataset(args)
    forest = fit_causal_forest(data, forest_params(args), workers=args.workers)
    out = Output(args, "fit")
    forest.save(out.path("forest.zip"))
    pred = forest.predict_interval(data.x)
    pred.insert(0, "id", data.ids)
    out.csv("train_predictions.csv", pred)
    return out


def cmd_predict(args):
    forest = CausalForest.load(args.forest)
    schema = CovariateSchema.read(args.schema) if args.schema else forest.schema
    if schema != forest.schema:
        raise SchemaMismatchError("schema file differs from the forest's training schema")
    x, ids = load_covariates(args.data, schema, args.id_col)
    pred = forest.predict_interval(x, args.level)
    pred.insert(0, "id", ids)
    out = Output(args, "predict")
    out.csv("predictions.csv", pred)
    return out


def cmd_importance(args):
    data = _dataset(args)
    params = forest_params(args)
    if args.permutations < 0:
        raise DataError("--permutations must be >= 0")
    if args.permutations == 0:
        forest = _fit(data, params, True, args.workers, depth_cap=MAX_DEPTH, estimate=False)
        raw = fold_columns(column_importance(forest.split_counts(MAX_DEPTH)), data.schema)
        report = ImportanceReport(tuple(data.schema.names), raw)
    else:
        report = permutation_pvalues(
            data, PermutationTestConfig(args.permutations, params, args.seed, args.smoothed),
            workers=args.workers)
    out = Output(args, "importance")
    out.csv("importance.csv", report.to_frame())
    if report.replicates is not None:
        out.csv("importance_replicates.csv", report.replicate_frame())
    return out


def _inference(args, name):
    data = _dataset(args)
    runs = run_splits(data, args.splits, forest_params(args), args.seed, args.workers)
    if name == "blp":
        res = blp(data, runs=runs)
    elif name == "gate":
        res = gate(data, K=args.groups, runs=runs, form=args.gate_form)
    else:
        cols = clan_columns(data)
        if args.clan_vars:
            wanted = [c.strip() for c in args.clan_vars.split(",") if c.strip()]
            unknown = [c for c in wanted if c not in cols]
            if unknown:
                raise DataError(f"unknown CLAN columns {unknown}; choose from {sorted(cols)}")
            cols = {c: cols[c] for c in wanted}
        res = clan(data, cols, K=args.groups, runs=runs)
    out = Output(args, name)
    out.csv(f"{name}.csv", res.to_frame())
    out.csv(f"{name}_splits.csv", res.splits)
    return out


def cmd_blp(args):
    return _inference(args, "blp")


def cmd_gate(args):
    return _inference(args, "gate")


def cmd_clan(args):
    return _inference(args, "clan")


def cmd_simulate(args):
    try:
        designs = tuple(int(v) for v in args.designs.split(","))
    except ValueError:
        raise DataError(f"--designs must be a comma-separated list, got {args.designs!r}") from None
    if args.iterations < 1 or args.permutations < 1:
        raise DataError("--iterations and --permutations must be >= 1")
    df = run_appendix_benchmark(designs, args.iterations, args.permutations, forest_params(args),
                                args.n, args.seed, args.workers)
    out = Output(args, "simulate")
    out.csv("simulation.csv", df)
    return out


def _date(text: str, flag: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise DataError(f"{flag}: bad date {text!r}") from None


def cmd_features(args):
    schedule = TARIFFS[args.tariff] if args.tariff in TARIFFS else TariffSchedule.read(args.tariff)
    holidays = read_holidays(args.holidays) if args.holidays else set()
    b0, b1 = _date(args.benchmark_start, "--benchmark-start"), _date(args.benchmark_end, "--benchmark-end")
    t0, t1 = _date(args.trial_start, "--trial-start"), _date(args.trial_end, "--trial-end")
    panels = read_readings(args.readings)
    feats = {h: extract_features(p, b0, b1, holidays, schedule) for h, p in panels.items()}
    outcome = {h: peak_outcome(p, t0, t1, holidays, schedule) for h, p in panels.items()}
    ids = sorted(panels)
    out = Output(args, "features")
    table = pd.DataFrame([feats[h] for h in ids], columns=feature_names())
    table.insert(0, "household_id", ids)
    out.csv("features.csv", table)
    out.csv("outcome.csv", pd.DataFrame({"household_id": ids, "peak_kwh": [outcome[h] for h in ids]}))
    if args.assignment:
        assign = pd.read_csv(args.assignment, dtype={"household_id": str})
        if not {"household_id", "treatment"} <= set(assign.columns):
            raise DataError(f"{args.assignment}: needs household_id and treatment columns")
        treatment = dict(zip(assign["household_id"].str.strip(), assign["treatment"].astype(int)))
        survey = schema = None
        if args.survey:
            if not args.survey_schema:
                raise DataError("--survey needs --survey-schema")
            schema = CovariateSchema.read(args.survey_schema)
            survey = read_survey(args.survey, schema)
        # drop monthly columns that are empty for any household
        keep = [f for f in feature_names() if all(np.isfinite(feats[h][f]) for h in ids)]
        data = assemble_dataset({h: {f: feats[h][f] for f in keep} for h in ids}, outcome,
                                treatment, survey, schema)
        write_csv(data, out.path("dataset.csv"))
        data.schema.write(out.path("schema.json"))
    return out


# ---------------------------------------------------------------- main --

def _load_config(argv) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    try:
        doc = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{known.config}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise DataError(f"{known.config}: expected a JSON object")
    return {k.replace("-", "_"): v for k, v in doc.items()}


def _subparsers(parser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config = _load_config(argv)
    except (OSError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) else EXIT_INPUT
    unknown = {}
    for name, sp in _subparsers(parser).items():
        # config values become defaults so explicit flags win
        dests = {a.dest for a in sp._actions}
        unknown[name] = sorted(set(config) - dests)
        sp.set_defaults(**{k: v for k, v in config.items() if k in dests})
        for a in sp._actions:
            if a.dest in config:
                a.required = False
    args = parser.parse_args(argv)
    if config and unknown[args.command]:
        print(f"error: unknown config keys for {args.command}: {unknown[args.command]}", file=sys.stderr)
        return EXIT_INPUT
    if args.seed is None:
        print("error: --seed is required", file=sys.stderr)
        return EXIT_USAGE
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    started = time.perf_counter()
    try:
        out = args.func(args)
        out.finish(started)
    except SchemaMismatchError as exc:
        print(f"schema mismatch: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except RankDeficientError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
