"""Command-line entry point: ``mtgnn <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np
import yaml

from . import data as D
from . import experiments as X
from .featurize import DEFAULT_SCHEMA
from .gnn import KINDS, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingFailure, evaluate, train_model

log = logging.getLogger("mtgnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def config_schema() -> dict:
    return json.loads((resources.files("mtgnn") / "config_schema.json").read_text(encoding="utf-8"))


DEFAULTS = {
    "seeds": [0],
    "out": "results",
    "freesolv_threshold": -10.0,
    "split": {"train_ratio": 0.8, "keyed": True},
    "split_repeats": dict(X.DEFAULT_SPLIT_REPEATS),
    "train": {},
    "experiment": {},
    "datasets": {},
}


def load_config(path: str | None) -> dict:
    doc: dict = {}
    if path:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
    validate_config(doc)
    return doc


def validate_config(doc: dict) -> None:
    try:
        jsonschema.validate(doc, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_assignments(items: Sequence[str] | None, flag: str) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"{flag} expects NAME=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _csv_list(text: str | None) -> list[str] | None:
    if text is None:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults <- config file <- command-line flags; validated after merging."""
    cfg = _merge(DEFAULTS, load_config(args.config))
    train = cfg["train"]
    exp = cfg["experiment"]
    if args.out is not None:
        cfg["out"] = args.out
    if args.seeds is not None:
        try:
            cfg["seeds"] = [int(s) for s in _csv_list(args.seeds)]
        except ValueError:
            raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    if args.data_dir is not None:
        cfg["data_dir"] = args.data_dir
    cfg["datasets"].update(_parse_assignments(args.dataset, "--dataset"))
    if args.tasks is not None:
        cfg["tasks"] = _csv_list(args.tasks)
    if args.kind is not None:
        train["kind"] = args.kind
    if args.epochs is not None:
        train["max_epochs"] = args.epochs
    if args.jobs is not None:
        train["jobs"] = args.jobs
    for name in ("threshold", "min_overlap", "on_undefined", "override_file", "target", "layer",
                 "bins", "repeats", "warmup", "molecules"):
        value = getattr(args, name, None)
        if value is not None:
            exp[name] = value
    for name in ("kinds", "holdouts", "companions"):
        value = getattr(args, name, None)
        if value is not None:
            exp[name] = _csv_list(value)
    if getattr(args, "fractions", None) is not None:
        exp["fractions"] = [float(f) for f in _csv_list(args.fractions)]
    if getattr(args, "task_counts", None) is not None:
        exp["task_counts"] = [int(k) for k in _csv_list(args.task_counts)]
    if getattr(args, "groups_file", None) is not None:
        cfg["groups_file"] = args.groups_file
    validate_config(cfg)
    try:
        TrainConfig.from_dict(train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training settings: {exc}") from None
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t.setdefault("seed", cfg["seeds"][0])
    return TrainConfig.from_dict(t)


def split_spec(cfg: dict) -> X.SplitSpec:
    return X.SplitSpec(**cfg["split"])


def run_dir(cfg: dict) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    path = Path(cfg["out"]) / f"{stamp}-{X.fingerprint(cfg)[:8]}"
    path.mkdir(parents=True, exist_ok=False)
    (path / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# data helpers


def available_tasks(cfg: dict) -> list[str]:
    """Known tasks that resolve to a file, in canonical order."""
    _apply_data_dir(cfg)
    out = []
    for t in D.TASK_ORDER:
        try:
            D.resolve_dataset(t, cfg["datasets"].get(t))
            out.append(t)
        except D.FileUnreadable:
            continue
    return out


def _apply_data_dir(cfg: dict) -> None:
    if cfg.get("data_dir"):
        os.environ[D.DATA_DIR_ENV] = cfg["data_dir"]


def tasks_of(cfg: dict) -> list[str]:
    return list(cfg.get("tasks") or available_tasks(cfg))


def groups_of(cfg: dict) -> list[list[str]]:
    if cfg.get("groups"):
        return [list(g) for g in cfg["groups"]]
    if cfg.get("groups_file"):
        try:
            return D.read_groups(cfg["groups_file"])
        except OSError as exc:
            raise D.FileUnreadable(f"cannot read groups file {cfg['groups_file']}: {exc}") from exc
    return [tasks_of(cfg)]


def load_table(cfg: dict, tasks: Sequence[str]) -> D.TaskTable:
    _apply_data_dir(cfg)
    paths = {t: cfg["datasets"][t] for t in tasks if t in cfg["datasets"]}
    for t, p in paths.items():
        if not Path(p).exists():
            raise D.FileUnreadable(f"dataset file for {t} not found: {p}")
    table = D.load_tasks(tasks, paths, cfg.get("freesolv_threshold"))
    for src in table.report.get("sources", []):
        log.info("loaded %s", src)
    return table


# ---------------------------------------------------------------------------
# commands


def cmd_select_targets(cfg: dict, args) -> int:
    exp = cfg["experiment"]
    tasks = tasks_of(cfg)
    table = load_table(cfg, tasks)
    corr = D.correlation_matrix(table, exp.get("min_overlap", 20))
    override = D.read_groups(exp["override_file"]) if exp.get("override_file") else None
    groups = D.select_target_groups(corr, exp.get("threshold", 0.5), override,
                                    exp.get("on_undefined", "skip"))
    out = run_dir(cfg)
    with open(out / "correlation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task_a", "task_b", "r", "overlap"])
        for i, a in enumerate(corr.task_names):
            for j, b in enumerate(corr.task_names):
                w.writerow([a, b, "" if np.isnan(corr.r[i, j]) else repr(float(corr.r[i, j])),
                            int(corr.overlap[i, j])])
    D.write_groups(out / "groups.txt", groups)
    if args.groups_out:
        D.write_groups(args.groups_out, groups)
    for g in groups:
        print(",".join(g))
    print(f"wrote {out / 'groups.txt'}")
    return EXIT_OK


def _checkpoint_meta(cfg: dict, tasks, fold, seed, std, test_rmse) -> dict:
    return {"tasks": list(tasks), "fold": fold, "seed": seed, "standardizer": std.to_dict(),
            "split": cfg["split"], "folds": cfg["train"].get("folds", 5),
            "datasets": {t: str(D.resolve_dataset(t, cfg["datasets"].get(t))) for t in tasks},
            "freesolv_threshold": cfg.get("freesolv_threshold"), "test_rmse": test_rmse}


def cmd_train(cfg: dict, args) -> int:
    tasks = tasks_of(cfg)
    table = load_table(cfg, tasks)
    tc = train_config(cfg)
    plan = split_spec(cfg).plan(table, tc.seed, tc.folds)
    result = train_model(table, tasks, plan, tc)
    out = run_dir(cfg)
    rows = []
    for f in result.folds:
        meta = _checkpoint_meta(cfg, tasks, f.fold, tc.seed, f.standardizer, f.test.rmse)
        save_checkpoint(f.model, out / f"fold{f.fold}.ckpt.json", meta)
        f.history.to_csv(out / f"history_fold{f.fold}.csv")
        f.test.to_csv(out / f"predictions_fold{f.fold}.csv")
        rows += [{"fold": f.fold, "task": t, "rmse": v, "n": f.test.counts[t]}
                 for t, v in f.test.rmse.items()]
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["fold", "task", "rmse", "n"])
        w.writeheader()
        for r in rows:
            w.writerow(dict(r, rmse=repr(r["rmse"])))
    summary = result.summary()
    (out / "metrics.json").write_text(json.dumps({"summary": summary, "report": table.report},
                                                 indent=2, default=str), encoding="utf-8")
    for t, s in summary.items():
        print(f"{t}: RMSE {s['mean']:.4f} +/- {s['std']:.4f} over {s['n']} folds")
    print(f"results in {out}")
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    tasks = meta["tasks"]
    datasets = dict(meta.get("datasets", {}))
    datasets.update(cfg["datasets"])
    cfg = dict(cfg, datasets=datasets, freesolv_threshold=meta.get("freesolv_threshold", -10.0),
               split=meta.get("split", cfg["split"]))
    table = load_table(cfg, tasks)
    if args.rows == "test":
        plan = split_spec(cfg).plan(table, meta["seed"], meta.get("folds", 5))
        present = table.mask[:, [table.task_names.index(t) for t in tasks]].any(axis=1)
        rows = plan.test[present[plan.test]]
    else:
        rows = np.arange(len(table))
    std = D.Standardizer.from_dict(meta["standardizer"])
    res = evaluate(model, table, rows, tasks, std)
    out = Path(args.metrics_out) if args.metrics_out else run_dir(cfg) / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "rmse", "n", "recorded_rmse"])
        for t in tasks:
            rec = meta.get("test_rmse", {}).get(t, "") if args.rows == "test" else ""
            w.writerow([t, repr(res.rmse[t]), res.counts[t], repr(rec) if rec != "" else ""])
            print(f"{t}: RMSE {res.rmse[t]:.6f} (n={res.counts[t]})")
    if args.predictions_out:
        res.to_csv(args.predictions_out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_cv(cfg: dict, args) -> int:
    groups = groups_of(cfg)
    table = load_table(cfg, sorted({t for g in groups for t in g}, key=_task_order))
    out = run_dir(cfg)
    rep = X.run_single_vs_multi(table, groups, train_config(cfg),
                                cfg["experiment"].get("kinds", [cfg["train"].get("kind", "GIN")]),
                                cfg["seeds"], split_spec(cfg), cfg["split_repeats"], out)
    _print_rows(rep)
    return EXIT_OK


def cmd_group_comparison(cfg: dict, args) -> int:
    groups = groups_of(cfg)
    tasks = tasks_of(cfg)
    table = load_table(cfg, tasks)
    rep = X.run_group_comparison(table, groups, train_config(cfg),
                                 cfg["experiment"].get("kinds", list(KINDS)), cfg["seeds"],
                                 split_spec(cfg), tasks, run_dir(cfg))
    _print_rows(rep)
    return EXIT_OK


def cmd_transfer(cfg: dict, args) -> int:
    tasks = tasks_of(cfg)
    if len(tasks) < 2:
        raise ConfigError("transfer needs at least two tasks")
    table = load_table(cfg, tasks)
    holdouts = cfg["experiment"].get("holdouts") or tasks
    unknown = [h for h in holdouts if h not in tasks]
    if unknown:
        raise ConfigError(f"holdout task(s) not among the loaded tasks: {unknown}")
    rep = X.run_transfer_all(table, holdouts, train_config(cfg), cfg["seeds"],
                             split_spec(cfg), run_dir(cfg))
    _print_rows(rep)
    if not rep.notes["frozen_parameters_unchanged"]:
        raise TrainingFailure("frozen trunk parameters changed during head retraining")
    return EXIT_OK


def cmd_size_study(cfg: dict, args) -> int:
    exp = cfg["experiment"]
    target = exp.get("target")
    if not target:
        raise ConfigError("size-study needs a target task (--target)")
    companions = exp.get("companions") or [t for t in tasks_of(cfg) if t != target]
    table = load_table(cfg, [target, *companions])
    rep = X.run_size_study(table, target, companions, train_config(cfg),
                           exp.get("fractions", X.SIZE_FRACTIONS), cfg["seeds"],
                           split_spec(cfg), run_dir(cfg))
    _print_rows(rep)
    return EXIT_OK


def cmd_bench_inference(cfg: dict, args) -> int:
    exp = cfg["experiment"]
    tasks = cfg.get("tasks") or ["FreeSolv"]
    table = load_table(cfg, tasks)
    n = min(exp.get("molecules", 648), len(table))
    counts = exp.get("task_counts", [3, 4, 5, 6])
    models = X.untrained_bench_models(counts, cfg["train"].get("kind", "GIN"), cfg["seeds"][0])
    rep = X.run_inference_bench(table, models, np.arange(n), exp.get("repeats", 10),
                                exp.get("warmup", 2), run_dir(cfg))
    _print_rows(rep)
    return EXIT_OK


def cmd_export_weights(cfg: dict, args) -> int:
    exp = cfg["experiment"]
    sources = _parse_assignments(args.checkpoint, "--checkpoint")
    if not sources:
        raise ConfigError("export-weights needs at least one --checkpoint LABEL=PATH")
    models = {}
    for label, path in sources.items():
        if not Path(path).exists():
            raise D.FileUnreadable(f"checkpoint not found: {path}")
        models[label] = load_checkpoint(path)[0]
    rep = X.export_weight_histograms(models, exp.get("layer", "head.fc1"), exp.get("bins", 50),
                                     run_dir(cfg))
    _print_rows(rep)
    return EXIT_OK


def cmd_feature_schema(cfg: dict, args) -> int:
    doc = dict(DEFAULT_SCHEMA.to_dict(), fingerprint=DEFAULT_SCHEMA.fingerprint())
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def _task_order(task: str):
    return (D.TASK_ORDER.index(task) if task in D.TASK_ORDER else len(D.TASK_ORDER), task)


def _print_rows(rep: X.ExperimentReport) -> None:
    for row in rep.rows:
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in row.items()))
    for a in rep.artifacts:
        print(f"wrote {a}")


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="YAML run configuration (validated against the config schema)")
    g.add_argument("--out", help="results root; each run writes <out>/<run-id>/ (default: results)")
    g.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2 (default: 0)")
    g.add_argument("--data-dir", help=f"directory of <task>.csv files (also via ${D.DATA_DIR_ENV})")
    g.add_argument("--dataset", action="append", metavar="TASK=PATH",
                   help="explicit CSV (header smiles,value) for one task; repeatable")
    g.add_argument("--tasks", help="comma-separated task names (default: every task with a data file)")
    g.add_argument("--kind", choices=KINDS, type=str.upper, help="model architecture")
    g.add_argument("--epochs", type=int, help="maximum training epochs")
    g.add_argument("--jobs", type=int, help="parallel worker processes for independent folds")
    g.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")


COMMANDS = {}


def _command(sub, name: str, func, help_text: str) -> argparse.ArgumentParser:
    p = sub.add_parser(name, help=help_text, description=help_text)
    _common(p)
    p.set_defaults(func=func)
    COMMANDS[name] = p
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtgnn", description="Multitask GNN regression on SMILES data.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = _command(sub, "select-targets", cmd_select_targets,
                 "correlate tasks and group those with |r| >= threshold")
    p.add_argument("--threshold", type=float, help="absolute correlation threshold (default 0.5)")
    p.add_argument("--min-overlap", type=int, help="molecules needed for a defined r (default 20)")
    p.add_argument("--override-file", help="bucket file splitting components (one group per line)")
    p.add_argument("--on-undefined", choices=["raise", "skip"],
                   help="what to do with pairs lacking a defined r (default skip)")
    p.add_argument("--groups-out", help="also write the groups file to this path")

    _command(sub, "train", cmd_train, "cross-validated training of one task group; saves checkpoints")

    p = _command(sub, "cv", cmd_cv, "single-task vs multitask comparison per group (table2.csv)")
    p.add_argument("--groups-file", help="groups file (one comma-separated group per line)")
    p.add_argument("--kinds", help="comma-separated architectures")

    p = _command(sub, "eval", cmd_eval, "evaluate a checkpoint on its recorded test split or all rows")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
    p.add_argument("--rows", choices=["test", "all"], default="test", help="rows to score")
    p.add_argument("--metrics-out", help="metrics CSV path (default: inside a new run directory)")
    p.add_argument("--predictions-out", help="optional per-molecule predictions CSV")

    p = _command(sub, "transfer", cmd_transfer,
                 "leave-one-task-out transfer with a frozen trunk (table4.csv)")
    p.add_argument("--holdouts", help="comma-separated held-out tasks (default: every task)")

    p = _command(sub, "size-study", cmd_size_study,
                 "single vs multitask over training-set fractions (fig4a.csv)")
    p.add_argument("--target", help="task whose training rows are subsampled")
    p.add_argument("--companions", help="comma-separated companion tasks (default: all others)")
    p.add_argument("--fractions", help="comma-separated fractions (default 0.2,...,0.9)")

    p = _command(sub, "bench-inference", cmd_bench_inference,
                 "time one K-task forward against K single-task forwards (fig6.csv)")
    p.add_argument("--task-counts", help="comma-separated K values (default 3,4,5,6)")
    p.add_argument("--molecules", type=int, help="molecules in the timed batch (default 648)")
    p.add_argument("--repeats", type=int, help="timed repeats; the median is reported (default 10)")
    p.add_argument("--warmup", type=int, help="untimed warm-up runs (default 2)")

    p = _command(sub, "export-weights", cmd_export_weights,
                 "weight histograms of one layer per checkpoint (fig5_<label>.csv)")
    p.add_argument("--checkpoint", action="append", metavar="LABEL=PATH",
                   help="labelled checkpoint; repeatable (e.g. single=a.json multi=b.json)")
    p.add_argument("--layer", help="layer name (default head.fc1)")
    p.add_argument("--bins", type=int, help="histogram bins (default 50)")

    p = _command(sub, "group-comparison", cmd_group_comparison,
                 "selected groups vs one all-task model per architecture (table3.csv)")
    p.add_argument("--groups-file", help="groups file (one comma-separated group per line)")
    p.add_argument("--kinds", help="comma-separated architectures (default all three)")

    _command(sub, "feature-schema", cmd_feature_schema, "print the atom feature schema as JSON")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.DataError, D.InvalidFraction) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingFailure as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except KeyError as exc:
        print(f"config error: unknown name {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
