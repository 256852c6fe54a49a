"""Scripted studies: CV comparisons, transfer, training-set size, inference timing, weights.

Every runner returns an :class:`ExperimentReport` and writes its CSV next to
the report when ``out_dir`` is given.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_info, threadpool_limits

from .data import (SplitPlan, TaskTable, make_folds, make_keyed_split, make_split,
                   subsample_training)
from .featurize import batch_graphs
from .gnn import Model, ModelConfig, is_trunk
from .train import TrainConfig, TrainResult, train_model

log = logging.getLogger(__name__)

SIZE_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(2, 10))
DEFAULT_SPLIT_REPEATS = {"FreeSolv": 4}


# ---------------------------------------------------------------------------
# report


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def environment_note() -> dict:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo", encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {
        "cpu": cpu,
        "logical_cpus": os.cpu_count(),
        "blas_threads": [{"api": p.get("internal_api"), "threads": p.get("num_threads")}
                         for p in threadpool_info()],
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


@dataclass
class Metric:
    condition: str
    task: str
    mean: float
    std: float
    repeats: int
    seeds: list[int]
    values: list[float]

    @classmethod
    def of(cls, condition: str, task: str, values: Sequence[float], seeds: Sequence[int]) -> "Metric":
        v = np.asarray(values, dtype=np.float64)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        return cls(condition, task, float(v.mean()), std, int(v.size), list(seeds), v.tolist())


@dataclass
class ExperimentReport:
    name: str
    config: dict
    metrics: list[Metric] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    environment: dict = field(default_factory=environment_note)
    artifacts: list[str] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def config_fingerprint(self) -> str:
        return fingerprint(self.config)

    def metric(self, condition: str, task: str) -> Metric:
        for m in self.metrics:
            if m.condition == condition and m.task == task:
                return m
        raise KeyError((condition, task))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config_fingerprint": self.config_fingerprint,
            "config": self.config,
            "metrics": [asdict(m) for m in self.metrics],
            "rows": self.rows,
            "environment": self.environment,
            "artifacts": self.artifacts,
            "notes": self.notes,
        }

    def write_csv(self, path: str | Path, columns: Sequence[str] | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = list(columns or (self.rows[0].keys() if self.rows else []))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=columns)
            w.writeheader()
            for row in self.rows:
                w.writerow({c: row.get(c, "") for c in columns})
        self.artifacts.append(str(path))
        return path

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(str(path))
        path.write_text(json.dumps(self.to_dict(), indent=2, default=float), encoding="utf-8")
        return path


def welch(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided Welch t-test p-value; NaN when either side has < 2 values or no spread."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size < 2 or b.size < 2 or (a.std() == 0 and b.std() == 0):
        return float("nan")
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


# ---------------------------------------------------------------------------
# cross-validation building block


@dataclass
class SplitSpec:
    """How train/test/fold indices are drawn from a table."""
    train_ratio: float = 0.8
    keyed: bool = True

    def plan(self, table: TaskTable, seed: int, folds: int) -> SplitPlan:
        if self.keyed:
            return make_keyed_split(table, self.train_ratio, seed, folds)
        return make_split(len(table), self.train_ratio, seed, folds)


def split_seeds(group: Sequence[str], base_seeds: Sequence[int],
                split_repeats: dict[str, int] | None = None) -> list[int]:
    """Seeds for a group: the base list, extended when a task asks for more repeats."""
    repeats = dict(DEFAULT_SPLIT_REPEATS if split_repeats is None else split_repeats)
    need = max([len(base_seeds)] + [repeats.get(t, 1) for t in group])
    seeds = list(base_seeds)
    nxt = max(seeds) + 1 if seeds else 0
    while len(seeds) < need:
        seeds.append(nxt)
        nxt += 1
    return seeds


@dataclass
class CVOutcome:
    group: list[str]
    seeds: list[int]
    results: list[TrainResult]

    def fold_rmse(self, task: str) -> list[float]:
        return [v for r in self.results for v in r.fold_rmse(task)]


def cross_validate(table: TaskTable, group: Sequence[str], config: TrainConfig,
                   seeds: Sequence[int], split: SplitSpec | None = None,
                   plan_fn: Callable[[int], SplitPlan] | None = None, **kw) -> CVOutcome:
    """Run :func:`train_model` once per seed; fold RMSEs are pooled across seeds."""
    split = split or SplitSpec()
    results = []
    for s in seeds:
        cfg = TrainConfig.from_dict(dict(config.to_dict(), seed=s))
        plan = plan_fn(s) if plan_fn else split.plan(table, s, cfg.folds)
        results.append(train_model(table, group, plan, cfg, **kw))
    return CVOutcome(list(group), list(seeds), results)


# ---------------------------------------------------------------------------
# single task vs multitask in its group


def run_single_vs_multi(table: TaskTable, groups: Sequence[Sequence[str]], config: TrainConfig,
                        kinds: Sequence[str] = ("GIN",), seeds: Sequence[int] = (0,),
                        split: SplitSpec | None = None,
                        split_repeats: dict[str, int] | None = None,
                        out_dir: str | Path | None = None) -> ExperimentReport:
    split = split or SplitSpec()
    report = ExperimentReport("single-vs-multi", {
        "groups": [list(g) for g in groups], "kinds": list(kinds), "seeds": list(seeds),
        "split": asdict(split), "train": config.to_dict(), "split_repeats": split_repeats})
    single_cache: dict[tuple[str, str], tuple[list[float], list[int]]] = {}
    for kind in kinds:
        cfg = TrainConfig.from_dict(dict(config.to_dict(), kind=kind))
        for group in groups:
            gseeds = split_seeds(group, seeds, split_repeats)
            multi = cross_validate(table, group, cfg, gseeds, split)
            for task in group:
                key = (kind, task)
                if key not in single_cache:
                    tseeds = split_seeds([task], seeds, split_repeats)
                    single = cross_validate(table, [task], cfg, tseeds, split)
                    single_cache[key] = (single.fold_rmse(task), tseeds)
                s_vals, s_seeds = single_cache[key]
                m_vals = multi.fold_rmse(task)
                ms = Metric.of(f"{kind}/single", task, s_vals, s_seeds)
                mm = Metric.of(f"{kind}/multi[{'+'.join(group)}]", task, m_vals, gseeds)
                report.metrics += [ms, mm]
                p = welch(s_vals, m_vals)
                report.rows.append({
                    "kind": kind, "task": task, "group": "+".join(group),
                    "single_mean": ms.mean, "single_std": ms.std,
                    "multi_mean": mm.mean, "multi_std": mm.std,
                    "delta": ms.mean - mm.mean, "p_value": p,
                    "multi_better": bool(p < 0.05 and mm.mean < ms.mean),
                    "single_better": bool(p < 0.05 and ms.mean < mm.mean),
                    "repeats": mm.repeats,
                })
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "table2.csv")
        report.save(Path(out_dir) / "table2.json")
    return report


# ---------------------------------------------------------------------------
# selected groups vs one all-task model


def run_group_comparison(table: TaskTable, groups: Sequence[Sequence[str]], config: TrainConfig,
                         kinds: Sequence[str] = ("GIN", "GGRNET", "GAIN"),
                         seeds: Sequence[int] = (0,), split: SplitSpec | None = None,
                         all_tasks: Sequence[str] | None = None,
                         out_dir: str | Path | None = None) -> ExperimentReport:
    """Each task scored under its selected group(s) and under one model over ``all_tasks``.

    A task listed in several groups is scored by averaging its fold RMSEs
    over every group that contains it.
    """
    split = split or SplitSpec()
    all_tasks = list(all_tasks or table.task_names)
    report = ExperimentReport("group-comparison", {
        "groups": [list(g) for g in groups], "all_tasks": all_tasks, "kinds": list(kinds),
        "seeds": list(seeds), "split": asdict(split), "train": config.to_dict()})
    for kind in kinds:
        cfg = TrainConfig.from_dict(dict(config.to_dict(), kind=kind))
        grouped: dict[str, list[float]] = {}
        for group in groups:
            out = cross_validate(table, group, cfg, seeds, split)
            for t in group:
                grouped.setdefault(t, []).extend(out.fold_rmse(t))
        everything = cross_validate(table, all_tasks, cfg, seeds, split)
        for task in all_tasks:
            a = Metric.of(f"{kind}/all", task, everything.fold_rmse(task), seeds)
            report.metrics.append(a)
            row = {"kind": kind, "task": task, "all_mean": a.mean, "all_std": a.std}
            if task in grouped:
                g = Metric.of(f"{kind}/grouped", task, grouped[task], seeds)
                report.metrics.append(g)
                row.update(grouped_mean=g.mean, grouped_std=g.std,
                           p_value=welch(g.values, a.values))
            report.rows.append(row)
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "table3.csv",
                         ["kind", "task", "grouped_mean", "grouped_std", "all_mean", "all_std", "p_value"])
        report.save(Path(out_dir) / "table3.json")
    return report


# ---------------------------------------------------------------------------
# transfer learning


def trunk_names(config: ModelConfig) -> list[str]:
    return [n for n in Model(config).params if is_trunk(n)]


def run_transfer(table: TaskTable, holdout: str, donors: Sequence[str], config: TrainConfig,
                 seeds: Sequence[int] = (0,), split: SplitSpec | None = None,
                 out_dir: str | Path | None = None) -> ExperimentReport:
    """Donor multitask model -> frozen trunk -> retrain the head on ``holdout``."""
    return run_transfer_all(table, [holdout], config, seeds, split, out_dir,
                            donors={holdout: list(donors)})


def run_transfer_all(table: TaskTable, holdouts: Sequence[str], config: TrainConfig,
                     seeds: Sequence[int] = (0,), split: SplitSpec | None = None,
                     out_dir: str | Path | None = None,
                     donors: dict[str, list[str]] | None = None) -> ExperimentReport:
    """Leave-one-out transfer for every task in ``holdouts`` (donors: all other tasks)."""
    split = split or SplitSpec()
    donors = donors or {h: [t for t in table.task_names if t != h] for h in holdouts}
    report = ExperimentReport("transfer", {
        "holdouts": list(holdouts), "donors": donors, "seeds": list(seeds),
        "split": asdict(split), "train": config.to_dict()})
    frozen_ok = True
    for holdout in holdouts:
        dset = list(donors[holdout])
        if not dset or holdout in dset:
            raise ValueError(f"donor set for {holdout!r} must be non-empty and exclude it: {dset}")
        frozen = trunk_names(config.model_config(1))
        transfer_vals, single_vals = [], []
        for s in seeds:
            cfg = TrainConfig.from_dict(dict(config.to_dict(), seed=s))
            plan = split.plan(table, s, cfg.folds)
            donor = train_model(table, dset, plan, cfg)
            states = [f.model.state() for f in donor.folds]
            moved = train_model(table, [holdout], plan, cfg, init_state=states, freeze=frozen)
            for f, st in zip(moved.folds, states):
                for n in frozen + ["conv.bn.running_mean", "conv.bn.running_var"]:
                    if not np.array_equal(f.model.state()[n], st[n]):
                        frozen_ok = False
                        log.error("frozen parameter %s changed in fold %d", n, f.fold)
            single = train_model(table, [holdout], plan, cfg)
            transfer_vals += moved.fold_rmse(holdout)
            single_vals += single.fold_rmse(holdout)
        mt = Metric.of("transfer", holdout, transfer_vals, seeds)
        ms = Metric.of("single", holdout, single_vals, seeds)
        report.metrics += [mt, ms]
        report.rows.append({
            "holdout": holdout, "donors": "+".join(dset),
            "transfer_mean": mt.mean, "transfer_std": mt.std,
            "single_mean": ms.mean, "single_std": ms.std,
            "p_value": welch(mt.values, ms.values), "repeats": mt.repeats,
        })
    report.notes["frozen_parameters_unchanged"] = frozen_ok
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "table4.csv")
        report.save(Path(out_dir) / "table4.json")
    return report


# ---------------------------------------------------------------------------
# training-set size


def size_plan(table: TaskTable, base: SplitPlan, target: str, fraction: float,
              folds: int, seed: int) -> SplitPlan:
    """Keep ``fraction`` of the target's training rows; companion-only rows stay."""
    col = table.task_names.index(target)
    has_target = table.mask[base.train, col]
    kept = subsample_training(base.train[has_target], fraction, seed)
    others = base.train[~has_target]
    train = np.sort(np.concatenate([kept, others]))
    # fold the two populations separately so every validation fold sees the target
    parts = make_folds(kept, folds, seed)
    if len(others) >= folds:
        parts = [(np.sort(np.concatenate([f, of])), np.sort(np.concatenate([v, ov])))
                 for (f, v), (of, ov) in zip(parts, make_folds(others, folds, seed))]
    else:
        parts = [(np.sort(np.concatenate([f, others])), v) for f, v in parts]
    return SplitPlan(train, base.test, parts, seed)


def run_size_study(table: TaskTable, target: str, companions: Sequence[str], config: TrainConfig,
                   fractions: Sequence[float] = SIZE_FRACTIONS, seeds: Sequence[int] = (0,),
                   split: SplitSpec | None = None,
                   out_dir: str | Path | None = None) -> ExperimentReport:
    split = split or SplitSpec()
    companions = [c for c in companions if c != target]
    report = ExperimentReport("size-study", {
        "target": target, "companions": companions, "fractions": list(fractions),
        "seeds": list(seeds), "split": asdict(split), "train": config.to_dict()})
    col = table.task_names.index(target)
    for frac in fractions:
        single_vals, multi_vals, n_train = [], [], []
        for s in seeds:
            cfg = TrainConfig.from_dict(dict(config.to_dict(), seed=s))
            plan = size_plan(table, split.plan(table, s, cfg.folds), target, frac, cfg.folds, s)
            n_train.append(int(table.mask[plan.train, col].sum()))
            single_vals += train_model(table, [target], plan, cfg).fold_rmse(target)
            multi_vals += train_model(table, [target, *companions], plan, cfg).fold_rmse(target)
        ms = Metric.of(f"single@{frac}", target, single_vals, seeds)
        mm = Metric.of(f"multi@{frac}", target, multi_vals, seeds)
        report.metrics += [ms, mm]
        report.rows.append({
            "fraction": frac, "n_train": int(np.mean(n_train)),
            "single_rmse": ms.mean, "multi_rmse": mm.mean,
            "improvement_pct": 100.0 * (ms.mean - mm.mean) / ms.mean,
        })
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "fig4a.csv")
        report.save(Path(out_dir) / "fig4a.json")
    return report


# ---------------------------------------------------------------------------
# inference timing


def _median_seconds(fn: Callable[[], None], repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def time_inference(multi: Model, singles: Sequence[Model], batch, repeats: int = 10,
                   warmup: int = 2) -> dict:
    """Median wall-clock of one K-head forward vs K single-head forwards on ``batch``."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    k = len(singles)
    with threadpool_limits(limits=1):
        before = multi.forward_calls
        multi.predict(batch)
        multi_calls = multi.forward_calls - before
        before = [m.forward_calls for m in singles]
        for m in singles:
            m.predict(batch)
        single_calls = sum(m.forward_calls - b for m, b in zip(singles, before))

        def run_multi():
            multi.predict(batch)

        def run_singles():
            for m in singles:
                m.predict(batch)

        t_multi = _median_seconds(run_multi, repeats, warmup)
        t_single = _median_seconds(run_singles, repeats, warmup)
    return {
        "tasks": k, "molecules": batch.graph_count,
        "multi_seconds": t_multi, "single_seconds": t_single,
        "speedup_pct": 100.0 * (t_single - t_multi) / t_single,
        "multi_forward_calls": multi_calls, "single_forward_calls": single_calls,
        "work_ratio_ok": multi_calls == 1 and single_calls == k,
        "repeats": repeats, "warmup": warmup,
    }


def run_inference_bench(table: TaskTable, models: dict[int, tuple[Model, list[Model]]],
                        rows: Sequence[int] | None = None, repeats: int = 10, warmup: int = 2,
                        out_dir: str | Path | None = None) -> ExperimentReport:
    """``models`` maps a task count K to (K-task model, K single-task models)."""
    rows = np.arange(len(table)) if rows is None else np.asarray(rows)
    feats = table.features()
    batch = batch_graphs([feats[i] for i in rows])
    report = ExperimentReport("bench-inference", {
        "task_counts": sorted(models), "molecules": len(rows), "repeats": repeats,
        "warmup": warmup, "threads": 1})
    for k in sorted(models):
        multi, singles = models[k]
        if multi.num_tasks != k or len(singles) != k or any(m.num_tasks != 1 for m in singles):
            raise ValueError(f"K={k} needs one {k}-task model and {k} single-task models")
        report.rows.append(time_inference(multi, singles, batch, repeats, warmup))
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "fig6.csv")
        report.save(Path(out_dir) / "fig6.json")
    return report


def untrained_bench_models(task_counts: Sequence[int], kind: str = "GIN",
                           seed: int = 0) -> dict[int, tuple[Model, list[Model]]]:
    """Freshly initialised models; timing does not depend on weight values."""
    out = {}
    for k in task_counts:
        multi = Model(ModelConfig(kind=kind, num_tasks=k), seed=seed)
        singles = [Model(ModelConfig(kind=kind, num_tasks=1), seed=seed + 1 + j) for j in range(k)]
        out[k] = (multi, singles)
    return out


# ---------------------------------------------------------------------------
# weight distributions


def glorot_std(fan_in: int, fan_out: int) -> float:
    """Standard deviation of U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


def weight_histogram(weights: np.ndarray, bins: int = 50,
                     value_range: tuple[float, float] | None = None) -> tuple[np.ndarray, np.ndarray]:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    return np.histogram(np.ravel(weights), bins=bins, range=value_range)


def export_weight_histograms(models: dict[str, Model], layer: str = "head.fc1", bins: int = 50,
                             out_dir: str | Path | None = None,
                             shared_range: bool = True) -> ExperimentReport:
    """Histogram and summary statistics of ``layer`` weights for each labelled model.

    Files are named ``fig5_<label>.csv``. With ``shared_range`` all models use
    the same bin edges so their histograms are directly comparable.
    """
    weights = {label: m.layer_weights(layer) for label, m in models.items()}
    rng_ = None
    if shared_range and weights:
        lo = min(float(w.min()) for w in weights.values())
        hi = max(float(w.max()) for w in weights.values())
        rng_ = (lo, hi) if hi > lo else None
    report = ExperimentReport("export-weights", {"layer": layer, "bins": bins,
                                                 "models": sorted(models)})
    for label, w in weights.items():
        counts, edges = weight_histogram(w, bins, rng_)
        report.rows.append({"model": label, "mean": float(w.mean()), "std": float(w.std()),
                            "min": float(w.min()), "max": float(w.max()), "count": int(w.size)})
        report.notes[label] = {"edges": edges.tolist(), "counts": counts.tolist()}
        if out_dir is not None:
            path = Path(out_dir) / f"fig5_{label}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as fh:
                wr = csv.writer(fh)
                wr.writerow(["bin_left", "bin_right", "count"])
                for a, b, c in zip(edges[:-1], edges[1:], counts):
                    wr.writerow([repr(float(a)), repr(float(b)), int(c)])
            report.artifacts.append(str(path))
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "fig5_summary.csv")
        report.save(Path(out_dir) / "fig5.json")
    return report
