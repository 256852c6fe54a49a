"""Dataset ingestion, multitask merging, splits, correlations and target grouping."""

from __future__ import annotations

import csv
import hashlib
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chem import MolGraph, SmilesSyntaxError, ValenceError, parse_raw, parse_smiles
from .featurize import GraphBatch, featurize_graph

log = logging.getLogger(__name__)

DATA_DIR_ENV = "MTGNN_DATA_DIR"
# bundled files; BP, LogVP and LogP have no redistributable public copy here
BUNDLED = {"Esol": "esol.csv", "FreeSolv": "freesolv.csv", "logD7.4": "logd74.csv"}
TASK_ORDER = ("logD7.4", "Esol", "LogP", "FreeSolv", "LogVP", "BP")


class DataError(Exception):
    pass


class FileUnreadable(DataError):
    pass


class EmptyDataset(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


class UndefinedCorrelation(DataError):
    pass


class TooFewRows(DataError):
    pass


class InvalidFraction(ValueError):
    pass


@dataclass
class TaskTable:
    molecules: list[tuple[str, str]]          # (id, smiles as given)
    task_names: list[str]
    values: np.ndarray                        # (n, K); NaN where absent
    mask: np.ndarray                          # (n, K) bool
    graphs: list[MolGraph]
    report: dict = field(default_factory=dict)
    _features: list[GraphBatch] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.molecules), -1)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(self.values.shape)
        if len(self.task_names) != self.values.shape[1]:
            raise ValueError("task_names does not match the value matrix width")
        if len(self.graphs) != len(self.molecules):
            raise ValueError("one graph per molecule required")

    def __len__(self) -> int:
        return len(self.molecules)

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)

    @property
    def smiles(self) -> list[str]:
        return [s for _, s in self.molecules]

    def features(self) -> list[GraphBatch]:
        if self._features is None:
            self._features = [featurize_graph(g) for g in self.graphs]
        return self._features

    def subset(self, rows: Sequence[int]) -> "TaskTable":
        rows = np.asarray(rows, dtype=np.int64)
        feats = self.features()
        return TaskTable(
            [self.molecules[i] for i in rows], list(self.task_names),
            self.values[rows], self.mask[rows], [self.graphs[i] for i in rows],
            _features=[feats[i] for i in rows])

    def select_tasks(self, names: Sequence[str]) -> "TaskTable":
        """Restrict to ``names`` and drop molecules without any of those tasks."""
        missing = [n for n in names if n not in self.task_names]
        if missing:
            raise KeyError(f"unknown task(s): {missing}")
        cols = [self.task_names.index(n) for n in names]
        rows = np.flatnonzero(self.mask[:, cols].any(axis=1))
        sub = self.subset(rows)
        sub.task_names = list(names)
        sub.values = sub.values[:, cols]
        sub.mask = sub.mask[:, cols]
        return sub

    def column(self, task: str) -> tuple[np.ndarray, np.ndarray]:
        """(row indices, values) where ``task`` is present."""
        k = self.task_names.index(task)
        rows = np.flatnonzero(self.mask[:, k])
        return rows, self.values[rows, k]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["smiles", *self.task_names])
            for i, (_, smi) in enumerate(self.molecules):
                w.writerow([smi] + [repr(float(self.values[i, k])) if self.mask[i, k] else ""
                                    for k in range(self.num_tasks)])


# ---------------------------------------------------------------------------
# loading


def data_dir() -> Path | None:
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else None


def bundled_path(task: str) -> Path:
    if task not in BUNDLED:
        raise FileUnreadable(f"no bundled dataset for task {task!r}; bundled: {sorted(BUNDLED)}")
    return Path(str(resources.files("mtgnn") / "datasets" / BUNDLED[task]))


def resolve_dataset(task: str, path: str | Path | None = None) -> Path:
    """Explicit path, else a file in ``$MTGNN_DATA_DIR``, else the bundled copy.

    In the data directory a task is looked up as ``<task>.csv``, its lowercase
    form, or the bundled file name.
    """
    if path is not None:
        return Path(path)
    base = data_dir()
    if base is not None:
        names = [f"{task}.csv", f"{task.lower()}.csv"]
        if task in BUNDLED:
            names.append(BUNDLED[task])
        for name in names:
            if (base / name).exists():
                return base / name
    if task not in BUNDLED:
        where = f" in {base}" if base is not None else f" (set {DATA_DIR_ENV} or pass a path)"
        raise FileUnreadable(f"no dataset file for task {task!r}{where}")
    return bundled_path(task)


def molecule_key(smiles: str) -> str:
    """Identity used for merging: the SMILES text of the largest '.'-fragment."""
    if "." not in smiles:
        return smiles
    frags = smiles.split(".")
    try:
        sizes = [parse_raw(f).heavy_atom_count for f in frags]
    except (SmilesSyntaxError, ValenceError):
        # ring bonds spanning a '.' cannot be split textually
        return smiles
    best = max(range(len(frags)), key=lambda i: (sizes[i], -i))
    return frags[best]


def load_dataset(path: str | Path, task_name: str) -> TaskTable:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None:
        raise EmptyDataset(f"{path} is empty")
    header = [h.strip().lower() for h in header]
    if header[:2] != ["smiles", "value"]:
        raise MalformedRow(path, 1, f"header must start with 'smiles,value', got {header}")
    molecules, values, graphs = [], [], []
    seen: dict[str, int] = {}
    bad = dupes = rows_read = 0
    for line, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 2:
            raise MalformedRow(path, line, f"expected 2 fields, got {len(row)}")
        rows_read += 1
        smi = row[0].strip()
        try:
            value = float(row[1])
        except ValueError:
            raise MalformedRow(path, line, f"value {row[1]!r} is not a number") from None
        if not np.isfinite(value):
            raise MalformedRow(path, line, f"value {row[1]!r} is not finite")
        try:
            g = parse_smiles(smi)
        except (SmilesSyntaxError, ValenceError) as exc:
            log.debug("%s:%d dropped: %s", path, line, exc)
            bad += 1
            continue
        key = molecule_key(smi)
        if key in seen:
            log.warning("%s:%d duplicate of line %d (%s); keeping the first", path, line, seen[key], smi)
            dupes += 1
            continue
        seen[key] = line
        molecules.append((f"{task_name}:{line}", smi))
        values.append(value)
        graphs.append(g)
    if bad:
        log.warning("%s: dropped %d unparseable SMILES", path, bad)
    if not molecules:
        raise EmptyDataset(f"{path} has no usable rows")
    return TaskTable(molecules, [task_name], np.array(values).reshape(-1, 1),
                     np.ones((len(values), 1), dtype=bool), graphs,
                     report={"path": str(path), "rows_read": rows_read,
                             "dropped_unparseable": bad, "dropped_duplicates": dupes})


def filter_freesolv(table: TaskTable, threshold: float = -10.0) -> TaskTable:
    """Drop rows whose (single) value is below ``threshold``."""
    if table.num_tasks != 1:
        raise ValueError("filter_freesolv expects a single-task table")
    keep = np.flatnonzero(~(table.values[:, 0] < threshold))
    out = table.subset(keep)
    out.report = dict(table.report, removed_below_threshold=len(table) - len(keep),
                      threshold=threshold)
    return out


def merge_tasks(tables: Sequence[TaskTable]) -> TaskTable:
    """Union of molecules over several tables with a presence mask.

    Values stay in original units; standardization is fit later on training
    rows only (see :class:`Standardizer`).
    """
    if not tables:
        raise ValueError("merge_tasks needs at least one table")
    names = [n for t in tables for n in t.task_names]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate task names: {names}")
    index: dict[str, int] = {}
    molecules, graphs, feats = [], [], []
    rows_vals: list[dict[int, float]] = []
    dupes = 0
    col = 0
    for t in tables:
        tfeats = t._features
        for i, (mid, smi) in enumerate(t.molecules):
            key = molecule_key(smi)
            r = index.get(key)
            if r is None:
                r = index[key] = len(molecules)
                molecules.append((mid, smi))
                graphs.append(t.graphs[i])
                feats.append(tfeats[i] if tfeats is not None else None)
                rows_vals.append({})
            for k in range(t.num_tasks):
                if t.mask[i, k]:
                    if col + k in rows_vals[r]:
                        dupes += 1
                        continue
                    rows_vals[r][col + k] = float(t.values[i, k])
        col += t.num_tasks
    values = np.full((len(molecules), len(names)), np.nan)
    for r, d in enumerate(rows_vals):
        for k, v in d.items():
            values[r, k] = v
    merged = TaskTable(molecules, names, values, ~np.isnan(values), graphs,
                       report={"dropped_duplicates": dupes,
                               "sources": [t.report for t in tables]})
    if all(f is not None for f in feats):
        merged._features = feats
    return merged


def load_tasks(tasks: Iterable[str], paths: dict[str, str | Path] | None = None,
               freesolv_threshold: float | None = -10.0) -> TaskTable:
    """Load and merge several tasks; FreeSolv gets its outlier filter."""
    paths = paths or {}
    tables = []
    for task in tasks:
        t = load_dataset(resolve_dataset(task, paths.get(task)), task)
        if task == "FreeSolv" and freesolv_threshold is not None:
            t = filter_freesolv(t, freesolv_threshold)
        tables.append(t)
    return merge_tasks(tables)


# ---------------------------------------------------------------------------
# standardization


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, table: TaskTable, rows: Sequence[int] | None = None) -> "Standardizer":
        vals = table.values if rows is None else table.values[np.asarray(rows)]
        mask = table.mask if rows is None else table.mask[np.asarray(rows)]
        mean = np.zeros(table.num_tasks)
        std = np.ones(table.num_tasks)
        for k in range(table.num_tasks):
            v = vals[mask[:, k], k]
            if v.size:
                mean[k] = v.mean()
            if v.size > 1 and v.std() > 0:
                std[k] = v.std()
        return cls(mean, std)

    @classmethod
    def identity(cls, k: int) -> "Standardizer":
        return cls(np.zeros(k), np.ones(k))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# correlations and grouping


@dataclass
class CorrelationMatrix:
    task_names: list[str]
    r: np.ndarray          # NaN where undefined
    overlap: np.ndarray    # molecules present in both tasks
    min_overlap: int

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.r)

    @classmethod
    def from_pairs(cls, task_names: Sequence[str], pairs: dict[tuple[str, str], float],
                   default: float = 0.0) -> "CorrelationMatrix":
        """Build a synthetic matrix; unspecified off-diagonal entries get ``default``."""
        k = len(task_names)
        r = np.full((k, k), default, dtype=np.float64)
        np.fill_diagonal(r, 1.0)
        for (a, b), v in pairs.items():
            i, j = task_names.index(a), task_names.index(b)
            r[i, j] = r[j, i] = v
        return cls(list(task_names), r, np.full((k, k), 10**9), 0)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    denom = np.sqrt((x * x).sum() * (y * y).sum())
    if denom == 0:
        return float("nan")
    return float((x * y).sum() / denom)


def correlation_matrix(table: TaskTable, min_overlap: int = 20) -> CorrelationMatrix:
    k = table.num_tasks
    r = np.full((k, k), np.nan)
    overlap = np.zeros((k, k), dtype=np.int64)
    for i in range(k):
        for j in range(i, k):
            both = table.mask[:, i] & table.mask[:, j]
            overlap[i, j] = overlap[j, i] = int(both.sum())
            if both.sum() < (2 if i == j else max(min_overlap, 2)):
                continue
            v = pearson(table.values[both, i], table.values[both, j])
            r[i, j] = r[j, i] = 1.0 if i == j and not np.isnan(v) else v
    return CorrelationMatrix(list(table.task_names), r, overlap, min_overlap)


def select_target_groups(corr: CorrelationMatrix, threshold: float = 0.5,
                         override: Sequence[Sequence[str]] | None = None,
                         on_undefined: str = "raise") -> list[list[str]]:
    """Group tasks joined by pairs with |r| >= threshold (connected components).

    ``override`` lists buckets that replace the component containing them;
    component members not named in any bucket form one leftover group.
    ``on_undefined`` is "raise" or "skip" for pairs without a defined r.
    """
    names = corr.task_names
    k = len(names)
    parent = list(range(k))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(k):
        for j in range(i + 1, k):
            v = corr.r[i, j]
            if np.isnan(v):
                if on_undefined == "raise":
                    raise UndefinedCorrelation(
                        f"r({names[i]}, {names[j]}) undefined (overlap {corr.overlap[i, j]} "
                        f"< {corr.min_overlap} or zero variance)")
                log.warning("skipping undefined correlation %s/%s", names[i], names[j])
                continue
            if abs(v) >= threshold:
                parent[find(i)] = find(j)
    comps: dict[int, list[int]] = {}
    for i in range(k):
        comps.setdefault(find(i), []).append(i)
    groups = [[names[i] for i in members] for members in sorted(comps.values(), key=min)]
    if not override:
        return groups
    buckets = [list(b) for b in override]
    for b in buckets:
        unknown = [t for t in b if t not in names]
        if unknown:
            raise KeyError(f"override names unknown task(s): {unknown}")
    out: list[list[str]] = []
    for grp in groups:
        mine = [b for b in buckets if set(b) <= set(grp)]
        if not mine:
            out.append(grp)
            continue
        out.extend(mine)
        covered = {t for b in mine for t in b}
        rest = [t for t in grp if t not in covered]
        if rest:
            out.append(rest)
    return out


def read_groups(path: str | Path) -> list[list[str]]:
    """One group per line, comma-separated task names; blank lines and '#' ignored."""
    groups = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            groups.append([t.strip() for t in line.split(",") if t.strip()])
    return groups


def write_groups(path: str | Path, groups: Sequence[Sequence[str]]) -> None:
    Path(path).write_text("".join(",".join(g) + "\n" for g in groups), encoding="utf-8")


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    train: np.ndarray
    test: np.ndarray
    folds: list[tuple[np.ndarray, np.ndarray]]
    seed: int


def make_folds(train: Sequence[int], k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    train = np.asarray(train, dtype=np.int64)
    if len(train) < k:
        raise TooFewRows(f"{len(train)} rows cannot form {k} folds")
    rng = np.random.default_rng([seed, 1])
    parts = np.array_split(rng.permutation(train), k)
    folds = []
    for i, val in enumerate(parts):
        fit = np.concatenate([p for j, p in enumerate(parts) if j != i])
        folds.append((np.sort(fit), np.sort(val)))
    return folds


def make_split(n: int, train_ratio: float = 0.8, seed: int = 0, k: int = 5) -> SplitPlan:
    if n < k or n < 2:
        raise TooFewRows(f"{n} rows are too few for an 8:2 split with {k} folds")
    perm = np.random.default_rng([seed, 0]).permutation(n)
    n_train = int(round(n * train_ratio))
    n_train = min(max(n_train, k), n - 1)
    train, test = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return SplitPlan(train, test, make_folds(train, k, seed), seed)


def subsample_training(indices: Sequence[int], fraction: float, seed: int = 0) -> np.ndarray:
    """Seeded subsample; smaller fractions are prefixes of larger ones for one seed."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidFraction(f"fraction must lie in (0, 1], got {fraction}")
    indices = np.asarray(indices, dtype=np.int64)
    if fraction == 1.0:
        return indices.copy()
    order = np.random.default_rng([seed, 2]).permutation(len(indices))
    m = max(1, int(round(fraction * len(indices))))
    return np.sort(indices[order[:m]])


def _unit_hash(seed: int, salt: str, key: str) -> float:
    digest = hashlib.sha256(f"{seed}|{salt}|{key}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def make_keyed_split(table: TaskTable, train_ratio: float = 0.8, seed: int = 0,
                     k: int = 5) -> SplitPlan:
    """Split by a seeded hash of each molecule's identity.

    A molecule lands on the same side (and in the same fold) whichever other
    tasks were merged into the table, so single-task and multitask runs built
    from the same seed are scored on identical test molecules.
    """
    keys = [molecule_key(s) for s in table.smiles]
    u = np.array([_unit_hash(seed, "test", key) for key in keys])
    train = np.flatnonzero(u >= 1.0 - train_ratio)
    test = np.flatnonzero(u < 1.0 - train_ratio)
    if len(train) < k or len(test) == 0:
        raise TooFewRows(f"{len(table)} rows are too few for a keyed split with {k} folds")
    fold_of = np.array([int(_unit_hash(seed, "fold", keys[i]) * k) for i in train])
    folds = []
    for f in range(k):
        val = train[fold_of == f]
        fit = train[fold_of != f]
        if len(val) == 0 or len(fit) < 2:
            raise TooFewRows(f"fold {f} is degenerate; use more rows or fewer folds")
        folds.append((fit, val))
    return SplitPlan(train, test, folds, seed)
