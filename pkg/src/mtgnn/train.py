"""Masked multitask loss, Adam, plateau scheduling and the cross-validated epoch loop."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import SplitPlan, Standardizer, TaskTable, TooFewRows, make_split
from .featurize import GraphBatch, batch_graphs
from .gnn import Model, ModelConfig

log = logging.getLogger(__name__)


class EmptyMask(ValueError):
    pass


class MissingGradient(RuntimeError):
    pass


class TrainingFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss


def masked_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """sqrt( sum over present cells of squared error / number of present cells ).

    Cells where ``mask`` is false never touch the value or the gradient.
    """
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    mask = np.asarray(mask, dtype=bool).reshape(pred.shape)
    n_present = int(mask.sum())
    if n_present == 0:
        raise EmptyMask("no target present in this batch")
    filled = np.where(mask, target, 0.0)
    diff = ad.mul(ad.sub(pred, Tensor(filled)), Tensor(mask.astype(np.float64)))
    return ad.sqrt(ad.scale(ad.tsum(ad.square(diff)), 1.0 / n_present))


def rmse(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true, y_pred = np.asarray(y_true, float), np.asarray(y_pred, float)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


# ---------------------------------------------------------------------------
# optimizer and scheduler


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        """One bias-corrected update of every parameter that requires grad."""
        live = {n: p for n, p in params.items() if p.requires_grad}
        for n, p in live.items():
            if p.grad is None:
                raise MissingGradient(f"parameter {n!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for n, p in live.items():
            g = p.grad
            m = self.m.get(n)
            if m is None:
                m = self.m[n] = np.zeros_like(p.values)
                self.v[n] = np.zeros_like(p.values)
            v = self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: dict[str, Tensor], state: Adam, lr: float) -> None:
    state.step(params, lr)


class PlateauScheduler:
    """Multiply lr by ``gamma`` after ``patience`` epochs without improvement.

    Improvement means a decrease of more than ``min_delta`` below the best loss
    seen so far. Seed ``best`` with the loss before training (``start``) so the
    first epoch is judged too.
    """

    def __init__(self, lr: float = 0.01, gamma: float = 0.5, patience: int = 40,
                 min_delta: float = 1e-8):
        if not 0 < gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.lr = lr
        self.gamma = gamma
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.bad_epochs = 0
        self.reductions = 0

    def start(self, loss: float) -> None:
        self.best = loss
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.gamma
                self.reductions += 1
                self.bad_epochs = 0
        return self.lr


def scheduler_step(state: PlateauScheduler, validation_loss: float) -> float:
    return state.step(validation_loss)


# ---------------------------------------------------------------------------
# config / results


@dataclass
class TrainConfig:
    kind: str = "GIN"
    batch_size: int = 300
    lr: float = 0.01
    scheduler_gamma: float = 0.5
    scheduler_patience: int = 40
    max_epochs: int = 500
    early_stop_patience: int = 120
    seed: int = 0
    standardize: bool = True
    folds: int = 5
    hidden: int = 95
    learn_eps: bool = False
    iterations: int = 10
    dropout: float = 0.3
    jobs: int = 1

    def __post_init__(self):
        if not 0 < self.scheduler_gamma < 1:
            raise ValueError("scheduler_gamma must lie in (0, 1)")
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batchnorm)")
        if self.max_epochs < 1 or self.folds < 2:
            raise ValueError("max_epochs >= 1 and folds >= 2 required")

    def model_config(self, num_tasks: int) -> ModelConfig:
        return ModelConfig(kind=self.kind, num_tasks=num_tasks, hidden=self.hidden,
                           learn_eps=self.learn_eps, iterations=self.iterations,
                           dropout=self.dropout)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainingHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    test_rmse: dict[str, float] = field(default_factory=dict)

    def lr_trace(self) -> list[float]:
        return [e.lr for e in self.epochs]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr),
                            f"{e.seconds:.6f}"])

    def signature(self) -> list[tuple]:
        """Everything except wall-clock, for determinism checks."""
        return [(e.epoch, e.train_loss, e.val_loss, e.lr) for e in self.epochs]


@dataclass
class Prediction:
    molecule_id: str
    smiles: str
    task: str
    y_true: float
    y_pred: float


@dataclass
class EvalResult:
    rmse: dict[str, float]
    predictions: list[Prediction]
    counts: dict[str, int]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["molecule_id", "smiles", "task", "y_true", "y_pred"])
            for p in self.predictions:
                w.writerow([p.molecule_id, p.smiles, p.task, repr(p.y_true), repr(p.y_pred)])


@dataclass
class FoldResult:
    fold: int
    model: Model
    history: TrainingHistory
    standardizer: Standardizer
    test: EvalResult


@dataclass
class TrainResult:
    tasks: list[str]
    folds: list[FoldResult]
    plan: SplitPlan

    def fold_rmse(self, task: str) -> list[float]:
        return [f.test.rmse[task] for f in self.folds]

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for t in self.tasks:
            vals = np.array(self.fold_rmse(t))
            out[t] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                      "n": len(vals)}
        return out


# ---------------------------------------------------------------------------
# loop


def batch_plan(rows: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive chunks; a trailing chunk smaller than 2 joins its predecessor."""
    chunks = [rows[i:i + batch_size] for i in range(0, len(rows), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def _pack(feats: Sequence[GraphBatch], rows: np.ndarray) -> GraphBatch:
    return batch_graphs([feats[i] for i in rows])


def evaluate(model: Model, table: TaskTable, rows: Sequence[int] | None = None,
             tasks: Sequence[str] | None = None, standardizer: Standardizer | None = None,
             batch: GraphBatch | None = None) -> EvalResult:
    """Per-task RMSE in original units over present cells; one forward over all rows."""
    rows = np.arange(len(table)) if rows is None else np.asarray(rows, dtype=np.int64)
    tasks = list(table.task_names if tasks is None else tasks)
    std = standardizer or Standardizer.identity(len(tasks))
    cols = [table.task_names.index(t) for t in tasks]
    if batch is None:
        batch = _pack(table.features(), rows)
    pred = std.inverse(model.predict(batch))
    result, preds, counts = {}, [], {}
    for j, (t, c) in enumerate(zip(tasks, cols)):
        present = table.mask[rows, c]
        y = table.values[rows, c][present]
        yhat = pred[present, j]
        counts[t] = int(present.sum())
        result[t] = rmse(y, yhat) if counts[t] else float("nan")
        for r, yt, yp in zip(rows[present], y, yhat):
            mid, smi = table.molecules[r]
            preds.append(Prediction(mid, smi, t, float(yt), float(yp)))
    return EvalResult(result, preds, counts)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def fit_model(model: Model, table: TaskTable, tasks: Sequence[str], fit_rows: np.ndarray,
              val_rows: np.ndarray, config: TrainConfig, standardizer: Standardizer,
              seed: int, max_epochs: int | None = None) -> TrainingHistory:
    """Epoch loop with plateau scheduler, early stopping and best-validation restore."""
    cols = [table.task_names.index(t) for t in tasks]
    feats = table.features()
    y = standardizer.transform(np.where(table.mask[:, cols], table.values[:, cols], 0.0))
    m = table.mask[:, cols]
    rng = np.random.Generator(np.random.Philox(key=seed))
    opt = Adam()
    sched = PlateauScheduler(config.lr, config.scheduler_gamma, config.scheduler_patience)
    val_batch = _pack(feats, val_rows)

    def val_loss() -> float:
        pred = model.forward(val_batch, "eval")
        return masked_loss(pred, y[val_rows], m[val_rows]).item()

    history = TrainingHistory()
    best = val_loss()
    sched.start(best)
    best_state, best_epoch, stale = model.state(), 0, 0
    for epoch in range(1, (max_epochs or config.max_epochs) + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        order = rng.permutation(fit_rows)
        losses, sizes = [], []
        for rows in batch_plan(order, config.batch_size):
            model.zero_grad()
            with Tape():
                pred = model.forward(_pack(feats, rows), "train", rng)
                loss = masked_loss(pred, y[rows], m[rows])
            ad.backward(loss)
            adam_step(model.trainable_parameters(), opt, lr)
            losses.append(loss.item())
            sizes.append(len(rows))
        train_loss = float(np.average(losses, weights=sizes))
        vl = val_loss()
        if not (np.isfinite(train_loss) and np.isfinite(vl)):
            raise TrainingFailure(f"non-finite loss at epoch {epoch} (train={train_loss}, val={vl})")
        history.epochs.append(EpochRecord(epoch, train_loss, vl, lr, time.perf_counter() - t0))
        sched.step(vl)
        if vl < best - sched.min_delta:
            best, best_state, best_epoch, stale = vl, model.state(), epoch, 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    model.load_state(best_state)
    history.best_epoch = best_epoch
    return history


def _run_fold(args) -> FoldResult:
    table, tasks, plan, config, fold, init_state, freeze = args
    fit_rows, val_rows = plan.folds[fold]
    cols = [table.task_names.index(t) for t in tasks]
    present = table.mask[:, cols].any(axis=1)
    fit_rows = fit_rows[present[fit_rows]]
    val_rows = val_rows[present[val_rows]]
    test_rows = plan.test[present[plan.test]]
    if not len(fit_rows) or not len(val_rows) or not len(test_rows):
        raise TooFewRows(f"fold {fold}: no labelled rows for {list(tasks)} in "
                         f"one of its partitions")
    std = (Standardizer.fit(_columns(table, cols), fit_rows)
           if config.standardize else Standardizer.identity(len(tasks)))
    seed = fold_seed(config.seed, fold)
    model = Model(config.model_config(len(tasks)), seed=seed)
    if init_state is not None:
        state = init_state[fold] if isinstance(init_state, list) else init_state
        model.load_state(state, [n for n in state if not n.startswith("head.")])
    if freeze:
        model.freeze(freeze)
    history = fit_model(model, table, tasks, fit_rows, val_rows, config, std, seed)
    test = evaluate(model, table, test_rows, tasks, std)
    history.test_rmse = dict(test.rmse)
    return FoldResult(fold, model, history, std, test)


def _columns(table: TaskTable, cols: list[int]) -> TaskTable:
    return TaskTable(table.molecules, [table.task_names[c] for c in cols], table.values[:, cols],
                     table.mask[:, cols], table.graphs, _features=table._features)


def train_model(table: TaskTable, group: Sequence[str], plan: SplitPlan | None = None,
                config: TrainConfig | None = None, init_state=None,
                freeze: Sequence[str] | None = None) -> TrainResult:
    """Cross-validated training of one model per fold on the tasks in ``group``.

    ``init_state`` (one state dict, or one per fold) seeds all non-head
    parameters; ``freeze`` lists parameter patterns kept fixed.
    """
    config = config or TrainConfig()
    tasks = list(group)
    missing = [t for t in tasks if t not in table.task_names]
    if missing:
        raise KeyError(f"unknown task(s): {missing}")
    if plan is None:
        plan = make_split(len(table), 0.8, config.seed, config.folds)
    table.features()
    jobs = [(table, tasks, plan, config, f, init_state, list(freeze) if freeze else None)
            for f in range(len(plan.folds))]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            folds = list(pool.map(_run_fold, jobs))
    else:
        folds = [_run_fold(j) for j in jobs]
    for f in folds:
        log.info("fold %d: best epoch %d, test %s", f.fold, f.history.best_epoch,
                 {k: round(v, 4) for k, v in f.test.rmse.items()})
    return TrainResult(tasks, folds, plan)
