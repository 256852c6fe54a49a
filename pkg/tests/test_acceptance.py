"""End-to-end acceptance checks; each prints one PASS/FAIL line.

The long-running criteria (full ESOL protocol, multitask comparison) are
marked ``slow``; deselect them with ``-m "not slow"``.
"""
import time

import numpy as np
import pytest

from mtgnn.chem import parse_smiles, permute_atoms
from mtgnn.data import (TASK_ORDER, CorrelationMatrix, TaskTable, bundled_path,
                        correlation_matrix, filter_freesolv, load_dataset, load_tasks,
                        make_split, select_target_groups)
from mtgnn.experiments import (SplitSpec, cross_validate, run_transfer_all, time_inference)
from mtgnn.featurize import batch_graphs, featurize_graph
from mtgnn.gnn import KINDS, Model, ModelConfig, load_checkpoint, save_checkpoint
from mtgnn.train import PlateauScheduler, TrainConfig, evaluate, masked_loss, rmse, train_model
from mtgnn.autodiff import Tensor
from tests.conftest import ACCEPTANCE
from tests.oracles import gradient_check, randomize_batchnorm, randomize_biases
from tests.test_train import chain_count_table


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def esol():
    return load_tasks(["Esol"])


def six_task_table(n: int, seed: int = 0, presence: float = 0.75) -> TaskTable:
    """Real molecules with six synthetic, partly observed, related targets.

    Only three of the six public datasets can be redistributed, so criteria
    needing six tasks use descriptor-derived targets named after them.
    """
    src = load_tasks(["Esol"])
    rng = np.random.default_rng(seed)
    sub = src.subset(np.sort(rng.choice(len(src), n, replace=False)))
    desc = np.array([[len(g.atoms),
                      sum(a.element not in ("C", "H") for a in g.atoms),
                      sum(a.aromatic for a in g.atoms),
                      sum(a.total_h for a in g.atoms)] for g in sub.graphs], float)
    desc = (desc - desc.mean(0)) / desc.std(0)
    w = rng.normal(size=(desc.shape[1], 6))
    values = desc @ w + rng.normal(0, 0.3, (n, 6))
    mask = rng.random((n, 6)) < presence
    mask[~mask.any(axis=1), 0] = True
    return TaskTable(sub.molecules, list(TASK_ORDER), np.where(mask, values, np.nan), mask,
                     sub.graphs)


def three_molecule_batch():
    return batch_graphs([featurize_graph(parse_smiles(s)) for s in ("CC(=O)O", "c1ccncc1", "CCN")])


# ---------------------------------------------------------------------------


def test_01_gradient_correctness():
    b = three_molecule_batch()
    rng = np.random.default_rng(0)
    target = rng.normal(size=(3, 2))
    mask = np.array([[1, 0], [1, 1], [0, 1]], bool)
    t0 = time.perf_counter()
    worst = {}
    for kind in KINDS:
        errs = []
        # every scalar entry at a narrow width, sampled entries plus directions at full width
        for hidden, entries in ((6, None), (95, 30)):
            m = Model(ModelConfig(kind=kind, num_tasks=2, hidden=hidden, learn_eps=True), seed=3)
            randomize_batchnorm(m)
            randomize_biases(m)
            errs += gradient_check(m, b, target, mask, max_entries=entries, directions=3).values()
        worst[kind] = max(errs)
    ok = all(v < 1e-3 for v in worst.values())
    record(1, ok, "max relative error " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
           + f" (< 1e-3) in {time.perf_counter() - t0:.0f}s")


def test_02_loss_reduces_to_rmse():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 300))
        y, p = rng.normal(size=(n, 1)) * 3, rng.normal(size=(n, 1)) * 3
        loss = masked_loss(Tensor(p), y, np.ones((n, 1), bool)).item()
        worst = max(worst, abs(loss - rmse(y, p)))
    record(2, worst <= 1e-12, f"max |masked_loss - RMSE| = {worst:.1e} over 100 batches (<= 1e-12)")


def test_03_permutation_and_batching(esol):
    rng = np.random.default_rng(3)
    rows = rng.choice(len(esol), 50, replace=False)
    graphs = [esol.graphs[i] for i in rows]
    feats = [featurize_graph(g) for g in graphs]
    worst = 0.0
    for kind in KINDS:
        m = Model(ModelConfig(kind=kind, num_tasks=2), seed=4)
        randomize_batchnorm(m)
        alone = np.vstack([m.predict(f) for f in feats])
        permuted = np.vstack([m.predict(featurize_graph(permute_atoms(g, rng.permutation(len(g.atoms)))))
                              for g in graphs])
        joint = m.predict(batch_graphs(feats))
        order = rng.permutation(50)
        shuffled = np.empty_like(joint)
        for chunk in np.array_split(order, 7):
            shuffled[chunk] = m.predict(batch_graphs([feats[i] for i in chunk]))
        worst = max(worst, *(np.abs(x - alone).max() for x in (permuted, joint, shuffled)))
    record(3, worst <= 1e-10, f"max deviation {worst:.1e} across relabeling and batch composition "
           "(<= 1e-10)")


def test_04_target_grouping():
    pairs = {("logD7.4", "LogP"): 0.8, ("Esol", "LogP"): -0.7,
             ("FreeSolv", "LogVP"): 0.6, ("LogVP", "BP"): -0.9}
    corr = CorrelationMatrix.from_pairs(list(TASK_ORDER), pairs, default=0.2)
    override = [["logD7.4", "LogP"], ["Esol", "LogP"]]
    expected = sorted(map(sorted, [["logD7.4", "LogP"], ["Esol", "LogP"],
                                   ["FreeSolv", "LogVP", "BP"]]))
    got = sorted(map(sorted, select_target_groups(corr, 0.5, override=override)))

    # the same pattern arising from data rather than a hand-written matrix
    rng = np.random.default_rng(4)
    n = 400
    a, b = rng.normal(size=(2, n))
    cols = {"LogP": a, "logD7.4": a + 0.5 * rng.normal(size=n), "Esol": -a + 0.6 * rng.normal(size=n),
            "LogVP": b, "FreeSolv": b + 0.8 * rng.normal(size=n), "BP": -b + 0.3 * rng.normal(size=n)}
    values = np.stack([cols[t] for t in TASK_ORDER], axis=1)
    graph = parse_smiles("C")
    table = TaskTable([(str(i), "C") for i in range(n)], list(TASK_ORDER), values,
                      np.ones_like(values, bool), [graph] * n)
    from_data = sorted(map(sorted, select_target_groups(correlation_matrix(table), 0.5,
                                                       override=override)))
    record(4, got == expected and from_data == expected, f"groups {got}")


@pytest.mark.slow
def test_05_esol_protocol(esol):
    t0 = time.perf_counter()
    res = train_model(esol, ["Esol"], make_split(len(esol), 0.8, 0, 5), TrainConfig())
    minutes = (time.perf_counter() - t0) / 60
    scores = res.fold_rmse("Esol")
    mean = float(np.mean(scores))
    record(5, mean <= 0.90 and minutes < 30,
           f"ESOL GIN 5-fold test RMSE {mean:.3f} +/- {np.std(scores):.3f} (<= 0.90) "
           f"in {minutes:.1f} min (< 30)")


@pytest.mark.slow
def test_06_multitask_non_inferiority():
    # LogP is not redistributable; logD7.4 is the closest bundled lipophilicity companion
    table = load_tasks(["Esol", "logD7.4"])
    cfg = TrainConfig()
    seeds = [0, 1, 2]
    single = cross_validate(table, ["Esol"], cfg, seeds, SplitSpec())
    multi = cross_validate(table, ["Esol", "logD7.4"], cfg, seeds, SplitSpec())
    s, m = float(np.mean(single.fold_rmse("Esol"))), float(np.mean(multi.fold_rmse("Esol")))
    record(6, m <= s + 0.03, f"Esol RMSE single {s:.3f}, multitask (with logD7.4) {m:.3f}, "
           f"delta {m - s:+.3f} (<= +0.03)")


def test_07_freesolv_filter():
    raw = load_dataset(bundled_path("FreeSolv"), "FreeSolv")
    kept = filter_freesolv(raw)
    below = int((raw.values[:, 0] < -10).sum())
    removed = kept.report["removed_below_threshold"]
    ok = removed == below == 29 and not (kept.values[:, 0] < -10).any()
    record(7, ok, f"{removed} of {len(raw)} rows removed, {below} below -10 (expected 29)")


def test_08_inference_speedup():
    table = six_task_table(648, seed=8)
    cfg = TrainConfig(max_epochs=2, folds=2)
    plan = make_split(len(table), 0.8, 0, 2)
    multi = train_model(table, list(TASK_ORDER), plan, cfg).folds[0].model
    singles = []
    for task in TASK_ORDER:
        singles.append(train_model(table, [task], plan, cfg).folds[0].model)
    batch = batch_graphs(table.features())
    res = time_inference(multi, singles, batch, repeats=10, warmup=2)
    ok = res["speedup_pct"] >= 20.0 and res["work_ratio_ok"]
    record(8, ok, f"K=6 over {res['molecules']} molecules: multitask {res['multi_seconds'] * 1e3:.1f} ms, "
           f"6 single {res['single_seconds'] * 1e3:.1f} ms, {res['speedup_pct']:.0f}% faster (>= 20); "
           f"forward calls {res['multi_forward_calls']}:{res['single_forward_calls']}")


def test_09_scheduler():
    s = PlateauScheduler()
    s.start(1.0)
    lrs = {1: s.lr}
    for epoch in range(2, 82):
        lrs[epoch] = s.step(1.0)
    got = (lrs[1], lrs[41], lrs[81])
    record(9, got == (0.01, 0.005, 0.0025), f"lr at epochs 1, 41, 81 = {got}")


def test_10_checkpoint_roundtrip(esol, tmp_path):
    sub = esol.subset(np.arange(120))
    res = train_model(sub, ["Esol"], make_split(120, 0.8, 0, 2), TrainConfig(max_epochs=30, folds=2))
    f = res.folds[0]
    path = save_checkpoint(f.model, tmp_path / "m.json")
    loaded, _ = load_checkpoint(path)
    again = evaluate(loaded, sub, res.plan.test, ["Esol"], f.standardizer).rmse["Esol"]
    diff = abs(again - f.test.rmse["Esol"])
    record(10, diff <= 1e-10, f"test RMSE {f.test.rmse['Esol']:.6f} vs reloaded, |diff| = {diff:.1e}")


def test_11_atom_count_learnable():
    t = chain_count_table()
    t0 = time.perf_counter()
    scores = {}
    for kind in KINDS:
        res = train_model(t, ["count"], make_split(len(t), 0.8, 0, 2),
                          TrainConfig(kind=kind, max_epochs=200, folds=2))
        scores[kind] = float(np.mean(res.fold_rmse("count")))
    secs = time.perf_counter() - t0
    ok = all(v < 0.5 for v in scores.values()) and secs < 120
    record(11, ok, "atom-count test RMSE " + ", ".join(f"{k}={v:.3f}" for k, v in scores.items())
           + f" (< 0.5) in {secs:.0f}s (< 120)")


def test_12_transfer_harness(tmp_path):
    table = six_task_table(240, seed=12)
    rep = run_transfer_all(table, list(TASK_ORDER), TrainConfig(max_epochs=10, folds=2),
                           out_dir=tmp_path)
    holdouts = [r["holdout"] for r in rep.rows]
    frozen = rep.notes["frozen_parameters_unchanged"] is True
    compared = all(np.isfinite(r["transfer_mean"]) and np.isfinite(r["single_mean"]) for r in rep.rows)
    ok = holdouts == list(TASK_ORDER) and frozen and compared and (tmp_path / "table4.csv").exists()
    record(12, ok, f"{len(holdouts)} holdouts compared with single-task, frozen trunk unchanged: {frozen}")
