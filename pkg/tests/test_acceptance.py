"""Acceptance suite. Each test checks one criterion and records a PASS/FAIL line.

The capacity-gap experiment (criteria 9 and 10) trains 9 teachers from scratch
and takes roughly an hour on one CPU core.
"""
import json
import shutil
import time
from decimal import Decimal
from pathlib import Path

import numpy as np
import pytest

from conftest import record_verdict
from test_model import random_batch, random_mask, reference_logits
from test_pruner import loo_spearman
from test_tensor import _op_cases

from minidisc import tensor as T
from minidisc.bench.config import load_config, parse_config
from minidisc.bench.experiment import run_experiment
from minidisc.bench.tasks import TaskSpec, make_task
from minidisc.distiller import DistillConfig, EvalRecord, Model, sandwich_train, train_supervised
from minidisc.ledger import TrialLedger
from minidisc.model import (Batch, ModelConfig, StructureMask, build_model, forward, load_checkpoint,
                            save_checkpoint)
from minidisc.pruner import build_grid, grid_scales
from minidisc.scheduler import (SchedulePlan, configured_step_ratio, lambda_tradeoff, maxidisc,
                                minidisc, nd_tradeoff, residual_distill, select_optimal,
                                tradeoff_records)

ROOT = Path(__file__).resolve().parents[1]
TOY = ModelConfig(layers=2, heads=4, d_model=16, d_ffn=32, vocab=32, max_len=16)
LAMBDAS = (0.1, 0.2, 0.3, 0.5, 0.7)


def verdict(number: int, ok: bool, detail: str) -> None:
    record_verdict(number, ok, detail)
    assert ok, detail


@pytest.fixture(scope="module")
def toy_setup():
    data = make_task(TaskSpec(kind="majority-class", vocab=32, length=16, n_train=512, n_dev=128))
    teacher = Model(build_model(TOY, 0), StructureMask.ones(TOY))
    train_supervised(teacher, data, DistillConfig(lr=3e-3), 200)
    return data, teacher


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    tcfg = ModelConfig(layers=2, heads=2, d_model=4, d_ffn=6, vocab=8, max_len=5)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for name, fn, params in _op_cases(rng):
            worst = max(worst, T.check_gradients(fn, params)["max_rel_err"])
        store = build_model(tcfg, seed)
        for p in store.tensors():
            p.data[...] = rng.standard_normal(p.shape) * 0.5
        ids, lengths = random_batch(tcfg, rng, B=3)
        labels = rng.integers(0, 2, size=3)
        mask = random_mask(tcfg, rng, p=0.7)
        rep = T.check_gradients(
            lambda: T.loss_ce(forward(store, mask, Batch(ids, lengths)).logits, labels), store.tensors())
        worst = max(worst, rep["max_rel_err"])
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-3 and elapsed < 120,
            f"max rel err {worst:.2e} over every op and the toy transformer, 20 seeds, {elapsed:.1f}s")


def test_criterion_02_mask_equivalence():
    cfg = ModelConfig()
    worst = 0.0
    for seed in range(10):
        store = build_model(cfg, seed)
        rng = np.random.default_rng(100 + seed)
        mask = random_mask(cfg, rng, p=rng.uniform(0.2, 0.8))
        ids, lengths = random_batch(cfg, rng, B=4)
        got = forward(store, mask, Batch(ids, lengths)).logits.data
        worst = max(worst, float(np.abs(got - reference_logits(store, mask, ids, lengths)).max()))
    verdict(2, worst <= 1e-5, f"max abs logit difference {worst:.2e} over 10 random masks")


def test_criterion_03_nesting():
    pairs = violations = 0
    for cfg, seeds in ((TOY, range(10)), (ModelConfig(), range(3))):
        for seed in seeds:
            data = make_task(TaskSpec(kind="majority-class", vocab=cfg.vocab, length=16, n_train=256,
                                      n_dev=32, seed=seed))
            grid = build_grid(build_model(cfg, seed), data.train, cfg, 0.05, 19, seed=seed)
            for i in range(len(grid)):
                for j in range(i + 1, len(grid)):
                    a, b = grid[i].mask, grid[j].mask
                    pairs += 1
                    violations += int(np.any(a.self_heads & ~b.self_heads)
                                      or np.any(a.ffn_neurons & ~b.ffn_neurons))
    verdict(3, violations == 0, f"{violations} subset violations in {pairs} grid pairs")


def test_criterion_04_gridding():
    scales, delta = grid_scales(0.05, 19)
    want = [float(Decimal("0.05") * k) for k in range(1, 20)]
    verdict(4, scales == want and abs(delta - 0.05) < 1e-15,
            f"scales {scales[0]}..{scales[-1]} in {len(scales)} steps of {delta:.2f}")


def test_criterion_05_importance():
    t0 = time.perf_counter()
    rhos = [loo_spearman(s) for s in range(20)]
    elapsed = time.perf_counter() - t0
    positive = sum(r > 0 for r in rhos)
    verdict(5, positive >= 18 and elapsed < 180,
            f"Spearman positive in {positive}/20 seeds (median {np.median(rhos):.2f}), {elapsed:.1f}s")


def test_criterion_06_tradeoffs():
    hand = [
        lambda_tradeoff(0.8, 0.5, 0.2) == pytest.approx(0.9, abs=1e-15),
        lambda_tradeoff(0.7, 0.3, 0.0) == 0.7,
        lambda_tradeoff(0.7, 1.0, 0.2) == 0.7,
        nd_tradeoff([(0.05, 0.80), (0.10, 0.82), (0.15, 0.83)], 0.05)[:2] == pytest.approx([-0.4, -0.2]),
        nd_tradeoff([(s, 0.5) for s in (0.1, 0.2, 0.3)], 0.1)[:2] == [0.0, 0.0],
    ]
    scales, delta = grid_scales(0.05, 19)
    picks, unique = {}, True
    for lam in LAMBDAS:
        evals = [EvalRecord(i, s, s, 1 - (s - 0.6) ** 2) for i, s in enumerate(scales)]
        recs = tradeoff_records(evals, lam, delta)
        t = np.array([r.t_lambda for r in recs])
        unique &= bool((t == t.max()).sum() == 1)
        picks[lam] = select_optimal(recs)
    drift = max(abs(picks[0.1] - picks[0.2]), abs(picks[0.3] - picks[0.2]))
    verdict(6, all(hand) and unique and drift <= 1,
            f"hand examples {sum(hand)}/{len(hand)}, unique argmax for every lambda, picks {picks}, "
            f"drift around 0.2 is {drift} step")


def test_criterion_07_memory(toy_setup):
    data, teacher = toy_setup
    sizes = {}
    for n in (2, 4, 8, 19):
        grid = build_grid(teacher.store, data.train, TOY, 0.05, n)
        res = sandwich_train(teacher.store.copy(), grid, teacher, data, DistillConfig(eta=2), steps=1)
        sizes[n] = res.param_bytes
    ok = set(sizes.values()) == {2 * teacher.store.nbytes}
    verdict(7, ok, f"parameter bytes per n {sizes} (one store {teacher.store.nbytes} B plus snapshot)")


def test_criterion_08_ledger(toy_setup):
    data, teacher = toy_setup
    cfg = DistillConfig(steps=3, sandwich_steps=3, eta=2)
    mini, maxi = TrialLedger(), TrialLedger()
    n = 5
    minidisc(SchedulePlan(student_scale=0.2, n=n), teacher, data, cfg, mini)
    maxidisc(SchedulePlan(student_scale=0.2, n=n), teacher, data, cfg, maxi)
    ratio = configured_step_ratio(DistillConfig(), 19)
    verdict(8, mini.selection_trials == 1 and maxi.selection_trials == n and ratio >= 5,
            f"selection trials MiniDisc {mini.selection_trials}, MaxiDisc {maxi.selection_trials} "
            f"(n={n}), configured step ratio {ratio:.1f}x")


@pytest.fixture(scope="module")
def capacity_gap():
    cfg = load_config(ROOT / "configs" / "capacity_gap.json")
    out = ROOT / "runs" / "acceptance"
    shutil.rmtree(out, ignore_errors=True)  # fresh teachers, so runtimes include training
    res = run_experiment(cfg, out_dir=out)
    return cfg, res


def test_criterion_09_capacity_gap(capacity_gap):
    cfg, res = capacity_gap
    assert not res.failures, res.failures
    runtimes = [o["runtime"] for o in res.outcomes]
    better, lines = 0, []
    for task in cfg.tasks:
        outs = [o for o in res.outcomes if o["task"] == task.name]
        mini = np.mean([o["methods"]["minidisc"]["pre_residual_metric"] for o in outs])
        kd = np.mean([o["methods"]["kd"]["metric"] for o in outs])
        better += int(mini >= kd)
        lines.append(f"{task.name} {mini:.3f} vs {kd:.3f}")
    close = sum(abs(o["methods"]["minidisc"]["chosen"] - o["methods"]["maxidisc"]["chosen"]) <= 1
                for o in res.outcomes)
    frac = close / len(res.outcomes)
    ok_a, ok_b, ok_t = better >= 2, frac >= 0.6, max(runtimes) < 600
    detail = (f"(a) MiniDisc >= KD on {better}/3 tasks [{'; '.join(lines)}] "
              f"(b) TA within one step of MaxiDisc in {close}/{len(res.outcomes)} runs "
              f"(c) slowest run {max(runtimes):.0f}s")
    record_verdict(9, ok_a and ok_b and ok_t, detail)
    assert ok_a, detail
    assert ok_b, detail
    assert ok_t, detail


def test_criterion_10_residual_no_harm(capacity_gap, toy_setup):
    _, res = capacity_gap
    pairs = [(o["methods"]["minidisc"]["metric"], o["methods"]["minidisc"]["pre_residual_metric"])
             for o in res.outcomes]
    data, teacher = toy_setup
    for seed in range(10):
        student = Model(teacher.store.copy(), random_mask(TOY, np.random.default_rng(seed), p=0.3))
        r = residual_distill(student, teacher, data, DistillConfig(residual_steps=20, seed=seed))
        pairs.append((r.metric, r.pre_metric))
    held = sum(post >= pre for post, pre in pairs)
    verdict(10, held == len(pairs), f"post >= pre in {held}/{len(pairs)} runs")


TINY = {
    "model": {"layers": 2, "heads": 4, "d_model": 16, "d_ffn": 32, "vocab": 32, "max_len": 16},
    "tasks": [{"kind": "pair-similarity", "vocab": 32, "length": 16, "n_train": 128, "n_dev": 64}],
    "plan": {"n": 4, "student_scale": 0.2},
    "distill": {"steps": 3, "sandwich_steps": 3, "eta": 3},
    "teacher": {"steps": 10},
    "seeds": [0, 1],
}


def test_criterion_11_round_trip_and_reproducibility(tmp_path):
    store = build_model(ModelConfig(), 3)
    save_checkpoint(store, tmp_path / "m.ckpt")
    back, _ = load_checkpoint(tmp_path / "m.ckpt")
    exact = all(np.array_equal(store[k].data, back[k].data) and store[k].data.dtype == back[k].data.dtype
                for k in store.params) and set(store.params) == set(back.params)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        run_experiment(parse_config(json.loads(json.dumps(TINY))), out_dir=out)
        outs.append({p.relative_to(out): p.read_bytes()
                     for p in sorted(out.rglob("*")) if p.suffix in (".csv", ".svg")})
    same = outs[0] == outs[1] and len(outs[0]) > 0
    verdict(11, exact and same,
            f"checkpoint bit-exact: {exact}; {len(outs[0])} CSV/SVG files identical across runs: {same}")
