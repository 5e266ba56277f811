import numpy as np
import pytest

from minidisc.bench.tasks import TaskSpec, make_task
from minidisc.distiller import DistillConfig, EvalRecord, Model, accuracy, distill, train_supervised
from minidisc.ledger import PHASES, TrialLedger
from minidisc.model import ModelConfig, StructureMask, build_model
from minidisc.pruner import build_grid, grid_scales
from minidisc.scheduler import (LAMBDA_SWEEP, SchedulePlan, TradeoffRecord, baselines,
                                configured_step_ratio, lambda_tradeoff, maxidisc, minidisc,
                                nd_tradeoff, residual_distill, select_optimal, tradeoff_records)

TOY = ModelConfig(layers=2, heads=4, d_model=16, d_ffn=32, vocab=32, max_len=16)
FAST = DistillConfig(steps=4, sandwich_steps=4, eta=2, eval_every=2)


# ---------------------------------------------------------------------------
# tradeoffs
# ---------------------------------------------------------------------------

def test_lambda_tradeoff_examples():
    assert lambda_tradeoff(0.8, 0.5, 0.2) == pytest.approx(0.9, abs=1e-15)
    assert lambda_tradeoff(0.8, 0.5, 0.0) == 0.8
    assert lambda_tradeoff(0.73, 1.0, 0.4) == 0.73


@pytest.mark.parametrize("args", [(1.1, 0.5, 0.2), (0.5, 0.0, 0.2), (0.5, 1.2, 0.2), (0.5, 0.5, -0.1),
                                  (0.5, 0.5, 1.5)])
def test_lambda_tradeoff_range_errors(args):
    with pytest.raises(ValueError):
        lambda_tradeoff(*args)


def test_lambda_tradeoff_affine():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m, s, lam = rng.uniform(0, 0.9), rng.uniform(0.05, 0.9), rng.uniform(0, 1)
        dm, ds = 0.05, 0.05
        assert lambda_tradeoff(m + dm, s, lam) - lambda_tradeoff(m, s, lam) == pytest.approx(dm)
        assert lambda_tradeoff(m, s + ds, lam) - lambda_tradeoff(m, s, lam) == pytest.approx(-lam * ds)


def test_nd_examples():
    t = nd_tradeoff([(0.05, 0.80), (0.10, 0.82), (0.15, 0.83)], 0.05)
    assert t[0] == pytest.approx(-0.4) and t[1] == pytest.approx(-0.2) and t[2] is None
    assert nd_tradeoff([(0.1, 0.7), (0.2, 0.7), (0.3, 0.7)], 0.1) == [0.0, 0.0, None]


def test_nd_requires_uniform_spacing():
    with pytest.raises(ValueError, match="non-uniform"):
        nd_tradeoff([(0.1, 0.5), (0.2, 0.6), (0.4, 0.7)], 0.1)
    with pytest.raises(ValueError):
        nd_tradeoff([(0.1, 0.5)], 0.1)


def _records(scales, metrics, lam=0.2):
    delta = scales[1] - scales[0] if len(scales) > 1 else 0.05
    evals = [EvalRecord(i, s, s, m) for i, (s, m) in enumerate(zip(scales, metrics))]
    return tradeoff_records(evals, lam, delta) if len(evals) > 1 else [
        TradeoffRecord(0, scales[0], scales[0], metrics[0], lam, lambda_tradeoff(metrics[0], scales[0], lam))]


@pytest.mark.parametrize("plateau", range(1, 7))
def test_nd_argmax_at_plateau_start(plateau):
    scales = [round(0.1 * (k + 1), 10) for k in range(8)]
    metrics = [0.5 + 0.05 * min(k, plateau) for k in range(8)]
    recs = _records(scales, metrics)
    assert select_optimal(recs, selection="nd") == plateau


def test_select_single_record():
    assert select_optimal(_records([0.3], [0.5])) == 0


def test_select_ties_go_to_smaller_scale():
    # 0.1 * (1 - 0.2) + 0.5 == 0.1 * (1 - 0.4) + 0.52
    recs = _records([0.2, 0.4, 0.6], [0.5, 0.52, 0.3], lam=0.1)
    recs[1].t_lambda = recs[0].t_lambda
    assert select_optimal(recs) == 0


def _concave(scales, lam, c=0.6):
    return _records(scales, [1 - (s - c) ** 2 for s in scales], lam)


def test_concave_curve_stability():
    scales, _ = grid_scales(0.05, 19)
    picks = {}
    for lam in LAMBDA_SWEEP:
        recs = _concave(scales, lam)
        t = np.array([r.t_lambda for r in recs])
        assert (t == t.max()).sum() == 1
        picks[lam] = select_optimal(recs)
    assert abs(picks[0.1] - picks[0.2]) <= 1 and abs(picks[0.3] - picks[0.2]) <= 1


def test_concave_argmax_unique_up_to_grid_ties():
    rng = np.random.default_rng(0)
    scales, _ = grid_scales(0.05, 19)
    for _ in range(200):
        a, c, b = rng.uniform(0.1, 3), rng.uniform(0, 1), rng.uniform(0, 0.2)
        lam = rng.uniform(0.01, 0.99)
        recs = _records(scales, [b + 0.7 - a * (s - c) ** 2 / 4 for s in scales], lam)
        t = np.array([r.t_lambda for r in recs])
        top = np.flatnonzero(np.isclose(t, t.max(), atol=1e-12, rtol=0))
        assert len(top) == 1 or (len(top) == 2 and top[1] - top[0] == 1)


def test_argmax_invariant_to_metric_shift():
    rng = np.random.default_rng(1)
    scales, _ = grid_scales(0.1, 9)
    for _ in range(50):
        m = rng.uniform(0.3, 0.6, size=9)
        shift = rng.uniform(0, 0.3)
        for mode in ("lambda", "nd"):
            a = select_optimal(_records(scales, m), selection=mode)
            b = select_optimal(_records(scales, m + shift), selection=mode)
            assert a == b


def test_step_ratio_defaults():
    cfg = DistillConfig()
    ratio = configured_step_ratio(cfg, 19)
    assert ratio >= 5
    assert 1 / ratio <= (cfg.sandwich_steps + cfg.steps) / (19 * (cfg.steps + cfg.steps)) + 1e-12


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------

def test_ledger_conservation_and_errors():
    led = TrialLedger()
    led.record("sandwich", steps=10, trials=1, passes=60)
    led.record("student_distill", steps=5, trials=1)
    assert led.total_steps == sum(c.steps for c in led.phases.values()) == 15
    assert led.selection_trials == 1
    with pytest.raises(KeyError):
        led.record("nope", steps=1)
    with pytest.raises(ValueError):
        led.record("sandwich", steps=-1)
    assert set(led.to_dict()) == set(PHASES)


# ---------------------------------------------------------------------------
# pipelines on a small trained teacher
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def setup():
    data = make_task(TaskSpec(kind="majority-class", vocab=32, length=16, n_train=256, n_dev=64))
    teacher = Model(build_model(TOY, 0), StructureMask.ones(TOY))
    train_supervised(teacher, data, DistillConfig(lr=3e-3), 150)
    return teacher, data


@pytest.mark.parametrize("n", [2, 4, 6])
def test_minidisc_one_selection_trial(setup, n):
    teacher, data = setup
    ledger = TrialLedger()
    res = minidisc(SchedulePlan(student_scale=0.2, n=n), teacher, data, FAST, ledger)
    assert ledger.selection_trials == 1
    assert ledger.phases["sandwich"].trials == 1
    assert ledger.phases["student_distill"].trials == 1
    assert ledger.phases["maxidisc_enumeration"].trials == 0
    assert res.student.mask.equals(res.grid.entries[0].mask)
    assert 0 <= res.chosen < n and len(res.records) == n


def test_minidisc_n2_is_plain_ta_distillation(setup):
    teacher, data = setup
    plan = SchedulePlan(student_scale=0.2, n=2)
    res = minidisc(plan, teacher, data, FAST)
    assert len(res.grid) == 2
    assert res.ledger.distill_trials() == 2  # one TA run (the sandwich) and one student run


def test_minidisc_teacher_untouched(setup):
    teacher, data = setup
    before = teacher.store.copy()
    minidisc(SchedulePlan(student_scale=0.2, n=3), teacher, data, FAST)
    assert teacher.store.equal(before)


def test_minidisc_options(setup):
    teacher, data = setup
    for plan in (SchedulePlan(student_scale=0.2, n=4, selection="nd"),
                 SchedulePlan(student_scale=0.2, n=4, standalone_ta=True),
                 SchedulePlan(student_scale=0.2, n=4, standalone_metrics=True)):
        res = minidisc(plan, teacher, data, FAST)
        assert 0 <= res.student_metric <= 1


def test_minidisc_two_hops(setup):
    teacher, data = setup
    grid = build_grid(teacher.store, data.train, TOY, 0.2, 6)
    # force a far TA so a second hop has room: lambda 0 favours accuracy
    res = minidisc(SchedulePlan(student_scale=0.2, n=6, ta_hops=2, lam=0.0), teacher, data, FAST,
                   grid=grid)
    assert 1 <= len(res.hops) <= 2
    assert res.ledger.phases["sandwich"].trials == len(res.hops)


def test_maxidisc_n2(setup):
    teacher, data = setup
    ledger = TrialLedger()
    res = maxidisc(SchedulePlan(student_scale=0.2, n=2), teacher, data, FAST, ledger)
    assert ledger.phases["maxidisc_enumeration"].trials == 2
    assert ledger.phases["student_distill"].trials == 2
    assert res.student_metric == max(res.student_metrics)


def test_maxidisc_records_n_trials_and_step_ratio(setup):
    teacher, data = setup
    n = 4
    plan = SchedulePlan(student_scale=0.2, n=n)
    grid = build_grid(teacher.store, data.train, TOY, 0.2, n)
    mini, maxi = TrialLedger(), TrialLedger()
    minidisc(plan, teacher, data, FAST, mini, grid)
    res = maxidisc(plan, teacher, data, FAST, maxi, grid)
    assert maxi.selection_trials == n
    assert all(res.student_metric >= m for m in res.student_metrics)
    bound = (FAST.sandwich_steps + FAST.steps) / (n * (FAST.steps + FAST.steps))
    assert mini.total_steps / maxi.total_steps <= bound + 1e-12


def test_baselines_ledgers(setup):
    teacher, data = setup
    res = baselines(SchedulePlan(student_scale=0.2, n=4), teacher, data, FAST)
    assert res.ledgers["kd"].distill_trials() == 1
    assert res.ledgers["ta"].distill_trials() == 2
    assert res.ledgers["ft"].distill_trials() == 1
    assert abs(res.ta_scale - 0.4) <= 0.02  # within one structure of the fixed TA scale


def test_baselines_zero_steps_return_untrained_metric(setup):
    teacher, data = setup
    plan = SchedulePlan(student_scale=0.2, n=4)
    grid = build_grid(teacher.store, data.train, TOY, 0.2, 4)
    res = baselines(plan, teacher, data, DistillConfig(steps=0), grid)
    untrained = accuracy(teacher.store, grid.entries[0].mask, data.dev)
    assert res.metrics == {"kd": untrained, "ta": untrained, "ft": untrained}


def test_residual_zero_steps_unchanged(setup):
    teacher, data = setup
    student = Model(teacher.store.copy(), build_grid(teacher.store, data.train, TOY, 0.2, 2)[0].mask)
    pre = accuracy(student.store, student.mask, data.dev)
    res = residual_distill(student, teacher, data, DistillConfig(residual_steps=0))
    assert res.metric == pre


@pytest.mark.parametrize("seed", range(4))
def test_residual_never_harms(setup, seed):
    teacher, data = setup
    grid = build_grid(teacher.store, data.train, TOY, 0.2, 2)
    student = Model(teacher.store.copy(), grid[0].mask)
    cfg = DistillConfig(seed=seed, lr=5e-2, eval_every=3)  # a large lr can make things worse
    distill(teacher, student, data, replace_steps(cfg, 6))
    pre = accuracy(student.store, student.mask, data.dev)
    res = residual_distill(student, teacher, data, cfg, steps=6)
    assert res.metric >= pre
    assert res.metric == accuracy(student.store, student.mask, data.dev)


def replace_steps(cfg, steps):
    from dataclasses import replace
    return replace(cfg, steps=steps)


def test_plan_validation():
    with pytest.raises(ValueError):
        SchedulePlan(student_scale=1.0)
    with pytest.raises(ValueError):
        SchedulePlan(n=1)
    with pytest.raises(ValueError):
        SchedulePlan(selection="max")
