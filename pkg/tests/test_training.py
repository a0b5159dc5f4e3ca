import math

import numpy as np
import pytest
from conftest import SMALL

from syrenets.baselines import sysid_params_for
from syrenets.mechanics import PendulumParams, sample_dataset
from syrenets.methods import MlpMethod, SyReNetsMethod, SysIdMethod
from syrenets.model import NonFiniteError
from syrenets.objective import LossConfig
from syrenets.params import ParamSet
from syrenets.training import (
    METRICS_HEADER,
    AdamState,
    PlateauSchedule,
    SeedResult,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    batch_at_step,
    batch_order,
    evaluate,
    lr_schedule,
    metrics_csv,
    seed_sweep,
    summarize,
    summary_csv,
    train_config_for,
    train_loop,
)


@pytest.fixture(scope="module")
def data():
    return sample_dataset(256, seed=0), sample_dataset(64, seed=0, stream=1)


# -------------------------------------------------------------------- Adam

def test_adam_first_step_moves_by_lr():
    p = ParamSet({"w": np.array([0.5, -2.0])})
    adam_step(p, {"w": np.array([1.0, -3.0])}, AdamState(), 1e-3)
    assert np.allclose(p["w"], [0.5 - 1e-3, -2.0 + 1e-3], rtol=0, atol=1e-10)


def test_adam_zero_gradient_is_a_no_op():
    p = ParamSet({"w": np.array([0.5, -2.0])})
    state = AdamState()
    for _ in range(3):
        adam_step(p, {"w": np.zeros(2)}, state, 1e-3)
    assert np.array_equal(p["w"], [0.5, -2.0])


def test_adam_symmetric_histories_give_equal_updates():
    p = ParamSet({"w": np.zeros(2)})
    state = AdamState()
    rng = np.random.default_rng(0)
    for _ in range(5):
        g = rng.normal()
        adam_step(p, {"w": np.array([g, g])}, state, 1e-2)
    assert p["w"][0] == p["w"][1] != 0.0


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(1)
    theta = rng.normal(size=4)
    p = ParamSet({"w": theta.copy()})
    state = AdamState()
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(p, {"w": g}, state, 1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p["w"], theta, rtol=1e-12, atol=1e-14)


# -------------------------------------------------------------- schedule

def test_schedule_holds_before_patience():
    s = PlateauSchedule(lr=1e-3, patience=2000)
    for _ in range(1999):
        lr_schedule(s, False)
    assert lr_schedule(s, True) == 1e-3
    for _ in range(1999):
        lr_schedule(s, False)
    assert s.lr == 1e-3


def test_schedule_decays_at_patience():
    s = PlateauSchedule(lr=1e-3, patience=2000)
    for _ in range(2000):
        lr_schedule(s, False)
    assert s.lr == pytest.approx(1e-4)


def test_schedule_clamps_at_floor():
    s = PlateauSchedule(lr=1e-3, patience=3)
    for _ in range(30):
        lr_schedule(s, False)
    assert s.lr == 1e-5


def test_schedule_disabled_is_constant():
    s = PlateauSchedule(lr=1e-3, patience=1, enabled=False)
    for _ in range(10):
        lr_schedule(s, False)
    assert s.lr == 1e-3


def test_per_method_defaults():
    assert train_config_for("syrenets").patience == 1000
    assert train_config_for("nn").patience == 2000
    sysid = train_config_for("sysid")
    assert not sysid.decay and sysid.lr == 1e-3
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.beta1, cfg.beta2, cfg.lr_floor, cfg.decay_factor) == (32, 0.9, 0.999, 1e-5, 10.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


# ------------------------------------------------------------- batching

def test_batch_order_covers_epoch():
    batches = batch_order(100, 32, seed=3, epoch=0)
    assert [len(b) for b in batches] == [32, 32, 32, 4]
    assert sorted(np.concatenate(batches)) == list(range(100))
    assert not np.array_equal(np.concatenate(batches), np.concatenate(batch_order(100, 32, 3, 1)))


# ------------------------------------------------------------------- loop

def test_zero_step_budget(data):
    train, test = data
    report = train_loop(SysIdMethod(), train, TrainConfig(max_steps=0), LossConfig(), test)
    assert report.log == [] and report.steps_run == 0
    assert report.train_mse == report.init_train_mse and report.test_mse == report.init_test_mse


def test_budget_is_required(data):
    with pytest.raises(ValueError):
        train_loop(SysIdMethod(), data[0], TrainConfig(), LossConfig())


def test_runs_are_deterministic(data):
    train, test = data
    cfg = TrainConfig(max_steps=12, seed=4)
    a = train_loop(SyReNetsMethod(SMALL), train, cfg, LossConfig(), test)
    b = train_loop(SyReNetsMethod(SMALL), train, cfg, LossConfig(), test)
    assert metrics_csv(a) == metrics_csv(b)
    assert a.test_mse == b.test_mse


def test_metrics_csv_layout(data):
    report = train_loop(SysIdMethod(), data[0], TrainConfig(max_steps=3), LossConfig())
    lines = metrics_csv(report).splitlines()
    assert lines[0] == ",".join(METRICS_HEADER) == "step,elapsed_s,lr,total,basic,ae,entropy,xent,best_total"
    assert len(lines) == 4 and lines[1].startswith("0,,")


def test_best_loss_is_monotone_and_restorable(data):
    train, _ = data
    cfg = TrainConfig(max_steps=30, seed=2)
    loss_cfg = LossConfig()
    method = SyReNetsMethod(SMALL)
    report = train_loop(method, train, cfg, loss_cfg)
    best = [r.best_total for r in report.log]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    logged = report.log[report.best_step].total
    _, br = method.loss(report.params, batch_at_step(train, cfg, report.best_step), loss_cfg)
    assert abs(br.total - logged) <= 1e-12 * max(1.0, abs(logged))


class FlakyMethod(SysIdMethod):
    """Raises a non-finite error on selected calls."""

    def __init__(self, bad):
        super().__init__()
        self.bad = bad
        self.calls = 0

    def loss(self, params, batch, cfg):
        self.calls += 1
        if self.bad(self.calls - 1):
            raise NonFiniteError("injected")
        return super().loss(params, batch, cfg)


def test_non_finite_step_is_skipped(data):
    report = train_loop(FlakyMethod(lambda i: i == 2), data[0], TrainConfig(max_steps=5), LossConfig())
    assert [r.step for r in report.log] == [0, 1, 3, 4]
    assert report.events == ["step 2: skipped update (injected)"]


def test_non_finite_streak_diverges(data):
    with pytest.raises(TrainingDiverged) as info:
        train_loop(FlakyMethod(lambda i: i >= 1), data[0], TrainConfig(max_steps=50, max_nonfinite_streak=5),
                   LossConfig())
    assert info.value.report.steps_run == 6


def test_stop_callback_ends_training(data):
    report = train_loop(SysIdMethod(), data[0], TrainConfig(max_steps=100), LossConfig(),
                        stop=lambda rep, p: len(rep.log) >= 7)
    assert report.steps_run == 7


def test_sysid_decreases_loss(data):
    train, test = data
    report = train_loop(SysIdMethod(), train, train_config_for("sysid", max_steps=200, seed=2), LossConfig(), test)
    assert report.train_mse < report.init_train_mse


# ------------------------------------------------------------- evaluate

def test_evaluate_sysid_ground_truth(data):
    _, test = data
    p = sysid_params_for(PendulumParams())
    assert evaluate(SysIdMethod(), p, test, "indirect") < 1e-18
    assert evaluate(SysIdMethod(), p, test, "direct") < 1e-18


def test_evaluate_zero_model_direct(data):
    _, test = data
    method = MlpMethod()
    params = method.init_params(0)
    params = ParamSet({k: np.zeros_like(v) for k, v in params.items()})
    assert evaluate(method, params, test, "direct") == pytest.approx(np.mean(test.lagrangian**2), rel=1e-12)


def test_evaluate_is_repeatable(data):
    _, test = data
    method = SyReNetsMethod(SMALL)
    p = method.init_params(0)
    assert evaluate(method, p, test, "indirect") == evaluate(method, p, test, "indirect")


# ---------------------------------------------------------------- sweeps

def test_summary_of_one_seed_repeats_it():
    s = summarize([SeedResult(0, 2.0, 3.0)])
    for group in ("best", "5best", "all", "5worst"):
        assert s[group]["train"] == (2.0, 0.0, 1) and s[group]["test"] == (3.0, 0.0, 1)


def test_summary_mean():
    s = summarize([SeedResult(0, 1.0, 1.0), SeedResult(1, 3.0, 3.0)])
    assert s["all"]["train"][0] == 2.0 and s["all"]["train"][1] == 1.0


def test_summary_orders_by_train_mse():
    results = [SeedResult(i, float(t), float(10 - t)) for i, t in enumerate([5, 1, 9, 3, 7, 2, 8, 4, 6, 10])]
    s = summarize(results)
    assert s["best"]["train"][0] == 1.0 and s["best"]["test"][0] == 9.0
    assert s["5best"]["train"][0] == 3.0 and s["5worst"]["train"][0] == 8.0


def test_failed_seed_is_flagged_not_dropped():
    def run(seed):
        if seed == 1:
            raise RuntimeError("boom")
        return SeedResult(seed, float(seed), float(seed))

    results = seed_sweep(run, [0, 1, 2], workers=2)
    assert [r.seed for r in results] == [0, 1, 2]
    assert results[1].failed and "boom" in results[1].note
    text = summary_csv("nn", results)
    assert "nn,failed,seed1,nan,nan,0" in text
    assert "nn,all,train,1,1,2" in text


def test_nan_seed_excluded_from_groups():
    s = summarize([SeedResult(0, math.nan, 1.0), SeedResult(1, 2.0, 2.0)])
    assert s["all"]["train"] == (2.0, 0.0, 1)
