"""Adam, plateau learning-rate decay, the best-state training loop,
evaluation and multi-seed summaries."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .mechanics import Dataset
from .model import NonFiniteError
from .objective import LossBreakdown, LossConfig
from .params import ParamSet

METRICS_HEADER = ["step", "elapsed_s", "lr", "total", "basic", "ae", "entropy", "xent", "best_total"]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_factor: float = 10.0
    patience: int = 1000
    lr_floor: float = 1e-5
    decay: bool = True
    max_steps: int | None = None
    max_seconds: float | None = None
    seed: int = 0
    # samples of the training set used for the reported train MSE (None: all)
    eval_train_samples: int | None = None
    max_nonfinite_streak: int = 100

    def __post_init__(self):
        if self.batch_size <= 0 or self.lr <= 0 or self.patience <= 0 or self.lr_floor <= 0:
            raise ValueError("batch size, learning rate, patience and lr floor must be positive")
        if self.decay_factor <= 0:
            raise ValueError("decay factor must be positive")


def train_config_for(kind: str, **overrides) -> TrainConfig:
    """Per-method defaults: plateau patience 1000 (SyReNets), 2000 (NN), no decay (SysId)."""
    base = {
        "syrenets": TrainConfig(patience=1000),
        "nn": TrainConfig(patience=2000),
        "sysid": TrainConfig(decay=False),
    }[kind]
    return replace(base, **overrides)


# -------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: ParamSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        tmp = np.multiply(g, 1.0 - beta1)
        m *= beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - beta2
        v *= beta2
        v += tmp
        # theta -= lr * (m / c1) / (sqrt(v / c2) + eps), without temporaries
        np.multiply(v, 1.0 / c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        theta -= tmp


@dataclass
class PlateauSchedule:
    """Divide the rate by ``factor`` after ``patience`` non-improving steps, down to ``floor``."""

    lr: float = 1e-3
    patience: int = 1000
    factor: float = 10.0
    floor: float = 1e-5
    enabled: bool = True
    stale: int = 0

    def update(self, improved: bool) -> float:
        if not self.enabled:
            return self.lr
        if improved:
            self.stale = 0
            return self.lr
        self.stale += 1
        if self.stale >= self.patience:
            self.lr = max(self.lr / self.factor, self.floor)
            self.stale = 0
        return self.lr


def lr_schedule(state: PlateauSchedule, improved: bool) -> float:
    return state.update(improved)


# -------------------------------------------------------------- evaluation

def evaluate(method, params, dataset: Dataset, mode: str, batch_size: int = 32) -> float:
    """Mean squared error over the whole dataset.

    Batch-coupled models are evaluated on consecutive batches of
    ``batch_size`` samples in dataset order.
    """
    n = len(dataset)
    if n == 0:
        return float("nan")
    plain = {k: ad.value_of(v) for k, v in dict(params.items() if isinstance(params, ParamSet) else params).items()}
    target = dataset.lagrangian if mode == "direct" else dataset.tau
    if method.batch_coupled:
        sq = 0.0
        for lo in range(0, n, batch_size):
            batch = dataset.subset(slice(lo, lo + batch_size))
            err = method.predict(plain, batch, mode) - (batch.lagrangian if mode == "direct" else batch.tau)
            sq += float(np.sum(err * err))
        return sq / target.size
    err = method.predict(plain, dataset, mode) - target
    return float(np.mean(err * err))


# ------------------------------------------------------------------- loop

@dataclass
class StepLog:
    step: int
    elapsed_s: float
    lr: float
    total: float
    basic: float
    ae: float
    entropy: float
    xent: float
    best_total: float


@dataclass
class TrainReport:
    kind: str
    mode: str
    seed: int
    log: list[StepLog] = field(default_factory=list)
    best_total: float = math.inf
    best_step: int | None = None
    init_train_mse: float = math.nan
    init_test_mse: float = math.nan
    train_mse: float = math.nan
    test_mse: float = math.nan
    params: ParamSet | None = None
    events: list[str] = field(default_factory=list)
    steps_run: int = 0
    final_lr: float = math.nan
    wall_clock: bool = False
    checkpoint_path: str | None = None
    equations: dict[str, str] = field(default_factory=dict)


class TrainingDiverged(RuntimeError):
    def __init__(self, report: TrainReport, message: str):
        self.report = report
        super().__init__(message)


def _train_subset(train: Dataset, cfg: TrainConfig) -> Dataset:
    if cfg.eval_train_samples is None or cfg.eval_train_samples >= len(train):
        return train
    return train.subset(slice(0, cfg.eval_train_samples))


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled mini-batches for one epoch; the data stream is seeded apart from init."""
    perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train_loop(
    method,
    train: Dataset,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    test: Dataset | None = None,
    params: ParamSet | None = None,
    stop: Callable[[TrainReport, ParamSet], bool] | None = None,
) -> TrainReport:
    """Train from a seeded initialisation, keeping the best state.

    A step is an improvement when the running mean of the total loss over the
    current epoch drops strictly below the best value seen so far; the
    parameters that produced that step are kept. Stops at ``max_steps``,
    ``max_seconds`` or when ``stop(report, params)`` returns True; the best
    parameters are then restored and evaluated.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    params = method.init_params(cfg.seed) if params is None else params.copy()
    report = TrainReport(method.kind, loss_cfg.mode, cfg.seed, wall_clock=cfg.max_seconds is not None)
    eval_set = _train_subset(train, cfg)
    report.init_train_mse = evaluate(method, params, eval_set, loss_cfg.mode, cfg.batch_size)
    if test is not None:
        report.init_test_mse = evaluate(method, params, test, loss_cfg.mode, cfg.batch_size)
    sched = PlateauSchedule(cfg.lr, cfg.patience, cfg.decay_factor, cfg.lr_floor, cfg.decay)
    adam = AdamState()
    best = params.copy()
    start = time.perf_counter()
    step = 0
    epoch = 0
    streak = 0
    max_steps = cfg.max_steps
    if max_steps is None and cfg.max_seconds is None:
        raise ValueError("set max_steps or max_seconds")

    def out_of_budget() -> bool:
        if max_steps is not None and step >= max_steps:
            return True
        return cfg.max_seconds is not None and time.perf_counter() - start >= cfg.max_seconds

    while not out_of_budget():
        ep_sum = 0.0
        ep_count = 0
        for idx in batch_order(len(train), cfg.batch_size, cfg.seed, epoch):
            if out_of_budget():
                break
            batch = train.subset(idx)
            tape = ad.Tape()
            leaves = params.on_tape(tape)
            lr = sched.lr
            try:
                total, br = method.loss(leaves, batch, loss_cfg)
                if not math.isfinite(br.total):
                    raise NonFiniteError("non-finite loss")
            except (NonFiniteError, ad.NumericDomainError, FloatingPointError) as exc:
                report.events.append(f"step {step}: skipped update ({exc})")
                streak += 1
                sched.update(False)
                step += 1
                if streak >= cfg.max_nonfinite_streak:
                    _finish(method, report, best, eval_set, test, loss_cfg, cfg, step, sched)
                    raise TrainingDiverged(report, f"{streak} consecutive non-finite steps") from exc
                continue
            streak = 0
            ep_sum += br.total
            ep_count += 1
            running = ep_sum / ep_count
            improved = running < report.best_total
            if improved:
                report.best_total = running
                report.best_step = step
                best = params.copy()
            w = br.weighted(loss_cfg)
            elapsed = time.perf_counter() - start
            report.log.append(
                StepLog(step, elapsed, lr, br.total, w["basic"], w["ae"], w["entropy"], w["xent"], report.best_total)
            )
            grads = tape.backward(total)
            adam_step(
                params,
                {name: grads.wrt(leaf) for name, leaf in leaves.items()},
                adam,
                lr,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
            )
            sched.update(improved)
            step += 1
            if stop is not None and stop(report, params):
                max_steps = step
                break
        epoch += 1
    _finish(method, report, best, eval_set, test, loss_cfg, cfg, step, sched)
    return report


def _finish(method, report, best, eval_set, test, loss_cfg, cfg, step, sched):
    report.steps_run = step
    report.final_lr = sched.lr
    report.params = best
    report.train_mse = evaluate(method, best, eval_set, loss_cfg.mode, cfg.batch_size)
    if test is not None:
        report.test_mse = evaluate(method, best, test, loss_cfg.mode, cfg.batch_size)


def batch_at_step(train: Dataset, cfg: TrainConfig, step: int) -> Dataset:
    """The mini-batch used at global ``step`` (ignoring skipped-step effects)."""
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    epoch, pos = divmod(step, per_epoch)
    return train.subset(batch_order(len(train), cfg.batch_size, cfg.seed, epoch)[pos])


# ------------------------------------------------------------------ output

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def metrics_csv(report: TrainReport) -> str:
    """Per-step metrics. ``elapsed_s`` is filled only for wall-clock runs so
    that step-budget runs are byte-reproducible."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in report.log:
        elapsed = _fmt(r.elapsed_s) if report.wall_clock else ""
        w.writerow([r.step, elapsed, _fmt(r.lr), _fmt(r.total), _fmt(r.basic), _fmt(r.ae),
                    _fmt(r.entropy), _fmt(r.xent), _fmt(r.best_total)])
    return buf.getvalue()


def write_metrics(report: TrainReport, path) -> None:
    Path(path).write_text(metrics_csv(report))


def write_timing(report: TrainReport, path) -> None:
    lines = ["step,elapsed_s"] + [f"{r.step},{r.elapsed_s:.6f}" for r in report.log]
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------- sweep

@dataclass
class SeedResult:
    seed: int
    train_mse: float
    test_mse: float
    failed: bool = False
    note: str = ""


GROUPS = ("best", "5best", "all", "5worst")


def summarize(results: list[SeedResult], group_size: int = 5) -> dict[str, dict[str, tuple[float, float, int]]]:
    """Group seeds by train MSE: single best, best five, all, worst five.

    Returns ``{group: {split: (mean, std, count)}}`` with population std.
    Failed seeds are excluded.
    """
    ok = sorted((r for r in results if not r.failed and math.isfinite(r.train_mse)), key=lambda r: r.train_mse)
    if not ok:
        return {}
    groups = {
        "best": ok[:1],
        "5best": ok[:group_size],
        "all": ok,
        "5worst": ok[-group_size:],
    }
    out = {}
    for name, members in groups.items():
        out[name] = {}
        for split in ("train", "test"):
            vals = np.array([getattr(r, f"{split}_mse") for r in members], dtype=float)
            out[name][split] = (float(vals.mean()), float(vals.std()), len(vals))
    return out


def summary_csv(kind: str, results: list[SeedResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "group", "split", "mean", "std", "n"])
    for group, splits in summarize(results).items():
        for split, (m, s, n) in splits.items():
            w.writerow([kind, group, split, _fmt(m), _fmt(s), n])
    for r in results:
        if r.failed:
            w.writerow([kind, "failed", f"seed{r.seed}", "nan", "nan", 0])
    return buf.getvalue()


def seed_sweep(run: Callable[[int], SeedResult], seeds: list[int], workers: int = 1) -> list[SeedResult]:
    """Run ``run(seed)`` for each seed; a raised exception marks that seed failed."""
    def guarded(seed: int) -> SeedResult:
        try:
            return run(seed)
        except Exception as exc:  # recorded, never silently dropped
            return SeedResult(seed, math.nan, math.nan, failed=True, note=f"{type(exc).__name__}: {exc}")

    if workers <= 1 or len(seeds) <= 1:
        return [guarded(s) for s in seeds]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, seeds))
