"""Command-line entry point: ``syrenets <verb> [options]``.

Exit codes: 0 success, 2 usage or I/O problem, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .expr import ExprStore, StateLayout, pretty_print
from .mechanics import DatasetFormatError, load_dataset, sample_dataset, save_dataset
from .methods import METHODS, SyReNetsMethod, loss_gradcheck, make_method, method_from_header
from .model import ArchConfig, NonFiniteError, extract_equation, format_layered
from .objective import LossConfig
from .params import CheckpointError, load_checkpoint, save_checkpoint
from .training import (
    SeedResult,
    TrainingDiverged,
    seed_sweep,
    summary_csv,
    summarize,
    train_config_for,
    train_loop,
    write_metrics,
    write_timing,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

MODES = ("direct", "indirect")


class UsageError(Exception):
    """Bad arguments, missing files or malformed inputs (exit code 2)."""


# ------------------------------------------------------------------ config

def read_config_file(path) -> dict[str, str]:
    """Plain ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}: line {n}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def resolve_config(args: argparse.Namespace, defaults: dict[str, str]) -> dict[str, str]:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
    for key in ("seed", "steps", "seconds", "mode", "method", "seeds", "count", "test_count"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = str(value)
    return cfg


def _int(cfg, key, default=None):
    v = cfg.get(key)
    if v in (None, "", "none"):
        return default
    try:
        return int(v)
    except ValueError:
        raise UsageError(f"config {key}={v!r} is not an integer") from None


def _float(cfg, key, default=None):
    v = cfg.get(key)
    if v in (None, "", "none"):
        return default
    try:
        return float(v)
    except ValueError:
        raise UsageError(f"config {key}={v!r} is not a number") from None


def arch_from_config(cfg: dict[str, str]) -> ArchConfig:
    base = ArchConfig()
    try:
        return ArchConfig(
            n_layers=_int(cfg, "n_layers", base.n_layers),
            n_heads=_int(cfg, "n_heads", base.n_heads),
            latent_dim=_int(cfg, "latent_dim", base.latent_dim),
            selection_hidden=_int(cfg, "selection_hidden", base.selection_hidden),
            ae_hidden=tuple(int(h) for h in cfg["ae_hidden"].split(",")) if cfg.get("ae_hidden") else base.ae_hidden,
            scale_inputs=_int(cfg, "scale_inputs", None) or None,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def method_from_config(kind: str, cfg: dict[str, str]):
    if kind not in METHODS:
        raise UsageError(f"unknown method {kind!r}; choose from {', '.join(METHODS)}")
    if kind == "syrenets":
        return make_method(kind, arch_from_config(cfg))
    method = make_method(kind)
    if kind == "nn" and (cfg.get("mlp_hidden") or cfg.get("fd_step")):
        hidden = tuple(int(h) for h in cfg["mlp_hidden"].split(",")) if cfg.get("mlp_hidden") else method.config.hidden
        method = replace(method, config=replace(method.config, hidden=hidden,
                                                fd_step=_float(cfg, "fd_step", method.config.fd_step)))
    return method


def loss_from_config(cfg: dict[str, str]) -> LossConfig:
    mode = cfg.get("mode", "indirect")
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; choose direct or indirect")
    base = LossConfig()
    try:
        return LossConfig(
            lambda1=_float(cfg, "lambda1", base.lambda1),
            lambda2=_float(cfg, "lambda2", base.lambda2),
            lambda3=_float(cfg, "lambda3", base.lambda3),
            mode=mode,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def train_from_config(kind: str, cfg: dict[str, str]):
    steps = _int(cfg, "steps")
    seconds = _float(cfg, "seconds")
    if steps is None and seconds is None:
        steps = 1000
    overrides = {
        "max_steps": steps,
        "max_seconds": seconds,
        "seed": _int(cfg, "seed", 0),
    }
    for key, conv in (("batch_size", _int), ("lr", _float), ("patience", _int), ("lr_floor", _float),
                      ("decay_factor", _float), ("eval_train_samples", _int)):
        if cfg.get(key):
            overrides[key] = conv(cfg, key)
    try:
        return train_config_for(kind, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def write_manifest(out: Path, command: str, cfg: dict[str, str], extra: dict | None = None) -> None:
    doc = {"command": command, "version": __version__, "config": dict(sorted(cfg.items()))}
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load(path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {path}") from None
    except (OSError, DatasetFormatError) as exc:
        raise UsageError(str(exc)) from None


def _datasets(data_dir) -> tuple:
    d = Path(data_dir)
    if d.is_file():
        return _load(d), None
    train = _load(d / "train.csv")
    test = _load(d / "test.csv") if (d / "test.csv").exists() else None
    return train, test


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args, {"seed": "0", "count": "32000", "test_count": "10000"})
    out = _out_dir(args.out)
    seed = _int(cfg, "seed")
    count, test_count = _int(cfg, "count"), _int(cfg, "test_count")
    if count < 0 or test_count < 0:
        raise UsageError("counts must be non-negative")
    train = sample_dataset(count, seed, stream=0)
    test = sample_dataset(test_count, seed, stream=1)
    try:
        save_dataset(train, out / "train.csv")
        save_dataset(test, out / "test.csv")
    except OSError as exc:
        raise UsageError(f"cannot write dataset: {exc}") from None
    write_manifest(out, "gen-data", cfg)
    for name, ds in (("train", train), ("test", test)):
        if len(ds):
            print(f"{name}: {len(ds)} rows, L mean {ds.lagrangian.mean():.6g} std {ds.lagrangian.std():.6g}, "
                  f"|tau| max {np.abs(ds.tau).max():.6g}")
        else:
            print(f"{name}: 0 rows")
    return EXIT_OK


def _reference_batch(train, size: int = 32):
    return train.subset(slice(0, min(size, len(train))))


def equation_text(method, params, train) -> str:
    ref = _reference_batch(train)
    soft = format_layered(params, method.config, ref.q, ref.qd)
    store = ExprStore(StateLayout(method.config.n_joints))
    argmax = pretty_print(extract_equation(params, method.config, ref.q, ref.qd, "argmax", store))
    return "# argmax\n" + argmax + "\n# soft\n" + "\n".join(soft) + "\n"


def _report_json(report) -> dict:
    def clean(x):
        return None if isinstance(x, float) and not math.isfinite(x) else x

    return {
        "method": report.kind,
        "mode": report.mode,
        "seed": report.seed,
        "steps_run": report.steps_run,
        "best_total": clean(report.best_total),
        "best_step": report.best_step,
        "init_train_mse": clean(report.init_train_mse),
        "init_test_mse": clean(report.init_test_mse),
        "train_mse": clean(report.train_mse),
        "test_mse": clean(report.test_mse),
        "final_lr": clean(report.final_lr),
        "events": report.events,
    }


def run_training(kind: str, cfg: dict[str, str], train, test, out: Path):
    """Train one seed into ``out``; returns the report. Raises TrainingDiverged
    after writing the last good checkpoint."""
    method = method_from_config(kind, cfg)
    tcfg = train_from_config(kind, cfg)
    lcfg = loss_from_config(cfg)
    diverged = None
    try:
        report = train_loop(method, train, tcfg, lcfg, test=test)
    except TrainingDiverged as exc:
        report, diverged = exc.report, exc
    header = {"kind": method.kind, "mode": lcfg.mode, "seed": tcfg.seed, "best_step": report.best_step,
              **method.header()}
    save_checkpoint(out / "checkpoint.txt", report.params, header)
    report.checkpoint_path = str(out / "checkpoint.txt")
    write_metrics(report, out / "metrics.csv")
    if report.wall_clock:
        write_timing(report, out / "timing.csv")
    if isinstance(method, SyReNetsMethod) and diverged is None:
        text = equation_text(method, report.params, train)
        (out / "equation.txt").write_text(text)
        report.equations = {"text": text}
    (out / "report.json").write_text(json.dumps(_report_json(report), indent=2, sort_keys=True) + "\n")
    if diverged is not None:
        raise diverged
    return report


def cmd_train(args) -> int:
    kind = args.method_pos or args.method
    if kind is None:
        raise UsageError("train needs a method: syrenets, nn or sysid")
    cfg = resolve_config(args, {"seed": "0", "mode": "indirect"})
    cfg["method"] = kind
    method_from_config(kind, cfg)
    loss_from_config(cfg)
    train, test = _datasets(args.data)
    out = _out_dir(args.out)
    write_manifest(out, "train", cfg, {"data": str(args.data)})
    try:
        report = run_training(kind, cfg, train, test, out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good checkpoint kept in {out}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{kind} {cfg['mode']} seed {cfg['seed']}: steps {report.steps_run}, "
          f"train MSE {report.train_mse:.6g}, test MSE {report.test_mse:.6g}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        params, header = load_checkpoint(path)
        method = method_from_header(header)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise UsageError(f"corrupt checkpoint: {exc}") from None
    return method, params, header


def cmd_eval(args) -> int:
    method, params, header = _load_ckpt(args.checkpoint)
    mode = args.mode or header.get("mode", "indirect")
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}")
    train, test = _datasets(args.data)
    ds = test if test is not None else train
    from .training import evaluate

    mse = evaluate(method, params, ds, mode)
    print(f"{mode} MSE {mse:.17g}")
    return EXIT_OK


def cmd_extract(args) -> int:
    method, params, _ = _load_ckpt(args.checkpoint)
    if not isinstance(method, SyReNetsMethod):
        raise UsageError("extract applies to syrenets checkpoints only")
    if args.data:
        train, _ = _datasets(args.data)
    else:
        train = sample_dataset(32, 0)
    ref = _reference_batch(train)
    if args.form == "layered":
        print("\n".join(format_layered(params, method.config, ref.q, ref.qd)))
    else:
        store = ExprStore(StateLayout(method.config.n_joints))
        print(pretty_print(extract_equation(params, method.config, ref.q, ref.qd, args.form, store)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kind = args.method_pos or args.method or "syrenets"
    cfg = resolve_config(args, {"seed": "0", "mode": "indirect"})
    method = method_from_config(kind, cfg)
    lcfg = loss_from_config(cfg)
    seed = _int(cfg, "seed")
    batch = sample_dataset(32, seed, stream=2)
    params = method.init_params(seed)
    report = loss_gradcheck(method, params, batch, lcfg, n_coords=args.coords, seed=seed, tol=args.tol)
    for c, a, n in zip(report.coords, report.analytic, report.numeric):
        name, idx = params.locate(int(c))
        print(f"{name}{list(map(int, idx))}: analytic {a:.10g} numeric {n:.10g}")
    status = "ok" if report.passed else f"FAILED at {len(report.failures)} slots"
    print(f"{kind} {lcfg.mode}: max relative error {report.max_rel_err:.3g} (tol {args.tol:g}) {status}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def sweep_workers(n_seeds: int) -> int:
    raw = os.environ.get("SYRENETS_THREADS", "1")
    try:
        cap = max(1, int(raw))
    except ValueError:
        raise UsageError(f"SYRENETS_THREADS={raw!r} is not an integer") from None
    return min(cap, n_seeds)


def cmd_sweep(args) -> int:
    kind = args.method_pos or args.method
    if kind is None:
        raise UsageError("sweep needs a method: syrenets, nn or sysid")
    cfg = resolve_config(args, {"seed": "0", "mode": "indirect", "seeds": "10"})
    cfg["method"] = kind
    method_from_config(kind, cfg)
    loss_from_config(cfg)
    n_seeds = _int(cfg, "seeds")
    if n_seeds < 1:
        raise UsageError("--seeds must be at least 1")
    first = _int(cfg, "seed")
    train, test = _datasets(args.data)
    out = _out_dir(args.out)
    write_manifest(out, "sweep", cfg, {"data": str(args.data)})

    def run(seed: int) -> SeedResult:
        sub = _out_dir(out / f"seed{seed}")
        seed_cfg = dict(cfg, seed=str(seed))
        report = run_training(kind, seed_cfg, train, test, sub)
        return SeedResult(seed, report.train_mse, report.test_mse)

    seeds = list(range(first, first + n_seeds))
    results = seed_sweep(run, seeds, workers=sweep_workers(n_seeds))
    (out / "summary.csv").write_text(summary_csv(kind, results))
    for r in results:
        flag = f" FAILED ({r.note})" if r.failed else ""
        print(f"seed {r.seed}: train {r.train_mse:.6g} test {r.test_mse:.6g}{flag}")
    for group, splits in summarize(results).items():
        tr, te = splits["train"], splits["test"]
        print(f"{group:>6}: train {tr[0]:.6g} (+- {tr[1]:.3g})  test {te[0]:.6g} (+- {te[1]:.3g})")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="syrenets", description="Symbolic regression networks for Lagrangians.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="key=value file; flags override its values")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="sample double-pendulum train/test CSVs")
    common(p)
    p.add_argument("--count", type=int, help="training rows (default 32000)")
    p.add_argument("--test-count", dest="test_count", type=int, help="test rows (default 10000)")
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train", cmd_train, "train one model"), ("sweep", cmd_sweep, "train several seeds")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("method_pos", nargs="?", metavar="METHOD", choices=METHODS)
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--steps", type=int)
        p.add_argument("--seconds", type=float)
        p.add_argument("--data", default="data", help="directory with train.csv/test.csv, or one CSV")
        p.add_argument("--out", default="runs/" + name)
        if name == "sweep":
            p.add_argument("--seeds", type=int, help="number of seeds (default 10)")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="MSE of a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("--data", default="data")
    p.add_argument("--mode", choices=MODES)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract", help="print the equation of a SyReNets checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="reference batch source (default: 32 sampled states)")
    p.add_argument("--form", choices=("argmax", "soft", "layered"), default="argmax")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("gradcheck", help="reverse mode vs finite differences on a fresh init")
    common(p)
    p.add_argument("method_pos", nargs="?", metavar="METHOD", choices=METHODS)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--coords", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
