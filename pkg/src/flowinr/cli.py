"""Command-line entry point: generate, train, evaluate, selftest.

Exit codes: 0 success, 1 failed check or diverged run, 2 usage/config error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError
from .container import ContainerError
from .numerics import NonFiniteError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
WORKERS_ENV = "FLOWINR_WORKERS"


class UsageError(Exception):
    pass


def _default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"{WORKERS_ENV}={raw!r} is not an integer") from None


def _dataset_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.finr"))
        if not files:
            raise FileNotFoundError(f"no dataset files in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return [path]


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    from .pde_data import dataset_generate, save_dataset
    user = json.loads(Path(args.config).read_text()) if args.config else {}
    user.setdefault("data", {})
    if args.seed is not None:
        user["data"]["seed"] = args.seed
    cfg = cfgmod.resolve(user, pde=args.pde, preset=args.preset)
    out = Path(args.out)
    extra_res = tuple(args.resolutions or ())
    targets = {"train.finr": None, "test.finr": None}
    for r in extra_res:
        if r != cfg.data.resolution:
            targets[f"test_r{r}.finr"] = None
    if args.time_refine > 1:
        targets[f"test_fine{args.time_refine}.finr"] = None
    clash = [n for n in targets if (out / n).exists()]
    if clash and not args.force:
        raise FileExistsError(f"{out / clash[0]} exists (use --force to overwrite)")
    t0 = time.perf_counter()
    sets = dataset_generate(cfg.data, workers=args.workers, resolutions=extra_res)
    out.mkdir(parents=True, exist_ok=True)
    train, test = sets[cfg.data.resolution]
    written = [(out / "train.finr", train), (out / "test.finr", test)]
    for r in extra_res:
        if r != cfg.data.resolution:
            written.append((out / f"test_r{r}.finr", sets[r][1]))
    if args.time_refine > 1:
        fine_cfg = dataclasses.replace(cfg.data, time_refine=args.time_refine, n_train=0)
        written.append((out / f"test_fine{args.time_refine}.finr", dataset_generate(fine_cfg)[cfg.data.resolution][1]))
    for path, ds in written:
        ds.meta["workers"] = args.workers
        save_dataset(ds, path)
        print(f"{path}: {ds.split} {len(ds)} trajectories x {len(ds.time_grid)} times x "
              f"{ds.grid.resolution}^2 points x {ds.channels} channels")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    print(f"generated in {time.perf_counter() - t0:.1f}s (pde={cfg.data.pde}, preset={cfg.preset}, seed={cfg.data.seed})")
    return EXIT_OK


# ------------------------------------------------------------------- train

def _train_config(args, ds) -> cfgmod.RunConfig:
    user = json.loads(Path(args.config).read_text()) if args.config else {}
    ds_data = dict(ds.meta.get("config", {}))
    if not ds_data:
        raise ConfigError("dataset carries no generation config")
    if ds_data.get("time_refine", 1) != 1:
        raise ConfigError("training data must be on the regular time grid")
    given = dict(user.get("data", {}))
    for k, v in given.items():
        if k != "obs_ratio" and k in ds_data and _norm(v) != _norm(ds_data[k]):
            raise ConfigError(f"config data.{k}={v!r} disagrees with the dataset ({ds_data[k]!r})")
    user["data"] = {**ds_data, **given}
    preset = args.preset or user.get("preset") or ds.meta.get("preset") or "paper"
    return cfgmod.resolve(user, pde=ds_data["pde"], preset=preset)


def _norm(v):
    return list(v) if isinstance(v, (list, tuple)) else v


def cmd_train(args) -> int:
    from .pde_data import load_dataset
    from .training import fit, init_state, load_checkpoint, prepare_data, save_checkpoint
    data_path = Path(args.data)
    if data_path.is_dir():
        data_path = data_path / "train.finr"
    if not data_path.exists():
        raise FileNotFoundError(f"{data_path} does not exist")
    ds = load_dataset(data_path)
    cfg = _train_config(args, ds)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, epochs=args.epochs))
    if cfg.decoder.latent_dim % ds.channels:
        raise ConfigError(f"latent_dim {cfg.decoder.latent_dim} not divisible by {ds.channels} channels")
    data = prepare_data(ds, cfg)
    if args.resume:
        state = load_checkpoint(args.resume, expect=cfg)
        if state.alpha.shape[:2] != data.values.shape[:2]:
            raise ConfigError("checkpoint latents do not match the dataset shape")
        if state.obs_mask is not None and not np.array_equal(state.obs_mask, data.obs_mask):
            raise ConfigError("checkpoint observation grid differs from the dataset's")
        state.workers = args.workers
    else:
        state = init_state(cfg, data.values.shape[0], data.values.shape[1], ds.channels, data.obs_mask,
                           workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    ckpt = out / "checkpoint.finr"
    log_path = out / "train.log.jsonl"
    extra = {"dataset": str(data_path), "dataset_meta": ds.meta}
    if not args.resume:
        save_checkpoint(state, ckpt, extra)
    with open(log_path, "a") as log:
        def write(rec):
            log.write(json.dumps(rec) + "\n")
            log.flush()
            if not args.quiet and (rec["epoch"] % 100 == 0 or rec["epoch"] + 1 == cfg.training.epochs):
                print(f"epoch {rec['epoch']:5d}  l_dec {rec['l_dec']:.4e}  l_dyn {rec['l_dyn'] or 0:.4e}")
        try:
            stop = cfg.training.epochs if args.until is None else min(args.until, cfg.training.epochs)
            fit(state, data, epochs=stop, log=write, checkpoint=lambda s: save_checkpoint(s, ckpt, extra),
                checkpoint_every=args.checkpoint_every)
        except NonFiniteError as e:
            print(f"error: {e}; last good checkpoint kept at {ckpt}", file=sys.stderr)
            return EXIT_FAIL
    save_checkpoint(state, ckpt, extra)
    print(f"checkpoint: {ckpt} (epoch {state.epoch})")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(args) -> int:
    from .evaluation import DataIndex, forecast, load_model, parse_tasks, render_field, run_task_matrix, write_report
    from .pde_data import load_dataset
    if not args.tasks or not args.tasks.strip():
        raise UsageError("--tasks must name at least one task")
    try:
        cells = parse_tasks(args.tasks)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if not Path(args.ckpt).exists():
        raise FileNotFoundError(f"{args.ckpt} does not exist")
    model = load_model(args.ckpt)
    files = [f for p in args.data for f in _dataset_files(Path(p))]
    index = DataIndex()
    for f in files:
        index.add(load_dataset(f))
    report = run_task_matrix(model, index, cells, workers=args.workers)
    report.config["eval_notes"] = {"in_t_includes_t0": True, "workers": args.workers,
                                   "checkpoint": str(args.ckpt), "data": [str(f) for f in files]}
    out = Path(args.out)
    paths = write_report(report, out)
    for c in report.cells:
        line = f"{c['task']:<17} {c['status']}"
        print(line + (f": {c['reason']}" if "reason" in c else ""))
    for r in report.rows:
        print(f"  {r['task']:<26} {r['dataset_split']:<5} {r['split_time']:<5} {r['split_space']:<5} {r['mse']:.4e}")
    cfg = model.config
    if cfg.eval.figures and report.curves:
        from .plotting import plot_curves, plot_snapshots
        plot_curves(report.curves, out / "mse_curves.png", cfg.data.train_horizon)
        try:
            test = index.get("test", cfg.data.resolution)
        except Exception:
            test = None
        if test is not None and len(test):
            mask = model.obs_mask if model.obs_mask is not None else np.arange(len(test.grid))
            pts = test.grid.points
            fc = forecast(model, test.values[:1, 0][:, mask], pts[mask], pts, test.time_grid.times)
            plot_snapshots(test.values[0], fc.values[0], test.time_grid.times, test.grid.resolution,
                           out / "snapshots.png")
            if cfg.eval.render_pgm:
                r = test.grid.resolution
                render_field(test.values[0, -1, :, 0], out / "truth_last.pgm", r)
                render_field(fc.values[0, -1, :, 0], out / "pred_last.pgm", r)
    print(f"report: {paths['csv']} {paths['json']}")
    failed = [c for c in report.cells if c["status"] == "failed"]
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------- selftest

def cmd_selftest(args) -> int:
    from .selftest import run
    checks = run(corrupt_gradient=args.corrupt_gradient, n_configs=args.configs)
    bad = [c for c in checks if not c.ok]
    print(f"{len(checks) - len(bad)}/{len(checks)} checks passed")
    return EXIT_FAIL if bad else EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowinr", description="Continuous-space PDE forecasting with latent flows.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate train/test datasets")
    g.add_argument("--pde", required=True, choices=cfgmod.PDES)
    g.add_argument("--preset", default="paper", choices=cfgmod.PRESETS)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--config", help="JSON overrides")
    g.add_argument("--resolutions", type=int, nargs="*", help="extra test resolutions")
    g.add_argument("--time-refine", type=int, default=1, help="also write a test set on a finer time grid")
    g.add_argument("--force", action="store_true")
    g.add_argument("--workers", type=int)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="fit decoder, latents and dynamics")
    t.add_argument("--data", required=True, help="train dataset file or generate output directory")
    t.add_argument("--config", help="JSON config (sections data/decoder/dynamics/training/encode/eval)")
    t.add_argument("--preset", choices=cfgmod.PRESETS)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="total epochs (overrides config)")
    t.add_argument("--until", type=int, help="stop after this epoch without changing the schedule (resume later)")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="run forecasting tasks and write reports")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, nargs="+", help="dataset files or directories")
    e.add_argument("--tasks", required=True, help="e.g. extrapolation,s=100,cross-grid,sts=5/50,finer-time")
    e.add_argument("--out", required=True)
    e.add_argument("--workers", type=int)
    e.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("selftest", help="fast invariant suite")
    s.add_argument("--configs", type=int, default=20, help="random configs per gradient check")
    s.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        if getattr(args, "workers", 0) is None:
            args.workers = _default_workers()
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ContainerError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
