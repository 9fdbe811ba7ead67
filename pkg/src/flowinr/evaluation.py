"""Forecasting from an initial snapshot, split-wise MSE and the task-matrix runner."""
from __future__ import annotations

import csv
import json
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .decoder import DecoderParams, decode
from .dynamics import DivergenceError, DynamicsParams, encode, rk4_unroll
from .geometry import Grid, TimeGrid, in_space_mask, subsample, temporal_interpolate
from .numerics import NonFiniteError, Rng
from .pde_data import Dataset, load_dataset
from .training import load_checkpoint

REPORT_VERSION = 1
CSV_COLUMNS = ["task", "split_time", "split_space", "dataset_split", "mse", "n_points", "n_times", "seed"]
TASKS = ("extrapolation", "cross-grid", "cross-resolution", "finer-time")


@dataclass
class Model:
    config: RunConfig
    dec: DecoderParams
    psi: DynamicsParams
    alpha: np.ndarray           # stored train latents [D x T x d]
    obs_mask: np.ndarray | None

    @classmethod
    def from_state(cls, state) -> "Model":
        return cls(state.config, state.dec, state.psi, state.alpha, state.obs_mask)


def load_model(path) -> Model:
    return Model.from_state(load_checkpoint(path))


@dataclass
class Forecast:
    values: np.ndarray          # [B x T x N' x n]
    alpha: np.ndarray           # [B x T x d]
    encode_loss: np.ndarray     # [B]


def forecast(model: Model, v0: np.ndarray, ts_points: np.ndarray, query_points: np.ndarray,
             times: np.ndarray, alpha0: np.ndarray | None = None, substeps: int | None = None) -> Forecast:
    """Encode ``v0`` [B x N_ts x n] observed at ``ts_points``, unroll over ``times``, decode at ``query_points``.

    Passing ``alpha0`` skips encoding.
    """
    v0 = np.asarray(v0, dtype=np.float64)
    if v0.shape[-1] != model.dec.channels:
        raise ValueError(f"field has {v0.shape[-1]} channels, model expects {model.dec.channels}")
    if alpha0 is None:
        e = model.config.encode
        res = encode(model.dec, v0, ts_points, steps=e.steps, lr=e.lr, decay=e.decay, patience=e.patience, tol=e.tol)
        alpha0, loss = res.alpha, np.atleast_1d(res.loss)
    else:
        loss = np.full(len(alpha0), np.nan)
    steps = model.config.dynamics.substeps if substeps is None else substeps
    traj = rk4_unroll(model.psi, alpha0, times, steps)
    B, T, d = traj.shape
    vals = decode(model.dec, traj.reshape(B * T, d), query_points)
    return Forecast(vals.reshape(B, T, len(query_points), -1), traj, loss)


# ---------------------------------------------------------------- metrics

@dataclass
class Region:
    mse: float
    n_points: int
    n_times: int
    total: float = 0.0   # sum of squared errors
    count: int = 0       # number of scalar entries


@dataclass
class MetricReport:
    regions: dict = field(default_factory=dict)     # (time split, space split) -> Region
    curve: np.ndarray | None = None                 # Full-space MSE per time

    def rows(self, task: str, dataset_split: str, seed: int) -> list[dict]:
        return [{"task": task, "split_time": t, "split_space": s, "dataset_split": dataset_split,
                 "mse": r.mse, "n_points": r.n_points, "n_times": r.n_times, "seed": seed}
                for (t, s), r in self.regions.items()]

    def get(self, split_time: str, split_space: str = "Full") -> float:
        return self.regions[(split_time, split_space)].mse


def mse_split(pred: np.ndarray, truth: np.ndarray, in_space: np.ndarray | None, in_time: np.ndarray) -> MetricReport:
    """MSE over In-t/Out-t x In-s/Out-s/Full for arrays [B x T x N x n].

    ``in_space`` flags inference points that lie on the observation grid
    (None: all of them). Empty regions are left out; Full is assembled
    from the In-s and Out-s sums, so it is their count-weighted mean.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    B, T, N, n = pred.shape
    sq = (pred - truth) ** 2
    in_space = np.ones(N, bool) if in_space is None else np.asarray(in_space, bool)
    in_time = np.asarray(in_time, bool)
    rep = MetricReport(curve=sq.mean(axis=(0, 2, 3)))
    for tname, tm in (("In-t", in_time), ("Out-t", ~in_time)):
        if not tm.any():
            continue
        parts = {}
        for sname, sm in (("In-s", in_space), ("Out-s", ~in_space)):
            if not sm.any():
                continue
            block = sq[:, tm][:, :, sm]
            parts[sname] = Region(float(block.mean()), int(sm.sum()), int(tm.sum()), float(block.sum()), block.size)
        rep.regions.update({(tname, k): v for k, v in parts.items()})
        tot = sum(p.total for p in parts.values())
        cnt = sum(p.count for p in parts.values())
        rep.regions[(tname, "Full")] = Region(tot / cnt, N, int(tm.sum()), tot, cnt)
    return rep


# ------------------------------------------------------------- task grammar

@dataclass
class Cell:
    name: str
    params: dict = field(default_factory=dict)


def parse_tasks(text: str) -> list[Cell]:
    """Parse e.g. ``extrapolation,s=100,cross-grid,sts=5/50,finer-time``.

    Bare words start a cell; ``key=v1/v2`` tokens attach to the preceding
    cell (or to every cell when they come first).
    """
    cells: list[Cell] = []
    common: dict = {}
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        if "=" in tok:
            k, v = tok.split("=", 1)
            vals = [float(x) for x in v.split("/")]
            (cells[-1].params if cells else common)[k.strip()] = vals
        elif tok in TASKS:
            cells.append(Cell(tok))
        else:
            raise ValueError(f"unknown task {tok!r}; expected one of {', '.join(TASKS)}")
    if not cells:
        raise ValueError("no tasks requested")
    for c in cells:
        c.params = {**common, **c.params}
    return cells


# ------------------------------------------------------------ task runners

class Skip(Exception):
    """A cell cannot run with the artifacts at hand."""


@dataclass
class DataIndex:
    """Datasets keyed by (split, resolution, time refinement)."""
    sets: dict = field(default_factory=dict)

    def add(self, ds: Dataset) -> None:
        cfg = ds.meta.get("config", {})
        self.sets[(ds.split, ds.grid.resolution, int(cfg.get("time_refine", 1)))] = ds

    def get(self, split: str, resolution: int, refine: int = 1) -> Dataset:
        try:
            return self.sets[(split, resolution, refine)]
        except KeyError:
            raise Skip(f"no {split} dataset at resolution {resolution} with time refinement {refine}") from None

    @classmethod
    def load(cls, paths) -> "DataIndex":
        idx = cls()
        for p in paths:
            p = Path(p)
            files = sorted(p.glob("*.finr")) if p.is_dir() else [p]
            for f in files:
                idx.add(load_dataset(f))
        return idx


def _train_mask(model: Model, ds: Dataset) -> np.ndarray:
    if model.obs_mask is None:
        return np.arange(len(ds.grid))
    return np.asarray(model.obs_mask)


def _extrapolation(model: Model, data: DataIndex, cell: Cell, seed: int, curves: dict) -> list[dict]:
    want = cell.params.get("s")
    s_tr = model.config.data.obs_ratio
    if want and not any(abs(w / 100 - s_tr) < 1e-12 for w in want):
        raise Skip(f"checkpoint trained with s={s_tr * 100:g}%, requested {want}")
    r = model.config.data.resolution
    rows = []
    for split in ("train", "test"):
        ds = data.get(split, r)
        mask = _train_mask(model, ds)
        pts = ds.grid.points
        a0 = model.alpha[:, 0] if split == "train" and model.config.eval.use_stored_alpha else None
        fc = forecast(model, ds.values[:, 0][:, mask], pts[mask], pts, ds.time_grid.times, alpha0=a0)
        rep = mse_split(fc.values, ds.values, in_space_mask(len(pts), mask), ds.time_grid.in_t)
        curves[f"extrapolation/{split}"] = (ds.time_grid.times, rep.curve)
        rows += rep.rows("extrapolation", split, seed)
    return rows


def _cross_grid(model: Model, data: DataIndex, cell: Cell, seed: int, curves: dict) -> list[dict]:
    ds = data.get("test", model.config.data.resolution)
    mask = _train_mask(model, ds)
    tg = ds.time_grid
    full = ds.grid
    grids = [("same-grid", mask)]
    for s in cell.params.get("sts", [5.0, 50.0]):
        g = subsample(full, s / 100, Rng(model.config.eval.grid_seed, (11, int(round(s * 1e4)))))
        grids.append((f"s_ts={s:g}", g.provenance.mask))
    rows = []
    for label, m in grids:
        pts = full.points[m]
        fc = forecast(model, ds.values[:, 0][:, m], pts, pts, tg.times)
        rep = mse_split(fc.values, ds.values[:, :, m], None, tg.in_t)
        curves[f"cross-grid/{label}"] = (tg.times, rep.curve)
        rows += rep.rows(f"cross-grid/{label}", "test", seed)
    return rows


def _cross_resolution(model: Model, data: DataIndex, cell: Cell, seed: int, curves: dict) -> list[dict]:
    rows, skipped = [], []
    for r in cell.params.get("r", [32.0, 64.0, 256.0]):
        try:
            ds = data.get("test", int(r))
        except Skip as e:
            skipped.append(str(e))
            continue
        pts = ds.grid.points
        fc = forecast(model, ds.values[:, 0], pts, pts, ds.time_grid.times)
        rep = mse_split(fc.values, ds.values, None, ds.time_grid.in_t)
        curves[f"cross-resolution/r={int(r)}"] = (ds.time_grid.times, rep.curve)
        rows += rep.rows(f"cross-resolution/r={int(r)}", "test", seed)
    if not rows:
        raise Skip("; ".join(skipped))
    if skipped:
        curves.setdefault("_notes", []).extend(skipped)
    return rows


def _finer_time(model: Model, data: DataIndex, cell: Cell, seed: int, curves: dict) -> list[dict]:
    factor = int(cell.params.get("factor", [model.config.eval.refine_factor])[0])
    fine = data.get("test", model.config.data.resolution, factor)
    mask = _train_mask(model, fine)
    pts = fine.grid.points
    tg = fine.time_grid
    coarse_t = tg.times[::factor]
    v0 = fine.values[:, 0][:, mask]
    ode = forecast(model, v0, pts[mask], pts, tg.times)
    coarse = forecast(model, v0, pts[mask], pts, coarse_t, alpha0=ode.alpha[:, 0])
    rows = []
    preds = {"ode": ode.values}
    for order in ("linear", "quadratic"):
        series = np.moveaxis(coarse.values, 1, 0)
        preds[order] = np.moveaxis(temporal_interpolate(series, coarse_t, tg.times, order=order), 0, 1)
    for method, p in preds.items():
        rep = mse_split(p, fine.values, in_space_mask(len(pts), mask), tg.in_t)
        curves[f"finer-time/{method}"] = (tg.times, rep.curve)
        rows += rep.rows(f"finer-time/{method}", "test", seed)
    return rows


_RUNNERS = {"extrapolation": _extrapolation, "cross-grid": _cross_grid,
            "cross-resolution": _cross_resolution, "finer-time": _finer_time}


@dataclass
class Report:
    rows: list
    cells: list
    config: dict
    curves: dict
    wall_clock: float

    def find(self, task: str, split_time: str, split_space: str = "Full", dataset_split: str = "test") -> float:
        for r in self.rows:
            if (r["task"], r["split_time"], r["split_space"], r["dataset_split"]) == \
                    (task, split_time, split_space, dataset_split):
                return r["mse"]
        raise KeyError((task, split_time, split_space, dataset_split))


def run_task_matrix(model: Model, data: DataIndex, tasks: str | list[Cell], workers: int = 1) -> Report:
    """Run every requested cell; a cell lacking data is recorded as skipped and the rest proceed."""
    cells = parse_tasks(tasks) if isinstance(tasks, str) else tasks
    seed = model.config.training.seed
    start = _time.perf_counter()

    def run(cell):
        curves: dict = {}
        t0 = _time.perf_counter()
        try:
            rows = _RUNNERS[cell.name](model, data, cell, seed, curves)
            status = {"task": cell.name, "params": cell.params, "status": "ok"}
            notes = curves.pop("_notes", None)
            if notes:
                status["reason"] = "partially skipped: " + "; ".join(notes)
        except Skip as e:
            rows, status = [], {"task": cell.name, "params": cell.params, "status": "skipped", "reason": str(e)}
        except (DivergenceError, NonFiniteError) as e:
            rows, status = [], {"task": cell.name, "params": cell.params, "status": "failed", "reason": str(e)}
        status["seconds"] = _time.perf_counter() - t0
        return rows, status, curves

    if workers > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, cells))
    else:
        results = [run(c) for c in cells]
    rows, statuses, curves = [], [], {}
    for r, s, c in results:
        rows += r
        statuses.append(s)
        curves.update(c)
    return Report(rows, statuses, model.config.to_dict(), curves, _time.perf_counter() - start)


def write_report(report: Report, out_dir) -> dict:
    """Write report.csv and report.json into ``out_dir``; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in report.rows:
            w.writerow({**r, "mse": repr(r["mse"])})
    json_path = out / "report.json"
    doc = {"version": REPORT_VERSION, "config": report.config, "cells": report.cells, "rows": report.rows,
           "wall_clock_seconds": report.wall_clock,
           "conventions": {"in_t_includes_t0": True, "mse": "mean over trajectories, times, points and channels"},
           "curves": {k: {"times": t.tolist(), "mse": m.tolist()} for k, (t, m) in report.curves.items()}}
    json_path.write_text(json.dumps(doc, indent=1))
    return {"csv": csv_path, "json": json_path}


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["mse"] = float(r["mse"])
        for k in ("n_points", "n_times", "seed"):
            r[k] = int(r[k])
    return rows


# ------------------------------------------------------------------ images

def _rasterize(values: np.ndarray, points: np.ndarray, resolution: int, bounds) -> np.ndarray:
    from scipy.spatial import cKDTree
    lo, hi = np.asarray(bounds, dtype=np.float64).T
    ax = [lo[i] + (np.arange(resolution) + 0.5) * (hi[i] - lo[i]) / resolution for i in range(2)]
    q = np.stack(np.meshgrid(*ax, indexing="ij"), -1).reshape(-1, 2)
    _, nn = cKDTree(points).query(q)
    return values[nn].reshape(resolution, resolution)


def render_field(values: np.ndarray, path, resolution: int | None = None, points: np.ndarray | None = None,
                 bounds=((-1.0, 1.0), (-1.0, 1.0))) -> tuple[float, float]:
    """Write one channel as an 8-bit PGM, rows along the first coordinate.

    Pixels are (v - min) / (max - min) * 255, rounded; min and max go into a
    ``# min=... max=...`` header comment. Values on a uniform grid are given
    in row-major order with ``resolution`` set; scattered values need
    ``points`` and are rasterized by nearest neighbour.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if points is not None:
        img = _rasterize(v, np.asarray(points), resolution or int(np.ceil(np.sqrt(len(v)))), bounds)
    else:
        r = resolution or int(round(np.sqrt(len(v))))
        if r * r != len(v):
            raise ValueError(f"{len(v)} values do not form a {r}x{r} image")
        img = v.reshape(r, r)
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    pix = np.zeros(img.shape, np.uint8) if span == 0 else np.rint((img - lo) / span * 255).astype(np.uint8)
    h, w = pix.shape
    header = f"P5\n# min={lo!r} max={hi!r}\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + pix.tobytes())
    return lo, hi


def read_pgm(path) -> tuple[np.ndarray, float, float]:
    """Inverse of :func:`render_field` for its own files: (pixels, min, max)."""
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n", 4)
    if lines[0] != b"P5" or not lines[1].startswith(b"# min="):
        raise ValueError("not a flowinr PGM")
    lo_s, hi_s = lines[1][2:].decode().split()
    w, h = map(int, lines[2].split())
    pix = np.frombuffer(lines[4][: w * h], dtype=np.uint8).reshape(h, w)
    return pix, float(lo_s.split("=")[1]), float(hi_s.split("=")[1])
