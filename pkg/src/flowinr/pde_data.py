"""Ground-truth trajectories for the Wave and Navier-Stokes datasets, plus dataset I/O.

Fields on a uniform r x r grid are handled as arrays [..., r, r] whose first
spatial axis is x1; ``Grid.points`` uses the same row-major order, so
``values.reshape(-1, r, r)`` and back are free.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import DataConfig
from .container import ContainerError, read_container, write_container
from .geometry import Domain, Grid, Provenance, TimeGrid, subsample, uniform_grid
from .numerics import Rng, check_finite

BOX = Domain("periodic-box", ((-1.0, 1.0), (-1.0, 1.0)))


class CFLError(RuntimeError):
    def __init__(self, courant: float, required_dt: float):
        super().__init__(f"CFL violated (Courant number {courant:.3g}); internal step must be <= {required_dt:.3g}")
        self.courant = courant
        self.required_dt = required_dt


def _wavenumbers(grid: Grid, real: bool = True):
    """Angular wavenumbers (k1, k2) broadcastable against an (r)fft2 spectrum."""
    if grid.resolution is None or grid.domain.dim != 2:
        raise ValueError("spectral solvers need a full uniform 2D grid")
    r = grid.resolution
    L1, L2 = grid.domain.lengths
    k1 = 2 * np.pi / L1 * np.fft.fftfreq(r, d=1.0 / r)
    k2 = 2 * np.pi / L2 * (np.fft.rfftfreq(r, d=1.0 / r) if real else np.fft.fftfreq(r, d=1.0 / r))
    return k1[:, None], k2[None, :]


# ----------------------------------------------------------------------- wave

def wave_initial_condition(rng: Rng, grid: Grid, amp_range=(2.0, 4.0), width_range=(0.25, 0.3)):
    """Gaussian displacement bump with zero initial velocity.

    Returns ([N x 2] values, parameters). Displacements to the peak use the
    periodic minimum image so the field is smooth across the box edges.
    """
    a = float(rng.uniform(*amp_range, 1)[0])
    b = rng.uniform(-1.0, 1.0, 2)
    r = float(rng.uniform(*width_range, 1)[0])
    u0 = gaussian_bump(grid, a, b, r)
    values = np.stack([u0, np.zeros_like(u0)], axis=1)
    return values, {"a": a, "b": b.tolist(), "r": r}


def gaussian_bump(grid: Grid, a: float, b, r: float) -> np.ndarray:
    d = grid.points - np.asarray(b)[None, :]
    if grid.domain.kind == "periodic-box":
        L = grid.domain.lengths
        d = (d + L / 2) % L - L / 2
    return a * np.exp(-np.sum(d * d, axis=1) / (2 * r * r))


def wave_solve(v0: np.ndarray, grid: Grid, times: np.ndarray, c: float = 2.0) -> np.ndarray:
    """Exact spectral evolution of u_tt = c^2 Lap u from (u0, w0 = u_t(0)).

    ``v0`` is [N x 2] or a batch [B x N x 2]; returns [(B x) T x N x 2].
    """
    if c <= 0:
        raise ValueError("wave speed must be positive")
    if grid.resolution is None:
        raise ValueError("wave_solve needs a uniform grid")
    v0 = np.asarray(v0, dtype=np.float64)
    single = v0.ndim == 2
    if single:
        v0 = v0[None]
    r = grid.resolution
    B = v0.shape[0]
    u_hat = np.fft.rfft2(v0[..., 0].reshape(B, r, r))
    w_hat = np.fft.rfft2(v0[..., 1].reshape(B, r, r))
    k1, k2 = _wavenumbers(grid)
    om = c * np.sqrt(k1 ** 2 + k2 ** 2)
    zero = om == 0
    om_safe = np.where(zero, 1.0, om)
    times = np.asarray(times, dtype=np.float64)
    out = np.empty((B, len(times), r * r, 2))
    for i, t in enumerate(times):
        cos = np.cos(om * t)
        sin = np.sin(om * t)
        sinc = np.where(zero, t, sin / om_safe)
        ut = u_hat * cos + w_hat * sinc
        wt = -u_hat * om * sin + w_hat * cos
        out[:, i, :, 0] = np.fft.irfft2(ut, s=(r, r)).reshape(B, -1)
        out[:, i, :, 1] = np.fft.irfft2(wt, s=(r, r)).reshape(B, -1)
    return out[0] if single else out


def wave_energy(values: np.ndarray, grid: Grid, c: float = 2.0) -> np.ndarray:
    """sum_x (w^2 + c^2 |grad u|^2) with the spectral gradient, per leading index."""
    r = grid.resolution
    v = np.asarray(values).reshape(-1, r * r, 2)
    u_hat = np.fft.fft2(v[..., 0].reshape(-1, r, r))
    k1, k2 = _wavenumbers(grid, real=False)
    grad2 = np.sum((k1 ** 2 + k2 ** 2) * np.abs(u_hat) ** 2, axis=(1, 2)) / (r * r)
    return np.sum(v[..., 1] ** 2, axis=1) + c * c * grad2


# ------------------------------------------------------------- navier-stokes

def ns_initial_condition(rng: Rng, grid: Grid, sigma: float = 7.0 ** 1.5, tau: float = 7.0,
                         gamma: float = 2.5) -> np.ndarray:
    """Zero-mean Gaussian random vorticity field with spectral amplitude sigma (|k|^2 + tau^2)^(-gamma/2).

    Synthesised as w(x) = sum_k amp_k Re(xi_k e^{i k.x}), xi_k standard complex
    normal; returns [N x 1].
    """
    r = grid.resolution
    amp = grf_amplitude(grid, sigma, tau, gamma)
    xi = rng.normal((r, r)) + 1j * rng.normal((r, r))
    coeff = amp * xi
    coeff[0, 0] = 0.0
    w = np.real(np.fft.ifft2(coeff)) * (r * r)
    w -= w.mean()
    return w.reshape(-1, 1)


def grf_amplitude(grid: Grid, sigma: float, tau: float, gamma: float) -> np.ndarray:
    k1, k2 = _wavenumbers(grid, real=False)
    return sigma * (k1 ** 2 + k2 ** 2 + tau ** 2) ** (-gamma / 2.0)


def diagonal_forcing(points: np.ndarray) -> np.ndarray:
    s = 2 * np.pi * (points[:, 0] + points[:, 1])
    return 0.1 * (np.sin(s) + np.cos(s))


@dataclass
class _NSOperators:
    k1: np.ndarray
    k2: np.ndarray
    lap: np.ndarray
    inv_lap: np.ndarray
    dealias: np.ndarray
    dx: float


def _ns_operators(grid: Grid) -> _NSOperators:
    r = grid.resolution
    k1, k2 = _wavenumbers(grid)
    lap = -(k1 ** 2 + k2 ** 2)
    inv_lap = np.where(lap == 0, 0.0, 1.0 / np.where(lap == 0, 1.0, lap))
    n1 = np.abs(np.fft.fftfreq(r, d=1.0 / r))[:, None]
    n2 = np.abs(np.fft.rfftfreq(r, d=1.0 / r))[None, :]
    dealias = ((n1 <= r / 3) & (n2 <= r / 3)).astype(np.float64)
    return _NSOperators(k1, k2, lap, inv_lap, dealias, float(grid.domain.lengths.min() / r))


def ns_solve(w0: np.ndarray, grid: Grid, times: np.ndarray, nu: float = 1e-3,
             forcing: np.ndarray | None = None, dt: float = 1e-2, warmup: float = 0.0) -> np.ndarray:
    """Pseudo-spectral vorticity solver: Crank-Nicolson diffusion, Heun advection, 2/3 dealiasing.

    Snapshots are returned at physical times ``warmup + times``. ``w0`` is
    [N x 1] or [B x N x 1]; ``forcing`` is a field [N] (or None). Raises
    :class:`CFLError` if the internal step violates max|u| dt / dx <= 1.
    """
    if grid.resolution is None:
        raise ValueError("ns_solve needs a uniform periodic grid")
    w0 = np.asarray(w0, dtype=np.float64)
    single = w0.ndim == 2
    if single:
        w0 = w0[None]
    r = grid.resolution
    B = w0.shape[0]
    ops = _ns_operators(grid)
    w_hat = np.fft.rfft2(w0[..., 0].reshape(B, r, r))
    f_hat = np.zeros_like(w_hat[0]) if forcing is None else np.fft.rfft2(np.asarray(forcing).reshape(r, r))
    stops = warmup + np.asarray(times, dtype=np.float64)
    if np.any(np.diff(stops) <= 0) or stops[0] < 0:
        raise ValueError("output times must be increasing and non-negative")

    def nonlinear(wh):
        wh = wh * ops.dealias
        psi = -ops.inv_lap * wh
        u1 = np.fft.irfft2(1j * ops.k2 * psi, s=(r, r))
        u2 = np.fft.irfft2(-1j * ops.k1 * psi, s=(r, r))
        g1 = np.fft.irfft2(1j * ops.k1 * wh, s=(r, r))
        g2 = np.fft.irfft2(1j * ops.k2 * wh, s=(r, r))
        adv = np.fft.rfft2(u1 * g1 + u2 * g2)
        return -adv * ops.dealias + f_hat, float(np.max(np.abs(u1) + np.abs(u2), initial=0.0))

    out = np.empty((B, len(stops), r * r, 1))
    t = 0.0
    for i, t_out in enumerate(stops):
        span = t_out - t
        if span > 0:
            n_sub = max(1, int(np.ceil(span / dt - 1e-9)))
            h = span / n_sub
            lhs = 1.0 - 0.5 * h * nu * ops.lap
            rhs_lin = 1.0 + 0.5 * h * nu * ops.lap
            for _ in range(n_sub):
                n1, umax = nonlinear(w_hat)
                courant = umax * h / ops.dx
                if courant > 1.0:
                    raise CFLError(courant, ops.dx / umax)
                w_star = (rhs_lin * w_hat + h * n1) / lhs
                n2, _ = nonlinear(w_star)
                w_hat = (rhs_lin * w_hat + 0.5 * h * (n1 + n2)) / lhs
            t = t_out
        out[:, i, :, 0] = np.fft.irfft2(w_hat, s=(r, r)).reshape(B, -1)
    check_finite(out, "vorticity")
    return out[0] if single else out


def spectral_downsample(values: np.ndarray, r_in: int, r_out: int) -> np.ndarray:
    """Truncate the Fourier series of fields on an r_in grid onto a coarser r_out grid.

    ``values`` is [..., r_in^2, n]; the Nyquist mode of the target is dropped.
    """
    if r_out > r_in:
        raise ValueError("can only downsample")
    if r_out == r_in:
        return np.array(values, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    lead = v.shape[:-2]
    n = v.shape[-1]
    f = np.moveaxis(v.reshape(lead + (r_in, r_in, n)), -1, -3)
    spec = np.fft.fft2(f)
    keep = np.fft.fftfreq(r_out, d=1.0 / r_out).astype(int)
    keep = keep[np.abs(keep) < r_out // 2]
    out = np.zeros(spec.shape[:-2] + (r_out, r_out), dtype=complex)
    out[..., keep[:, None] % r_out, keep[None, :] % r_out] = spec[..., keep[:, None] % r_in, keep[None, :] % r_in]
    coarse = np.real(np.fft.ifft2(out)) * (r_out * r_out) / (r_in * r_in)
    return np.moveaxis(coarse, -3, -1).reshape(lead + (r_out * r_out, n))


# ------------------------------------------------------------------- datasets

@dataclass(eq=False)
class Dataset:
    """Trajectories sharing one grid and time grid: values [n_traj, n_times, N, n]."""

    grid: Grid
    time_grid: TimeGrid
    values: np.ndarray
    split: str = "train"
    meta: dict = field(default_factory=dict)
    traj_meta: list = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError("values must be [n_traj, n_times, N, n]")
        if v.shape[1] != len(self.time_grid):
            raise ValueError("snapshot count differs from time count")
        if v.shape[2] != len(self.grid):
            raise ValueError("value rows differ from grid size")
        check_finite(v, "dataset value")
        self.values = v

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    def trajectory(self, i: int) -> np.ndarray:
        return self.values[i]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.grid, self.time_grid, self.values[idx], self.split, dict(self.meta),
                       [self.traj_meta[i] for i in idx] if self.traj_meta else [])

    def equals(self, other: "Dataset") -> bool:
        return (np.array_equal(self.values, other.values)
                and np.array_equal(self.grid.points, other.grid.points)
                and np.array_equal(self.time_grid.times, other.time_grid.times)
                and self.time_grid.train_horizon == other.time_grid.train_horizon
                and self.split == other.split and self.meta == other.meta
                and self.traj_meta == other.traj_meta)


def save_dataset(ds: Dataset, path) -> None:
    arrays = {"points": ds.grid.points, "times": ds.time_grid.times, "values": ds.values}
    prov = None
    if ds.grid.provenance is not None:
        arrays["mask"] = ds.grid.provenance.mask
        prov = {"resolution": ds.grid.provenance.resolution, "ratio": ds.grid.provenance.ratio}
    meta = {
        "split": ds.split,
        "domain": ds.grid.domain.to_dict(),
        "resolution": ds.grid.resolution,
        "provenance": prov,
        "train_horizon": ds.time_grid.train_horizon,
        "horizon": ds.time_grid.horizon,
        "channels": ds.channels,
        "meta": ds.meta,
        "trajectories": ds.traj_meta,
    }
    write_container(path, "dataset", arrays, meta)


def load_dataset(path, channels: int | None = None) -> Dataset:
    arrays, meta = read_container(path, kind="dataset")
    try:
        domain = Domain.from_dict(meta["domain"])
        prov = None
        if meta.get("provenance") is not None:
            p = meta["provenance"]
            prov = Provenance(p["resolution"], p["ratio"], arrays["mask"])
        grid = Grid(domain, arrays["points"], prov, meta.get("resolution"))
        tg = TimeGrid(arrays["times"], meta["train_horizon"], meta["horizon"])
        ds = Dataset(grid, tg, arrays["values"], meta["split"], meta.get("meta", {}),
                     meta.get("trajectories", []))
    except KeyError as exc:
        raise ContainerError(f"dataset manifest misses {exc}") from None
    if ds.channels != meta.get("channels", ds.channels):
        raise ContainerError("channel count differs from manifest")
    if channels is not None and ds.channels != channels:
        raise ValueError(f"expected {channels} channels, dataset has {ds.channels}")
    return ds


_SPLIT_STREAM = {"train": 0, "test": 1}


def _wave_chunk(cfg: DataConfig, split: str, idx: list[int], resolutions: tuple[int, ...]):
    sim = uniform_grid(BOX, max(resolutions))
    tg = time_grid(cfg)
    v0s, metas = [], []
    for i in idx:
        rng = Rng(cfg.seed, (_SPLIT_STREAM[split], i))
        v0, params = wave_initial_condition(rng, sim, cfg.amp_range, cfg.width_range)
        v0s.append(v0)
        metas.append({"index": i, "seed": cfg.seed, "stream": [_SPLIT_STREAM[split], i], **params})
    traj = wave_solve(np.stack(v0s), sim, tg.times, cfg.speed)
    return {r: spectral_downsample(traj, sim.resolution, r) for r in resolutions}, metas


def _ns_chunk(cfg: DataConfig, split: str, idx: list[int], resolutions: tuple[int, ...]):
    sim = uniform_grid(BOX, max(resolutions))
    tg = time_grid(cfg)
    w0s, metas = [], []
    for i in idx:
        rng = Rng(cfg.seed, (_SPLIT_STREAM[split], i))
        w0s.append(ns_initial_condition(rng, sim, cfg.grf_sigma, cfg.grf_tau, cfg.grf_gamma))
        metas.append({"index": i, "seed": cfg.seed, "stream": [_SPLIT_STREAM[split], i]})
    forcing = diagonal_forcing(sim.points) if cfg.forcing == "paper" else None
    traj = ns_solve(np.stack(w0s), sim, tg.times, cfg.viscosity, forcing, cfg.internal_dt,
                    warmup=cfg.discard_steps * cfg.dt)
    return {r: spectral_downsample(traj, sim.resolution, r) for r in resolutions}, metas


def time_grid(cfg: DataConfig) -> TimeGrid:
    tg = TimeGrid.regular(cfg.dt, cfg.train_horizon, cfg.horizon)
    return tg.refine(cfg.time_refine) if cfg.time_refine > 1 else tg


def dataset_generate(cfg: DataConfig, workers: int = 1, chunk: int = 16,
                     resolutions: tuple[int, ...] | None = None) -> dict:
    """Seeded train/test generation; every trajectory has its own Philox sub-stream.

    Returns ``{resolution: (train, test)}``; the simulation runs at
    max(resolution, sim_resolution, *resolutions) and coarser outputs are
    spectral truncations of it. Output is independent of ``workers``.
    """
    if cfg.pde not in ("wave", "navier-stokes"):
        raise ValueError(f"unknown pde {cfg.pde!r}")
    res = tuple(sorted(set((cfg.resolution,) + tuple(resolutions or ()))))
    sim_res = max(res + ((cfg.sim_resolution,) if cfg.sim_resolution else ()))
    all_res = tuple(sorted(set(res + (sim_res,))))
    fn = _wave_chunk if cfg.pde == "wave" else _ns_chunk
    tg = time_grid(cfg)
    meta = {"pde": cfg.pde, "config": _cfg_dict(cfg), "sim_resolution": sim_res,
            "generator": Rng.algorithm}
    out = {r: {} for r in res}
    for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        jobs = [list(range(s, min(s + chunk, count))) for s in range(0, count, chunk)]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(fn, [cfg] * len(jobs), [split] * len(jobs), jobs, [all_res] * len(jobs)))
        else:
            results = [fn(cfg, split, j, all_res) for j in jobs]
        metas = [m for _, ms in results for m in ms]
        for r in res:
            if results:
                vals = np.concatenate([d[r] for d, _ in results], axis=0)
            else:
                vals = np.zeros((0, len(tg), r * r, 2 if cfg.pde == "wave" else 1))
            out[r][split] = Dataset(uniform_grid(BOX, r), tg, vals, split, dict(meta, resolution=r), metas)
    return {r: (out[r]["train"], out[r]["test"]) for r in res}


def _cfg_dict(cfg: DataConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def observation_grid(ds: Dataset, ratio: float, seed: int) -> Grid:
    """The dataset's seeded observation subsample (identity for ratio 1)."""
    return subsample(ds.grid, ratio, Rng(seed, (7, int(round(ratio * 1e6)))))
