"""Spatial domains, observation/inference grids and the interpolators used by baselines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng


@dataclass(frozen=True)
class Domain:
    kind: str = "periodic-box"  # or "sphere-embedded"
    bounds: tuple[tuple[float, float], ...] = ((-1.0, 1.0), (-1.0, 1.0))
    radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("periodic-box", "sphere-embedded"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.kind == "periodic-box":
            for lo, hi in self.bounds:
                if not lo < hi:
                    raise ValueError(f"degenerate axis [{lo}, {hi}]")

    @property
    def dim(self) -> int:
        return 3 if self.kind == "sphere-embedded" else len(self.bounds)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([hi - lo for lo, hi in self.bounds])

    def contains(self, points: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
        points = np.atleast_2d(points)
        if self.kind == "sphere-embedded":
            r = np.linalg.norm(points, axis=1)
            return np.abs(r - self.radius) <= rtol * self.radius
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.all((points >= lo) & (points <= hi), axis=1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bounds": [list(b) for b in self.bounds], "radius": self.radius}

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        return cls(d["kind"], tuple(tuple(float(x) for x in b) for b in d.get("bounds", ())),
                   float(d.get("radius", 1.0)))


@dataclass(frozen=True)
class Provenance:
    resolution: int
    ratio: float
    mask: np.ndarray  # indices into the parent uniform grid


@dataclass(frozen=True, eq=False)
class Grid:
    """Ordered point set with optional link back to the uniform grid it was drawn from."""

    domain: Domain
    points: np.ndarray
    provenance: Provenance | None = None
    resolution: int | None = None  # set only for full uniform grids

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != self.domain.dim:
            raise ValueError(f"points must be [N x {self.domain.dim}], got {pts.shape}")
        if not np.all(self.domain.contains(pts)):
            raise ValueError("grid points outside the domain")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def is_uniform(self) -> bool:
        return self.resolution is not None

    def check_unique(self) -> None:
        if len(np.unique(self.points, axis=0)) != len(self):
            raise ValueError("duplicate grid points")


def uniform_grid(domain: Domain, resolution: int) -> Grid:
    """r^p points, periodic convention x_i = lo + i*(hi-lo)/r, row-major (first axis slowest)."""
    if domain.kind != "periodic-box":
        raise ValueError("uniform grids exist only on periodic boxes")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    axes = [lo + np.arange(resolution) * (hi - lo) / resolution for lo, hi in domain.bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return Grid(domain, pts, resolution=resolution)


def subsample(grid: Grid, ratio: float, rng: Rng) -> Grid:
    """Uniform random subset without replacement of size round(ratio * N), sorted by index."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    n = len(grid)
    if ratio == 1.0:
        mask = np.arange(n)
    else:
        k = int(round(ratio * n))
        if k == 0:
            raise ValueError(f"ratio {ratio} leaves no points out of {n}")
        mask = np.sort(rng.generator.choice(n, size=k, replace=False))
    res = grid.resolution if grid.resolution is not None else 0
    return Grid(grid.domain, grid.points[mask], Provenance(res, float(ratio), mask))


def restrict(grid: Grid, mask: np.ndarray) -> Grid:
    mask = np.asarray(mask, dtype=np.int64)
    if len(np.unique(mask)) != len(mask):
        raise ValueError("mask indices must be unique")
    res = grid.resolution if grid.resolution is not None else 0
    return Grid(grid.domain, grid.points[mask], Provenance(res, len(mask) / len(grid), mask))


def in_space_mask(n_inference: int, observed: np.ndarray | None) -> np.ndarray:
    """Boolean In-s indicator over an inference grid given observation indices into it."""
    flags = np.zeros(n_inference, dtype=bool)
    if observed is None:
        flags[:] = True
    else:
        flags[np.asarray(observed, dtype=np.int64)] = True
    return flags


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray
    train_horizon: float
    horizon: float = field(default=None)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or len(t) == 0 or t[0] != 0.0:
            raise ValueError("times must be a 1D array starting at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        horizon = float(t[-1]) if self.horizon is None else float(self.horizon)
        if not self.train_horizon < horizon:
            raise ValueError("train horizon must be smaller than inference horizon")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "horizon", horizon)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def in_t(self) -> np.ndarray:
        # small slack so that T computed as k*dt is classified In-t
        return self.times <= self.train_horizon + 1e-9

    @property
    def n_train(self) -> int:
        return int(np.sum(self.in_t))

    @classmethod
    def regular(cls, dt: float, train_horizon: float, horizon: float) -> "TimeGrid":
        n = int(round(horizon / dt)) + 1
        return cls(np.arange(n) * dt, train_horizon, horizon)

    def refine(self, factor: int) -> "TimeGrid":
        t = self.times
        fine = np.concatenate([np.linspace(a, b, factor, endpoint=False) for a, b in zip(t[:-1], t[1:])] + [t[-1:]])
        return TimeGrid(fine, self.train_horizon, self.horizon)


# ------------------------------------------------------------- interpolation

def _lagrange_cubic_weights(t: np.ndarray) -> np.ndarray:
    """Weights of the 4-point cubic Lagrange stencil at offsets -1, 0, 1, 2."""
    return np.stack([
        -t * (t - 1) * (t - 2) / 6.0,
        (t + 1) * (t - 1) * (t - 2) / 2.0,
        -(t + 1) * t * (t - 2) / 2.0,
        (t + 1) * t * (t - 1) / 6.0,
    ], axis=-1)


def bicubic_interpolate(values: np.ndarray, grid: Grid, queries: np.ndarray) -> np.ndarray:
    """Tensor-product cubic (4x4 Lagrange stencil) interpolation on a uniform periodic 2D grid.

    ``values`` is [N] or [N x n] ordered like ``grid.points``; stencil indices
    wrap around the box edges. Exact at nodes and for local bicubic polynomials.
    """
    if grid.resolution is None or grid.domain.dim != 2:
        raise ValueError("bicubic interpolation needs a full uniform 2D grid")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if not np.all(grid.domain.contains(queries)):
        raise ValueError("query outside domain")
    r = grid.resolution
    vals = np.asarray(values, dtype=np.float64)
    squeeze = vals.ndim == 1
    field_ = vals.reshape(r, r, -1)
    lo = np.array([b[0] for b in grid.domain.bounds])
    h = grid.domain.lengths / r
    u = (queries - lo) / h
    base = np.floor(u).astype(np.int64)
    frac = u - base
    out = np.zeros((len(queries), field_.shape[2]))
    offs = np.arange(-1, 3)
    wx = _lagrange_cubic_weights(frac[:, 0])
    wy = _lagrange_cubic_weights(frac[:, 1])
    for a, oa in enumerate(offs):
        ia = (base[:, 0] + oa) % r
        for b, ob in enumerate(offs):
            ib = (base[:, 1] + ob) % r
            out += (wx[:, a] * wy[:, b])[:, None] * field_[ia, ib]
    return out[:, 0] if squeeze else out


def temporal_interpolate(series: np.ndarray, times: np.ndarray, queries: np.ndarray,
                         order: str = "linear") -> np.ndarray:
    """Piecewise linear or quadratic interpolation along the leading (time) axis.

    Quadratic uses the three nodes nearest to each query (a Lagrange parabola),
    shifted inward at the ends of the series.
    """
    times = np.asarray(times, dtype=np.float64)
    queries = np.atleast_1d(np.asarray(queries, dtype=np.float64))
    series = np.asarray(series, dtype=np.float64)
    tol = 1e-12 * max(1.0, abs(times[-1]))
    if np.any(queries < times[0] - tol) or np.any(queries > times[-1] + tol):
        raise ValueError("temporal extrapolation beyond the series endpoints")
    queries = np.clip(queries, times[0], times[-1])
    n = len(times)
    if order == "linear":
        i = np.clip(np.searchsorted(times, queries, side="right") - 1, 0, n - 2)
        w = (queries - times[i]) / (times[i + 1] - times[i])
        w = w.reshape((-1,) + (1,) * (series.ndim - 1))
        return (1 - w) * series[i] + w * series[i + 1]
    if order == "quadratic":
        if n < 3:
            raise ValueError("quadratic interpolation needs at least 3 samples")
        nearest = np.argmin(np.abs(times[None, :] - queries[:, None]), axis=1)
        i0 = np.clip(nearest - 1, 0, n - 3)
        t0, t1, t2 = times[i0], times[i0 + 1], times[i0 + 2]
        q = queries
        l0 = (q - t1) * (q - t2) / ((t0 - t1) * (t0 - t2))
        l1 = (q - t0) * (q - t2) / ((t1 - t0) * (t1 - t2))
        l2 = (q - t0) * (q - t1) / ((t2 - t0) * (t2 - t1))
        shp = (-1,) + (1,) * (series.ndim - 1)
        return l0.reshape(shp) * series[i0] + l1.reshape(shp) * series[i0 + 1] + l2.reshape(shp) * series[i0 + 2]
    raise ValueError(f"unknown interpolation order {order!r}")
