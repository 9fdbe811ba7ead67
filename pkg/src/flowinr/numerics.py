"""Dense float64 arrays, seeded random streams, Adam and a finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Parametric
components expose their weights as a :class:`ParamBundle` (name -> array) with
a mirrored gradient map, which is what :func:`adam_step` consumes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where the contract forbids it."""


def check_finite(x, what: str = "value") -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite {what}")


def as_tensor(x, shape=None) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    check_finite(arr, "tensor entry")
    return arr


# --------------------------------------------------------------------------- rng

class Rng:
    """Counter-based Philox4x64 stream (numpy's implementation).

    Philox output depends only on (key, counter), so a seed reproduces the same
    draws on every platform. ``spawn`` derives independent sub-streams keyed by
    the parent seed and a stream id.
    """

    algorithm = "philox4x64-10"

    def __init__(self, seed: int = 0, stream: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence([self.seed, *self.stream])
        self._bitgen = np.random.Philox(ss)
        self._gen = np.random.Generator(self._bitgen)

    def spawn(self, *stream: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(stream))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, lo: float, hi: float, shape) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"need lo < hi, got {lo}, {hi}")
        shape = _check_shape(shape)
        return self._gen.uniform(lo, hi, size=shape)

    def normal(self, shape) -> np.ndarray:
        shape = _check_shape(shape)
        return self._gen.standard_normal(size=shape)

    def get_state(self) -> dict:
        st = self._bitgen.state
        return _jsonable(st)

    def set_state(self, state: dict) -> None:
        st = dict(state)
        st["state"] = {k: np.asarray(v, dtype=np.uint64) for k, v in st["state"].items()}
        st["buffer"] = np.asarray(st["buffer"], dtype=np.uint64)
        self._bitgen.state = st


def _check_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"empty shape dimension in {shape}")
    return shape


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def draw_uniform(rng: Rng, lo: float, hi: float, shape) -> np.ndarray:
    return rng.uniform(lo, hi, shape)


def draw_normal(rng: Rng, shape) -> np.ndarray:
    return rng.normal(shape)


# ---------------------------------------------------------------- param bundles

@dataclass
class ParamBundle:
    """Named float64 parameters with gradient accumulators of identical shape."""

    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.params = {k: as_tensor(v) for k, v in self.params.items()}
        for k, g in self.grads.items():
            if g.shape != self.params[k].shape:
                raise ValueError(f"gradient shape mismatch for {k}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def accumulate(self, grads: Mapping[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k}")
            if g.shape != self.params[k].shape:
                raise ValueError(f"gradient shape mismatch for {k}: {g.shape} vs {self.params[k].shape}")
            if k in self.grads:
                self.grads[k] = self.grads[k] + g
            else:
                self.grads[k] = np.array(g, dtype=np.float64)

    def copy(self) -> "ParamBundle":
        return ParamBundle({k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.grads.items()})

    def flat(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = self.names() if names is None else list(names)
        return np.concatenate([self.params[k].ravel() for k in names])

    def size(self) -> int:
        return sum(v.size for v in self.params.values())


# ------------------------------------------------------------------------ adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    eps: float = ADAM_EPS

    @classmethod
    def for_bundle(cls, bundle: ParamBundle, names: Iterable[str] | None = None, **kw) -> "AdamState":
        names = bundle.names() if names is None else list(names)
        return cls(m={k: np.zeros_like(bundle[k]) for k in names},
                   v={k: np.zeros_like(bundle[k]) for k in names}, **kw)


def adam_step(params: ParamBundle, state: AdamState, lr: float) -> ParamBundle:
    """One bias-corrected Adam update over every parameter tracked by ``state``.

    Updates ``params`` in place, increments the step counter and zeroes the
    consumed gradients.
    """
    for k in state.m:
        if k not in params.grads:
            raise KeyError(f"missing gradient for parameter {k}")
        check_finite(params.grads[k], f"gradient of {k}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k in state.m:
        g = params.grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params.params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        params.grads[k] = np.zeros_like(g)
    return params


@dataclass
class RowAdam:
    """Adam over the leading-axis rows of one array, each row with its own step count.

    Used for per-trajectory latent codes: only the rows of the current batch
    receive an update, so untouched rows keep their moments and step counters.
    """

    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, arr: np.ndarray) -> "RowAdam":
        return cls(np.zeros_like(arr), np.zeros_like(arr), np.zeros(arr.shape[0], dtype=np.int64))

    def step(self, arr: np.ndarray, rows: np.ndarray, grad: np.ndarray, lr: float) -> None:
        check_finite(grad, "latent gradient")
        rows = np.asarray(rows)
        self.steps[rows] += 1
        t = self.steps[rows].reshape((-1,) + (1,) * (arr.ndim - 1)).astype(np.float64)
        m = self.m[rows] * self.beta1 + (1.0 - self.beta1) * grad
        v = self.v[rows] * self.beta2 + (1.0 - self.beta2) * grad * grad
        self.m[rows] = m
        self.v[rows] = v
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        arr[rows] -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ------------------------------------------------------- finite differences

def finite_diff_grad(f: Callable[[ParamBundle], float], params: ParamBundle,
                     eps: float = 1e-6, names: Iterable[str] | None = None) -> ParamBundle:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = params.names() if names is None else list(names)
    work = params.copy()
    out = {}
    for k in names:
        p = work.params[k]
        g = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            old = flat_p[i]
            flat_p[i] = old + eps
            fp = f(work)
            flat_p[i] = old - eps
            fm = f(work)
            flat_p[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"objective non-finite while perturbing {k}[{i}]")
            flat_g[i] = (fp - fm) / (2.0 * eps)
        out[k] = g
    return ParamBundle({k: params[k].copy() for k in names}, out)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """max |a-b| / max(|a|, |b|, floor), the norm used by every gradient check."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
