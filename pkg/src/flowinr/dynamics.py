"""Latent vector field (Swish MLP), RK4 unrolls with exact discrete backprop, auto-decoding.

Batches are leading axes: latents [B x d], trajectories [B x T x d].
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .decoder import DecoderParams, affine_map, decode, decode_backward
from .numerics import ADAM_BETAS, ADAM_EPS, NonFiniteError, ParamBundle, Rng, check_finite


class DivergenceError(NonFiniteError):
    def __init__(self, time: float):
        super().__init__(f"latent unroll diverged at t={time:.6g}")
        self.time = time


@dataclass
class DynamicsParams:
    bundle: ParamBundle
    dim: int
    hidden: int
    layers: int

    def with_bundle(self, bundle: ParamBundle) -> "DynamicsParams":
        return replace(self, bundle=bundle)


def dynamics_init(dim: int, hidden: int, layers: int, rng: Rng) -> DynamicsParams:
    """MLP dim -> hidden -> ... -> dim with ``layers`` linear maps, U(+-1/sqrt(fan_in)) init."""
    if layers < 1:
        raise ValueError("need at least one layer")
    sizes = [dim] + [hidden] * (layers - 1) + [dim]
    params = {}
    for i in range(layers):
        bound = 1.0 / np.sqrt(sizes[i])
        params[f"W{i}"] = rng.uniform(-bound, bound, (sizes[i + 1], sizes[i]))
        params[f"b{i}"] = rng.uniform(-bound, bound, (sizes[i + 1],))
    return DynamicsParams(ParamBundle(params), dim, hidden, layers)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _forward(psi: DynamicsParams, a: np.ndarray):
    P = psi.bundle.params
    cache = []
    x = a
    for i in range(psi.layers):
        pre = x @ P[f"W{i}"].T + P[f"b{i}"]
        cache.append((x, pre))
        x = pre * _sigmoid(pre) if i < psi.layers - 1 else pre
    return x, cache


def _vjp(psi: DynamicsParams, cache, g: np.ndarray, grads: dict) -> np.ndarray:
    P = psi.bundle.params
    for i in range(psi.layers - 1, -1, -1):
        x, pre = cache[i]
        if i < psi.layers - 1:
            s = _sigmoid(pre)
            g = g * s * (1.0 + pre * (1.0 - s))
        grads[f"W{i}"] += g.T @ x
        grads[f"b{i}"] += g.sum(axis=0)
        g = g @ P[f"W{i}"]
    return g


def f_eval(psi: DynamicsParams, alpha: np.ndarray) -> np.ndarray:
    return _forward(psi, np.asarray(alpha, dtype=np.float64))[0]


def f_backward(psi: DynamicsParams, alpha: np.ndarray, upstream: np.ndarray):
    """(parameter grads, d/d alpha) of sum(upstream * f(alpha))."""
    _, cache = _forward(psi, np.atleast_2d(alpha))
    grads = {k: np.zeros_like(v) for k, v in psi.bundle.params.items()}
    g = _vjp(psi, cache, np.atleast_2d(upstream), grads)
    return grads, g.reshape(np.shape(alpha))


@dataclass
class Tape:
    steps: list          # per output interval: list of (h, [cache1..cache4]) substeps
    reset_mask: np.ndarray | None
    shape: tuple


def _rk4_step(field, y, h):
    k1, c1 = field(y)
    k2, c2 = field(y + 0.5 * h * k1)
    k3, c3 = field(y + 0.5 * h * k2)
    k4, c4 = field(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), (c1, c2, c3, c4)


def rk4_solve(f, y0: np.ndarray, t1: float, steps: int) -> np.ndarray:
    """Integrate dy/dt = f(y) from 0 to ``t1`` in ``steps`` equal RK4 steps (same stepper as the unroll)."""
    y = np.asarray(y0, dtype=np.float64)
    h = t1 / steps
    for _ in range(steps):
        y, _ = _rk4_step(lambda z: (f(z), None), y, h)
    return y


def rk4_unroll(psi: DynamicsParams, alpha0: np.ndarray, times: np.ndarray, substeps: int = 1,
               resets: np.ndarray | None = None, reset_mask: np.ndarray | None = None,
               record: bool = False):
    """Classical RK4 with step (t_{i+1} - t_i) / substeps between consecutive output times.

    Returns the trajectory [B x T x d] (or [T x d] for a single latent) and,
    if ``record``, the tape needed by :func:`rk4_unroll_backward`. Where
    ``reset_mask[b, i]`` is set, the state is replaced by ``resets[b, i]``
    after output time i has been recorded (teacher forcing).
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    a = np.asarray(alpha0, dtype=np.float64)
    single = a.ndim == 1
    y = np.atleast_2d(a).copy()
    times = np.asarray(times, dtype=np.float64)
    B, d = y.shape
    traj = np.empty((B, len(times), d))
    traj[:, 0] = y
    if reset_mask is not None and reset_mask[:, 0].any():
        y = np.where(reset_mask[:, 0:1], resets[:, 0], y)
    field = lambda z: _forward(psi, z)  # noqa: E731
    tape = []
    for i in range(1, len(times)):
        h = (times[i] - times[i - 1]) / substeps
        interval = []
        for _ in range(substeps):
            y, caches = _rk4_step(field, y, h)
            if record:
                interval.append((h, caches))
        if not np.all(np.isfinite(y)):
            raise DivergenceError(float(times[i]))
        traj[:, i] = y
        if reset_mask is not None and reset_mask[:, i].any():
            y = np.where(reset_mask[:, i:i + 1], resets[:, i], y)
        tape.append(interval)
    out = traj[0] if single else traj
    if record:
        return out, Tape(tape, reset_mask, traj.shape)
    return out


def rk4_unroll_backward(psi: DynamicsParams, tape: Tape, upstream: np.ndarray):
    """Exact gradients of sum(upstream * unroll) w.r.t. psi and alpha0 (discretise-then-optimise)."""
    g_traj = np.asarray(upstream, dtype=np.float64)
    if g_traj.ndim == 2:
        g_traj = g_traj[None]
    check_finite(g_traj, "upstream gradient")
    grads = {k: np.zeros_like(v) for k, v in psi.bundle.params.items()}
    mask = tape.reset_mask
    T = g_traj.shape[1]
    g = np.zeros_like(g_traj[:, 0])
    for i in range(T - 1, 0, -1):
        if mask is not None:
            g = np.where(mask[:, i:i + 1], 0.0, g)
        g = g + g_traj[:, i]
        for h, (c1, c2, c3, c4) in reversed(tape.steps[i - 1]):
            gk4 = (h / 6.0) * g
            gk3 = (h / 3.0) * g
            gk2 = (h / 3.0) * g
            gk1 = (h / 6.0) * g
            gy4 = _vjp(psi, c4, gk4, grads)
            g = g + gy4
            gk3 = gk3 + h * gy4
            gy3 = _vjp(psi, c3, gk3, grads)
            g = g + gy3
            gk2 = gk2 + 0.5 * h * gy3
            gy2 = _vjp(psi, c2, gk2, grads)
            g = g + gy2
            gk1 = gk1 + 0.5 * h * gy2
            g = g + _vjp(psi, c1, gk1, grads)
    if mask is not None:
        g = np.where(mask[:, 0:1], 0.0, g)
    g = g + g_traj[:, 0]
    return grads, g


def scheduled_sampling_mask(epoch: int, tau: float, rng: Rng, n_times: int, batch: int | None = None) -> np.ndarray:
    """Teacher-forcing restarts: interior times flagged i.i.d. with probability exp(-epoch / tau).

    Index 0 (the encoded start) and the last index (nothing follows it) are
    never flagged.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    p = float(np.exp(-epoch / tau))
    shape = (n_times,) if batch is None else (batch, n_times)
    mask = rng.generator.random(size=shape) < p
    mask[..., 0] = False
    mask[..., -1] = False
    return mask


# ------------------------------------------------------------------- encoding

@dataclass
class EncodeResult:
    alpha: np.ndarray
    loss: np.ndarray
    steps: int


def encode(dec: DecoderParams, values: np.ndarray, points: np.ndarray, steps: int = 2000, lr: float = 1e-1,
           decay: float = 0.5, patience: int = 30, tol: float = 1e-9, min_lr: float = 1e-6,
           alpha0: np.ndarray | None = None) -> EncodeResult:
    """Auto-decoding: Adam on alpha (from 0) for mean_x ||g(alpha)(x) - v(x)||^2 with the decoder frozen.

    The norm runs over channels, the mean over points.

    ``values`` is [N x n] or a batch [B x N x n] observed at ``points``. Each
    item keeps its own learning rate (halved after ``patience`` steps without
    improving its best loss by more than ``tol``) and stops once its rate
    falls below ``min_lr``. Returns the final latents and their losses.
    """
    v = np.asarray(values, dtype=np.float64)
    single = v.ndim == 2
    v = np.atleast_3d(v) if not single else v[None]
    B, N, n = v.shape
    if n != dec.channels:
        raise ValueError(f"field has {n} channels, decoder has {dec.channels}")
    alpha = np.zeros((B, dec.latent_dim)) if alpha0 is None else np.array(np.atleast_2d(alpha0), dtype=np.float64)
    maps = affine_map(dec, points) if dec.separable else None
    b1, b2 = ADAM_BETAS
    m = np.zeros_like(alpha)
    s = np.zeros_like(alpha)
    rates = np.full(B, float(lr))
    best = np.full(B, np.inf)
    since = np.zeros(B, dtype=int)
    active = np.ones(B, dtype=bool)
    scale = 1.0 / N

    def loss_grad(a):
        if maps is not None:
            d = dec.chunk
            pred = np.stack([mp.beta[None] + a[:, c * d:(c + 1) * d] @ mp.A.T for c, mp in enumerate(maps)], -1)
            r = pred - v
            g = np.concatenate([2 * scale * r[..., c] @ mp.A for c, mp in enumerate(maps)], axis=1)
        else:
            r = decode(dec, a, points) - v
            _, g = decode_backward(dec, a, points, 2 * scale * r)
        return scale * np.sum(r * r, axis=(1, 2)), g

    loss, g = loss_grad(alpha)
    if not np.all(np.isfinite(loss)):
        raise NonFiniteError("non-finite encoding loss")
    t = 0
    for t in range(1, steps + 1):
        m[active] = b1 * m[active] + (1 - b1) * g[active]
        s[active] = b2 * s[active] + (1 - b2) * g[active] ** 2
        mh = m / (1 - b1 ** t)
        sh = s / (1 - b2 ** t)
        upd = rates[:, None] * mh / (np.sqrt(sh) + ADAM_EPS)
        alpha[active] -= upd[active]
        loss, g = loss_grad(alpha)
        if not np.all(np.isfinite(loss)):
            raise NonFiniteError("non-finite encoding loss")
        improved = loss < best - tol
        best = np.where(improved, loss, best)
        since = np.where(improved, 0, since + 1)
        plateau = active & (since > patience)
        rates[plateau] *= decay
        since[plateau] = 0
        active &= rates >= min_lr
        if not active.any():
            break
    return EncodeResult(alpha[0] if single else alpha, loss[0] if single else loss, t)
