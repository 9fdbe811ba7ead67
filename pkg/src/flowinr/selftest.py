"""Fast invariant suite: gradient oracles, RK4 order, spectral support, solver oracles."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .decoder import decode, decode_backward, decoder_init, spectral_support
from .dynamics import dynamics_init, rk4_solve, rk4_unroll, rk4_unroll_backward
from .geometry import TimeGrid, uniform_grid
from .numerics import ParamBundle, Rng, finite_diff_grad, relative_error
from .pde_data import BOX, ns_solve, wave_energy, wave_initial_condition, wave_solve

GRAD_TOL = 1e-5
FD_EPS = 1e-6


@dataclass
class Check:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def decoder_gradient_error(rng: Rng, corrupt: float = 0.0) -> float:
    """Analytic vs central-difference gradients of sum(u * decode) for one random small decoder."""
    g = rng.generator
    channels = int(g.integers(1, 3))
    d_c = int(g.integers(1, 4))
    layers = int(g.integers(2, 5))
    hidden = 2 * int(g.integers(1, 4))
    dec = decoder_init(d_c * channels, channels, layers, hidden, 3.0, rng.spawn(0), BOX,
                       separable=bool(g.integers(0, 2)))
    n = int(g.integers(2, 7))
    pts = g.uniform(-1, 1, (n, 2))
    batch = int(g.integers(1, 3))
    alpha = g.normal(0, 0.5, (batch, dec.latent_dim))
    up = g.normal(size=(batch, n, channels))
    grads, ga = decode_backward(dec, alpha, pts, up)
    if corrupt:
        grads = {k: v * (1 + corrupt) for k, v in grads.items()}
    fd = finite_diff_grad(lambda b: float(np.sum(up * decode(dec.with_bundle(b), alpha, pts))), dec.bundle, FD_EPS)
    fa = finite_diff_grad(lambda b: float(np.sum(up * decode(dec, b["a"], pts))), ParamBundle({"a": alpha}), FD_EPS)
    errs = [relative_error(grads[k], fd.grads[k]) for k in dec.bundle.names()]
    errs.append(relative_error(ga, fa.grads["a"]))
    return max(errs)


def dynamics_gradient_error(rng: Rng, corrupt: float = 0.0) -> float:
    """Same check for sum(u * RK4 unroll) w.r.t. the MLP weights and the initial latent."""
    g = rng.generator
    d = int(g.integers(1, 5))
    psi = dynamics_init(d, int(g.integers(2, 7)), int(g.integers(2, 5)), rng.spawn(0))
    batch = int(g.integers(1, 3))
    T = int(g.integers(2, 5))
    times = np.cumsum(np.r_[0.0, g.uniform(0.1, 0.4, T - 1)])
    sub = int(g.integers(1, 3))
    resets = g.normal(size=(batch, T, d))
    mask = g.random((batch, T)) < 0.3
    a0 = g.normal(size=(batch, d))
    up = g.normal(size=(batch, T, d))
    _, tape = rk4_unroll(psi, a0, times, sub, resets, mask, record=True)
    grads, ga = rk4_unroll_backward(psi, tape, up)
    if corrupt:
        grads = {k: v * (1 + corrupt) for k, v in grads.items()}

    def obj(p, a):
        return float(np.sum(up * rk4_unroll(p, a, times, sub, resets, mask)))

    fd = finite_diff_grad(lambda b: obj(psi.with_bundle(b), a0), psi.bundle, FD_EPS)
    fa = finite_diff_grad(lambda b: obj(psi, b["a"]), ParamBundle({"a": a0}), FD_EPS)
    errs = [relative_error(grads[k], fd.grads[k]) for k in psi.bundle.names()]
    errs.append(relative_error(ga, fa.grads["a"]))
    return max(errs)


def gradient_oracle(n_configs: int = 100, seed: int = 0, corrupt: float = 0.0) -> dict:
    """Max relative error over ``n_configs`` random decoders and as many random unrolls."""
    dec = [decoder_gradient_error(Rng(seed, (0, i)), corrupt) for i in range(n_configs)]
    dyn = [dynamics_gradient_error(Rng(seed, (1, i)), corrupt) for i in range(n_configs)]
    return {"decoder": max(dec), "dynamics": max(dyn), "n_configs": n_configs}


def rk4_order(seed: int = 0, dim: int = 8, t1: float = 1.0, base_steps: int = 4, halvings: int = 4) -> float:
    """Fitted convergence order of RK4 on a random stable linear system against expm."""
    g = Rng(seed, (2,)).generator
    m = g.normal(size=(dim, dim))
    s = g.normal(size=(dim, dim))
    A = -(m @ m.T / dim + 0.1 * np.eye(dim)) + 0.5 * (s - s.T)
    y0 = g.normal(size=dim)
    exact = scipy.linalg.expm(A * t1) @ y0
    steps = [base_steps * 2 ** k for k in range(halvings + 1)]
    errs = [np.abs(rk4_solve(lambda y: A @ y, y0, t1, n) - exact).max() for n in steps]
    return float(np.polyfit(np.log(t1 / np.array(steps)), np.log(errs), 1)[0])


def support_invariance(seed: int = 0, n_alpha: int = 10, separable: bool = True, latent_dim: int = 32,
                       hidden: int = 64, freq_scale: float = 64.0) -> bool:
    """True when every random latent gives the same FFT support on a 1024-sample slice."""
    rng = Rng(seed, (3,))
    dec = decoder_init(latent_dim, 2, 3, hidden, freq_scale, rng.spawn(0), BOX, separable=separable)
    alphas = rng.spawn(1).normal((n_alpha, latent_dim))
    ref = spectral_support(dec, alphas[0], axis=0, n_samples=1024, tol=1e-6, offset=0.3, window="hann")
    return all(spectral_support(dec, a, axis=0, n_samples=1024, tol=1e-6, offset=0.3, window="hann") == ref for a in alphas[1:])


def wave_oracles(resolution: int = 32) -> dict:
    grid = uniform_grid(BOX, resolution)
    tg = TimeGrid.regular(0.25, 2.25, 4.75)
    v0, _ = wave_initial_condition(Rng(0, (4,)), grid)
    traj = wave_solve(v0, grid, tg.times, 2.0)
    e = wave_energy(traj, grid, 2.0)
    drift = float(np.max(np.abs(e - e[0])) / e[0])
    x1 = grid.points[:, 0]
    mode = np.stack([np.cos(np.pi * x1), np.zeros_like(x1)], -1)
    got = wave_solve(mode, grid, tg.times, 2.0)
    want = np.cos(2 * np.pi * tg.times)[:, None] * np.cos(np.pi * x1)[None]
    return {"energy_drift": drift, "mode_error": float(np.abs(got[..., 0] - want).max())}


def ns_oracles(resolution: int = 64, nu: float = 1e-3) -> dict:
    grid = uniform_grid(BOX, resolution)
    x1 = grid.points[:, 0]
    w0 = np.cos(np.pi * x1)[:, None]
    out = ns_solve(w0, grid, np.array([0.0, 1.0]), nu, None, 1e-2)
    want = np.exp(-nu * np.pi ** 2) * w0[:, 0]
    decay = float(np.abs(out[-1, :, 0] - want).max() / np.abs(want).max())
    from .pde_data import ns_initial_condition
    w = ns_initial_condition(Rng(0, (5,)), grid)
    traj = ns_solve(w, grid, np.arange(11) * 0.5, 1e-2, None, 1e-2)
    ens = np.sum(traj[..., 0] ** 2, axis=1)
    return {"decay_error": decay, "enstrophy_monotone": bool(np.all(np.diff(ens) <= 0))}


def run(corrupt_gradient: bool = False, n_configs: int = 20, seed: int = 0, log=print) -> list[Check]:
    """Run every check, printing one PASS/FAIL line per check."""
    corrupt = 1e-3 if corrupt_gradient else 0.0
    checks = []

    def record(name, fn):
        t0 = time.perf_counter()
        ok, detail = fn()
        c = Check(name, bool(ok), detail, time.perf_counter() - t0)
        checks.append(c)
        if log:
            log(f"{'PASS' if c.ok else 'FAIL'}  {c.name:<26} {c.detail}  ({c.seconds:.1f}s)")

    def grads():
        r = gradient_oracle(n_configs, seed, corrupt)
        worst = max(r["decoder"], r["dynamics"])
        return worst <= GRAD_TOL, f"max rel err decoder {r['decoder']:.2e}, dynamics {r['dynamics']:.2e}"

    def order():
        p = rk4_order(seed)
        return abs(p - 4) <= 0.3, f"fitted order {p:.3f}"

    def support():
        sep = support_invariance(seed)
        nosep = support_invariance(seed, separable=False)
        return sep and not nosep, f"separable invariant={sep}, ablation invariant={nosep}"

    def wave():
        r = wave_oracles()
        return r["energy_drift"] <= 1e-10 and r["mode_error"] <= 1e-10, \
            f"energy drift {r['energy_drift']:.1e}, mode error {r['mode_error']:.1e}"

    def ns():
        r = ns_oracles()
        return r["decay_error"] <= 1e-4 and r["enstrophy_monotone"], \
            f"decay error {r['decay_error']:.1e}, enstrophy monotone={r['enstrophy_monotone']}"

    record("gradient oracle", grads)
    record("rk4 order", order)
    record("spectral support", support)
    record("wave solver", wave)
    record("navier-stokes solver", ns)
    return checks
