"""Alternating optimisation of latents, decoder and dynamics, with plateau decay and checkpoints.

Per batch of trajectories, three updates run in order:

1. one Adam step on the batch's latents alpha (reconstruction loss),
2. one Adam step on the decoder parameters with the updated latents,
3. one Adam step on the dynamics MLP against the latents held constant.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import RunConfig
from .container import ContainerError, read_container, write_container
from .decoder import (DecoderParams, _affine_backward, _affine_decode, affine_map, decode,
                      decode_backward, decoder_init, from_arrays, to_arrays)
from .dynamics import DynamicsParams, dynamics_init, rk4_unroll, rk4_unroll_backward, scheduled_sampling_mask
from .geometry import Grid
from .numerics import AdamState, NonFiniteError, ParamBundle, RowAdam, Rng, adam_step
from .pde_data import BOX, Dataset, observation_grid

CHECKPOINT_VERSION = 1


class CheckpointMismatch(ValueError):
    """Checkpoint incompatible with the requested config or data."""


# ---------------------------------------------------------------------- losses

def loss_dec(dec: DecoderParams, alpha: np.ndarray, values: np.ndarray, points: np.ndarray,
             want_phi: bool = True, maps=None):
    """Squared error summed over channels, averaged over (trajectory, time, point).

    ``alpha`` is [B x T x d], ``values`` [B x T x N x n]. Returns (loss,
    decoder grads or None, alpha grads [B x T x d]).
    """
    B, T, d = alpha.shape
    flat = alpha.reshape(B * T, d)
    target = values.reshape(B * T, values.shape[2], values.shape[3])
    if dec.separable:
        maps = maps or affine_map(dec, points, exact=False)
        pred = _affine_decode(dec, flat, points, maps, exact=False)
    else:
        pred = decode(dec, flat, points)
    r = pred - target
    count = r.shape[0] * r.shape[1]  # snapshots x points; channels are summed
    loss = float(np.sum(r * r) / count)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite reconstruction loss")
    up = (2.0 / count) * r
    if dec.separable:
        if want_phi:
            grads, ga = _affine_backward(dec, flat, points, up, maps)
        else:
            grads = None
            k = dec.chunk
            ga = np.concatenate([up[..., c] @ m.A for c, m in enumerate(maps)], axis=1)
            ga = ga.reshape(B * T, k * dec.channels)
    else:
        grads, ga = decode_backward(dec, flat, points, up)
        grads = grads if want_phi else None
    return loss, grads, ga.reshape(B, T, d)


def loss_dyn(psi: DynamicsParams, alpha: np.ndarray, times: np.ndarray, mask: np.ndarray | None = None,
             substeps: int = 1):
    """mean over (trajectory, time) of ||alpha_t - unroll(alpha_0)_t||^2, latents held constant.

    Where ``mask`` flags a time the unroll restarts from the given latent.
    Returns (loss, dynamics grads); nothing flows back into ``alpha``.
    """
    alpha = np.array(alpha, dtype=np.float64, copy=True)
    B, T, _ = alpha.shape
    pred, tape = rk4_unroll(psi, alpha[:, 0], times, substeps, resets=alpha, reset_mask=mask, record=True)
    r = pred - alpha
    loss = float(np.sum(r * r) / (B * T))
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite dynamics loss")
    grads, _ = rk4_unroll_backward(psi, tape, 2.0 * r / (B * T))
    return loss, grads


# ---------------------------------------------------------------------- state

@dataclass
class Plateau:
    best: float = float("inf")
    bad: int = 0


@dataclass
class TrainData:
    values: np.ndarray          # [D x T x N_obs x n]
    points: np.ndarray          # [N_obs x p]
    times: np.ndarray           # [T]
    obs_mask: np.ndarray        # indices into the dataset grid


def prepare_data(ds: Dataset, cfg: RunConfig) -> TrainData:
    grid = observation_grid(ds, cfg.data.obs_ratio, cfg.data.seed)
    mask = grid.provenance.mask
    in_t = ds.time_grid.in_t
    return TrainData(ds.values[:, in_t][:, :, mask], grid.points, ds.time_grid.times[in_t], mask)


@dataclass
class TrainState:
    config: RunConfig
    dec: DecoderParams
    psi: DynamicsParams
    alpha: np.ndarray
    opt_phi: AdamState
    opt_psi: AdamState
    opt_alpha: RowAdam
    rng: Rng
    lrs: dict
    epoch: int = 0
    history: list = field(default_factory=list)
    plateaus: dict = field(default_factory=lambda: {"dec": Plateau(), "dyn": Plateau()})
    obs_mask: np.ndarray | None = None
    workers: int = 1


def init_state(cfg: RunConfig, n_traj: int, n_times: int, channels: int, obs_mask=None,
               domain=BOX, workers: int = 1) -> TrainState:
    seed = cfg.training.seed
    dc = cfg.decoder
    dec = decoder_init(dc.latent_dim, channels, dc.layers, dc.hidden, dc.freq_scale, Rng(seed, (1,)),
                       domain, separable=dc.separable)
    psi = dynamics_init(dc.latent_dim, cfg.dynamics.hidden, cfg.dynamics.layers, Rng(seed, (2,)))
    alpha = np.zeros((n_traj, n_times, dc.latent_dim))
    t = cfg.training
    return TrainState(cfg, dec, psi, alpha, AdamState.for_bundle(dec.bundle), AdamState.for_bundle(psi.bundle),
                      RowAdam.zeros_like(alpha), Rng(seed, (3,)),
                      {"phi": t.lr_phi, "alpha": t.lr_alpha, "psi": t.lr_psi}, obs_mask=obs_mask, workers=workers)


def _update_plateau(state: TrainState, key: str, lr_keys: tuple[str, ...]) -> None:
    t = state.config.training
    col = "l_dec" if key == "dec" else "l_dyn"
    recent = [h[col] for h in state.history[-t.plateau_window:] if h[col] is not None]
    if not recent:
        return
    metric = float(np.mean(recent))
    pl = state.plateaus[key]
    if metric < pl.best * (1.0 - t.plateau_threshold):
        pl.best = metric
        pl.bad = 0
    else:
        pl.bad += 1
    if pl.bad > t.plateau_patience:
        for k in lr_keys:
            state.lrs[k] = max(state.lrs[k] * t.plateau_factor, min(state.lrs[k], t.plateau_min_lr))
        pl.bad = 0


def train_epoch(state: TrainState, data: TrainData) -> TrainState:
    t = state.config.training
    D = data.values.shape[0]
    bs = min(t.batch_size, D)
    perm = state.rng.generator.permutation(D)
    stage_dec = not t.two_stage or state.epoch < t.epochs // 2
    stage_dyn = (not t.two_stage or state.epoch >= t.epochs // 2) and state.epoch >= t.dyn_warmup_epochs
    sums = {"dec": 0.0, "dyn": 0.0}
    for start in range(0, D, bs):
        rows = np.sort(perm[start:start + bs])
        vals = data.values[rows]
        mask = scheduled_sampling_mask(state.epoch, t.tau, state.rng, len(data.times), batch=len(rows))
        if stage_dec:
            maps = affine_map(state.dec, data.points, exact=False) if state.dec.separable else None
            l0, _, ga = loss_dec(state.dec, state.alpha[rows], vals, data.points, want_phi=False, maps=maps)
            state.opt_alpha.step(state.alpha, rows, ga, state.lrs["alpha"])
            _, gphi, _ = loss_dec(state.dec, state.alpha[rows], vals, data.points, maps=maps)
            state.dec.bundle.grads = gphi
            adam_step(state.dec.bundle, state.opt_phi, state.lrs["phi"])
        else:
            l0, _, _ = loss_dec(state.dec, state.alpha[rows], vals, data.points, want_phi=False)
        sums["dec"] += l0 * len(rows)
        if stage_dyn:
            l1, gpsi = loss_dyn(state.psi, state.alpha[rows], data.times, mask, state.config.dynamics.substeps)
            state.psi.bundle.grads = gpsi
            adam_step(state.psi.bundle, state.opt_psi, state.lrs["psi"])
            sums["dyn"] += l1 * len(rows)
    rec = {"epoch": state.epoch, "l_dec": sums["dec"] / D, "l_dyn": sums["dyn"] / D if stage_dyn else None,
           "lrs": dict(state.lrs)}
    state.history.append(rec)
    _update_plateau(state, "dec", ("phi", "alpha"))
    if stage_dyn and state.config.training.decay_psi:
        _update_plateau(state, "dyn", ("psi",))
    state.epoch += 1
    return state


def fit(state: TrainState, data: TrainData, epochs: int | None = None, log=None,
        checkpoint=None, checkpoint_every: int | None = None) -> TrainState:
    """Run epochs until ``epochs`` (default: config) have been completed overall."""
    total = state.config.training.epochs if epochs is None else epochs
    every = checkpoint_every or state.config.training.checkpoint_every
    while state.epoch < total:
        train_epoch(state, data)
        if log is not None:
            log(state.history[-1])
        if checkpoint is not None and (state.epoch % every == 0 or state.epoch == total):
            checkpoint(state)
    return state


# ----------------------------------------------------------------- checkpoints

def save_checkpoint(state: TrainState, path, extra: dict | None = None) -> None:
    arrays, dec_meta = to_arrays(state.dec)
    for k, v in state.psi.bundle.params.items():
        arrays["psi/" + k] = v
    arrays["alpha"] = state.alpha
    for name, opt in (("phi", state.opt_phi), ("psi", state.opt_psi)):
        for k in opt.m:
            arrays[f"opt/{name}/m/{k}"] = opt.m[k]
            arrays[f"opt/{name}/v/{k}"] = opt.v[k]
    arrays["opt/alpha/m"] = state.opt_alpha.m
    arrays["opt/alpha/v"] = state.opt_alpha.v
    arrays["opt/alpha/steps"] = state.opt_alpha.steps
    if state.obs_mask is not None:
        arrays["obs_mask"] = state.obs_mask
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "decoder": dec_meta,
        "dynamics": {"dim": state.psi.dim, "hidden": state.psi.hidden, "layers": state.psi.layers,
                     "names": state.psi.bundle.names()},
        "epoch": state.epoch,
        "lrs": state.lrs,
        "history": state.history,
        "rng": {"seed": state.rng.seed, "stream": list(state.rng.stream), "state": state.rng.get_state()},
        "opt_steps": {"phi": state.opt_phi.step, "psi": state.opt_psi.step},
        "plateaus": {k: {"best": p.best if np.isfinite(p.best) else None, "bad": p.bad}
                     for k, p in state.plateaus.items()},
        "workers": state.workers,
        "extra": extra or {},
    }
    write_container(path, "checkpoint", arrays, meta)


def load_checkpoint(path, expect: RunConfig | None = None) -> TrainState:
    arrays, meta = read_container(path, kind="checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ContainerError(f"checkpoint version {meta.get('version')} not supported")
    cfg = cfgmod.from_dict(meta["config"])
    if expect is not None:
        _check_compatible(cfg, expect)
    dec = from_arrays(arrays, meta["decoder"])
    dm = meta["dynamics"]
    psi = DynamicsParams(ParamBundle({k: arrays["psi/" + k] for k in dm["names"]}), dm["dim"], dm["hidden"],
                         dm["layers"])
    opt_phi = AdamState({k: arrays[f"opt/phi/m/{k}"] for k in dec.bundle.names()},
                        {k: arrays[f"opt/phi/v/{k}"] for k in dec.bundle.names()}, meta["opt_steps"]["phi"])
    opt_psi = AdamState({k: arrays[f"opt/psi/m/{k}"] for k in psi.bundle.names()},
                        {k: arrays[f"opt/psi/v/{k}"] for k in psi.bundle.names()}, meta["opt_steps"]["psi"])
    opt_alpha = RowAdam(arrays["opt/alpha/m"], arrays["opt/alpha/v"], arrays["opt/alpha/steps"])
    r = meta["rng"]
    rng = Rng(r["seed"], tuple(r["stream"]))
    rng.set_state(r["state"])
    plateaus = {k: Plateau(float("inf") if v["best"] is None else v["best"], v["bad"])
                for k, v in meta["plateaus"].items()}
    state = TrainState(expect if expect is not None else cfg, dec, psi, arrays["alpha"], opt_phi, opt_psi,
                       opt_alpha, rng, dict(meta["lrs"]), meta["epoch"], list(meta["history"]), plateaus,
                       arrays.get("obs_mask"), meta.get("workers", 1))
    return state


def _check_compatible(have: RunConfig, want: RunConfig) -> None:
    pairs = [("decoder", have.decoder, want.decoder), ("dynamics", have.dynamics, want.dynamics)]
    for name, a, b in pairs:
        if a != b:
            raise CheckpointMismatch(f"{name} section differs: checkpoint {a} vs requested {b}")
    if have.data.pde != want.data.pde or have.data.obs_ratio != want.data.obs_ratio:
        raise CheckpointMismatch("checkpoint was trained on different data")


def checkpoint_info(path) -> dict:
    _, meta = read_container(path, kind="checkpoint")
    return meta
