import dataclasses

import numpy as np
import pytest

from flowinr import config
from flowinr.container import ContainerError
from flowinr.geometry import TimeGrid, uniform_grid
from flowinr.numerics import Rng
from flowinr.pde_data import (BOX, CFLError, Dataset, dataset_generate, gaussian_bump, grf_amplitude, load_dataset,
                              ns_initial_condition, ns_solve, diagonal_forcing, save_dataset, spectral_downsample,
                              wave_energy, wave_initial_condition, wave_solve)

G32 = uniform_grid(BOX, 32)
G64 = uniform_grid(BOX, 64)
TG = TimeGrid.regular(0.25, 2.25, 4.75)


def test_gaussian_bump_examples():
    g = uniform_grid(BOX, 8)
    b = g.points[10]
    u = gaussian_bump(g, 2.0, b, 0.25)
    assert u[10] == 2.0
    # a lattice point 0.25 away from b along the first axis
    j = 10 + 8
    assert np.linalg.norm(g.points[j] - b) == pytest.approx(0.25)
    assert u[j] == pytest.approx(2 * np.exp(-0.5), rel=1e-15)


def test_wave_initial_condition_ranges_and_zero_velocity():
    for i in range(20):
        v, p = wave_initial_condition(Rng(0, (i,)), G32)
        assert 2 <= p["a"] <= 4 and 0.25 <= p["r"] <= 0.3
        assert all(-1 <= x <= 1 for x in p["b"])
        assert np.sum(v[:, 1]) == 0.0 and np.all(v[:, 1] == 0)
        assert v[:, 0].max() <= p["a"]


def test_wave_zero_stays_zero():
    assert np.all(wave_solve(np.zeros((1024, 2)), G32, TG.times) == 0)


def test_wave_single_mode_closed_form():
    x1 = G32.points[:, 0]
    v0 = np.stack([np.cos(np.pi * x1), np.zeros_like(x1)], -1)
    got = wave_solve(v0, G32, TG.times, 2.0)
    want_u = np.cos(2 * np.pi * TG.times)[:, None] * np.cos(np.pi * x1)
    want_w = -2 * np.pi * np.sin(2 * np.pi * TG.times)[:, None] * np.cos(np.pi * x1)
    assert np.abs(got[..., 0] - want_u).max() <= 1e-10
    assert np.abs(got[..., 1] - want_w).max() <= 1e-10 * 2 * np.pi


def test_wave_energy_conserved():
    v0, _ = wave_initial_condition(Rng(3), G64)
    traj = wave_solve(v0, G64, TG.times)
    e = wave_energy(traj, G64)
    assert np.max(np.abs(e - e[0])) / e[0] <= 1e-10


def test_wave_zero_mode_evolves_linearly():
    v0 = np.stack([np.zeros(1024), np.full(1024, 0.5)], -1)
    traj = wave_solve(v0, G32, TG.times)
    np.testing.assert_allclose(traj[:, 0, 0], 0.5 * TG.times, atol=1e-14)


def test_wave_rejects_bad_speed():
    with pytest.raises(ValueError):
        wave_solve(np.zeros((1024, 2)), G32, TG.times, c=0.0)


def test_grf_mean_zero_and_deterministic():
    a = ns_initial_condition(Rng(1), G32)
    b = ns_initial_condition(Rng(1), G32)
    np.testing.assert_array_equal(a, b)
    assert abs(a.mean()) <= 1e-14


def test_grf_spectrum_matches_amplitude():
    cfg = config.DataConfig()
    draws = np.stack([ns_initial_condition(Rng(2, (i,)), G32, cfg.grf_sigma, cfg.grf_tau, cfg.grf_gamma)[:, 0]
                      for i in range(1000)])
    power = np.mean(np.abs(np.fft.fft2(draws.reshape(-1, 32, 32))) ** 2, axis=0)
    amp = grf_amplitude(G32, cfg.grf_sigma, cfg.grf_tau, cfg.grf_gamma)
    n = np.abs(np.fft.fftfreq(32, 1 / 32))
    shell = np.maximum(n[:, None], n[None, :])
    ratios = []
    for s in (1, 2, 4, 8):
        sel = shell == s
        # mean |w_k| over draws scales with the amplitude; power averaged over a shell of modes
        ratios.append(np.sqrt(power[sel].mean() / (amp[sel] ** 2).mean()))
    ratios = np.array(ratios)
    assert np.all(np.abs(ratios / ratios.mean() - 1) <= 0.05)


def test_ns_single_mode_decay():
    x1 = G64.points[:, 0]
    w0 = np.cos(np.pi * x1)[:, None]
    out = ns_solve(w0, G64, np.array([0.0, 1.0]), 1e-3, None, 1e-2)
    want = np.exp(-1e-3 * np.pi ** 2) * np.cos(np.pi * x1)
    assert np.abs(out[1, :, 0] - want).max() / np.abs(want).max() <= 1e-4


def test_ns_zero_stays_zero():
    assert np.all(ns_solve(np.zeros((1024, 1)), G32, np.arange(3.0), 1e-3, None) == 0)


def test_ns_mean_vorticity_preserved_with_forcing():
    w0 = ns_initial_condition(Rng(4), G32)
    traj = ns_solve(w0, G32, np.arange(6.0), 1e-3, diagonal_forcing(G32.points), 1e-2)
    assert np.abs(traj.mean(axis=(1, 2))).max() <= 1e-10


def test_ns_enstrophy_monotone_without_forcing():
    w0 = ns_initial_condition(Rng(5), G32)
    traj = ns_solve(w0, G32, np.arange(0, 5, 0.25), 1e-2, None, 1e-2)
    ens = np.sum(traj[..., 0] ** 2, axis=1)
    assert np.all(np.diff(ens) <= 0)


def test_ns_step_halving_converges():
    dt = config.DataConfig().internal_dt
    assert dt <= 1e-2
    w0 = ns_initial_condition(Rng(6), G32)
    f = diagonal_forcing(G32.points)
    a = ns_solve(w0, G32, np.arange(4.0), 1e-3, f, dt)
    b = ns_solve(w0, G32, np.arange(4.0), 1e-3, f, dt / 2)
    assert np.abs(a - b).max() / np.abs(b).max() <= 1e-5


def test_ns_cfl_violation_reports_required_step():
    w0 = 50 * ns_initial_condition(Rng(7), G32)
    with pytest.raises(CFLError) as exc:
        ns_solve(w0, G32, np.array([0.0, 1.0]), 1e-3, None, 0.5)
    assert 0 < exc.value.required_dt < 0.5


def test_ns_warmup_discards_leading_interval():
    w0 = ns_initial_condition(Rng(8), G32)
    full = ns_solve(w0, G32, np.arange(5.0), 1e-3, None, 1e-2)
    cut = ns_solve(w0, G32, np.arange(3.0), 1e-3, None, 1e-2, warmup=2.0)
    np.testing.assert_allclose(cut, full[2:], rtol=0, atol=1e-12)


def test_spectral_downsample_keeps_band_limited_fields():
    g8 = uniform_grid(BOX, 8)
    f = lambda p: np.cos(np.pi * p[:, 0]) + np.sin(2 * np.pi * p[:, 1])  # noqa: E731
    fine = f(G32.points)[:, None]
    np.testing.assert_allclose(spectral_downsample(fine, 32, 8)[:, 0], f(g8.points), atol=1e-13)


def test_desk_generation_counts_and_shapes():
    cfg = config.resolve({}, pde="wave", preset="desk")
    (train, test), = dataset_generate(cfg.data).values()
    assert train.values.shape == (64, 20, 1024, 2)
    assert test.values.shape == (8, 20, 1024, 2)
    np.testing.assert_allclose(train.time_grid.times, np.arange(20) * 0.25)
    assert train.time_grid.n_train == 10


def test_paper_presets_counts():
    w = config.resolve({}, pde="wave", preset="paper").data
    assert (w.n_train, w.n_test, w.resolution, w.dt, w.horizon, w.train_horizon) == (512, 32, 64, 0.25, 4.75, 2.25)
    ns = config.resolve({}, pde="navier-stokes", preset="paper").data
    assert (ns.n_train, ns.n_test, ns.dt, ns.train_horizon, ns.horizon, ns.discard_steps) == (512, 32, 1.0, 19, 39, 20)
    assert ns.viscosity == 1e-3


def test_generation_independent_of_workers_and_chunking():
    cfg = dataclasses.replace(config.resolve({}, pde="wave", preset="desk").data, n_train=9, n_test=2)
    a = dataset_generate(cfg, workers=1, chunk=16)[32]
    b = dataset_generate(cfg, workers=2, chunk=4)[32]
    assert a[0].equals(b[0]) and a[1].equals(b[1])


def test_ns_desk_generation_small():
    cfg = dataclasses.replace(config.resolve({}, pde="navier-stokes", preset="desk").data,
                              n_train=2, n_test=1, horizon=3.0, train_horizon=1.0, discard_steps=2)
    (train, test), = dataset_generate(cfg).values()
    assert train.values.shape == (2, 4, 1024, 1)
    assert train.meta["config"]["discard_steps"] == 2


def test_dataset_round_trip_bitwise(tmp_path):
    cfg = dataclasses.replace(config.resolve({}, pde="wave", preset="desk").data, n_train=3, n_test=1)
    (train, _), = dataset_generate(cfg).values()
    save_dataset(train, tmp_path / "d.finr")
    back = load_dataset(tmp_path / "d.finr")
    assert back.equals(train)
    assert back.values.tobytes() == train.values.tobytes()
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "d.finr", channels=1)


def test_dataset_rejects_corruption(tmp_path):
    cfg = dataclasses.replace(config.resolve({}, pde="wave", preset="desk").data, n_train=1, n_test=1)
    (train, _), = dataset_generate(cfg).values()
    p = tmp_path / "d.finr"
    save_dataset(train, p)
    raw = p.read_bytes()
    (tmp_path / "trunc.finr").write_bytes(raw[:-8])
    with pytest.raises(ContainerError):
        load_dataset(tmp_path / "trunc.finr")
    (tmp_path / "magic.finr").write_bytes(b"X" + raw[1:])
    with pytest.raises(ContainerError):
        load_dataset(tmp_path / "magic.finr")


def test_dataset_validates_shapes():
    with pytest.raises(ValueError):
        Dataset(G32, TG, np.zeros((1, 19, 1024, 2)))
    with pytest.raises(ValueError):
        Dataset(G32, TG, np.zeros((1, 20, 1000, 2)))
