import csv
import json

import numpy as np
import pytest

from flowinr import config
from flowinr.cli import main
from flowinr.container import read_container
from flowinr.pde_data import load_dataset

EPOCHS = 3


@pytest.fixture(scope="module")
def wave_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("wave")
    assert main(["generate", "--pde", "wave", "--preset", "desk", "--out", str(out), "--seed", "7",
                 "--time-refine", "10", "--resolutions", "16"]) == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(wave_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(wave_dir), "--preset", "desk", "--out", str(out),
                 "--epochs", str(EPOCHS), "--quiet"]) == 0
    return out


# ---------------------------------------------------------------- generate

def test_generate_is_reproducible(wave_dir, tmp_path):
    assert main(["generate", "--pde", "wave", "--preset", "desk", "--out", str(tmp_path), "--seed", "7",
                 "--time-refine", "10", "--resolutions", "16"]) == 0
    for name in ("train.finr", "test.finr", "test_fine10.finr", "test_r16.finr"):
        assert (tmp_path / name).read_bytes() == (wave_dir / name).read_bytes(), name


def test_generate_refuses_to_overwrite(tmp_path):
    args = ["generate", "--pde", "wave", "--preset", "desk", "--out", str(tmp_path)]
    assert main(args) == 0
    before = (tmp_path / "train.finr").read_bytes()
    assert main(args + ["--seed", "1"]) == 3
    assert (tmp_path / "train.finr").read_bytes() == before
    assert main(args + ["--seed", "1", "--force"]) == 0
    assert (tmp_path / "train.finr").read_bytes() != before


def test_desk_wave_layout(wave_dir):
    train = load_dataset(wave_dir / "train.finr")
    test = load_dataset(wave_dir / "test.finr")
    assert train.values.shape == (64, 20, 32 * 32, 2)
    assert test.values.shape == (8, 20, 32 * 32, 2)
    fine = load_dataset(wave_dir / "test_fine10.finr")
    assert len(fine.time_grid) == 191
    np.testing.assert_allclose(fine.time_grid.times[::10], test.time_grid.times, atol=1e-12)
    np.testing.assert_allclose(fine.values[:, ::10], test.values, rtol=0, atol=1e-12)
    assert load_dataset(wave_dir / "test_r16.finr").values.shape == (8, 20, 256, 2)


def test_paper_wave_preset(tmp_path):
    cfg = config.resolve(pde="wave", preset="paper")
    assert (cfg.data.n_train, cfg.data.n_test, cfg.data.resolution) == (512, 32, 64)
    assert (cfg.data.dt, cfg.data.horizon, cfg.data.train_horizon) == (0.25, 4.75, 2.25)
    # the full 544 trajectories are 0.7 GB; check the layout on a shrunken count
    (tmp_path / "small.json").write_text(json.dumps({"data": {"n_train": 2, "n_test": 1}}))
    assert main(["generate", "--pde", "wave", "--preset", "paper", "--out", str(tmp_path / "d"),
                 "--config", str(tmp_path / "small.json")]) == 0
    ds = load_dataset(tmp_path / "d" / "train.finr")
    assert ds.values.shape == (2, 20, 64 * 64, 2)
    np.testing.assert_allclose(np.diff(ds.time_grid.times), 0.25, atol=1e-12)
    assert ds.time_grid.times[-1] == pytest.approx(4.75, abs=1e-12)


@pytest.mark.slow
def test_desk_navier_stokes(tmp_path):
    assert main(["generate", "--pde", "navier-stokes", "--preset", "desk", "--out", str(tmp_path)]) == 0
    train = load_dataset(tmp_path / "train.finr")
    test = load_dataset(tmp_path / "test.finr")
    assert train.values.shape[:3] == (64, 40, 32 * 32) and test.values.shape[:3] == (8, 40, 32 * 32)
    assert train.meta["config"]["discard_steps"] == 20
    assert train.meta["config"]["dt"] == 1.0


def test_navier_stokes_paper_preset_values():
    cfg = config.resolve(pde="navier-stokes", preset="paper")
    assert (cfg.decoder.layers, cfg.decoder.hidden, cfg.decoder.freq_scale, cfg.decoder.latent_dim) == (3, 64, 64.0, 100)
    assert (cfg.dynamics.layers, cfg.dynamics.hidden) == (4, 512)
    assert (cfg.training.lr_phi, cfg.training.lr_alpha, cfg.training.lr_psi) == (1e-2, 1e-3, 1e-3)
    assert (cfg.training.epochs, cfg.training.batch_size) == (12000, 64)


def test_unknown_config_key_is_usage_error(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"data": {"colour": "blue"}}))
    assert main(["generate", "--pde", "wave", "--preset", "desk", "--out", str(tmp_path / "o"),
                 "--config", str(tmp_path / "bad.json")]) == 2
    assert not (tmp_path / "o").exists()


def test_bad_preset_is_usage_error(tmp_path):
    assert main(["generate", "--pde", "wave", "--preset", "huge", "--out", str(tmp_path)]) == 2


# ------------------------------------------------------------------- train

def test_train_outputs(trained_dir):
    lines = (trained_dir / "train.log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == list(range(EPOCHS))
    meta = read_container(trained_dir / "checkpoint.finr", kind="checkpoint")[1]
    assert meta["epoch"] == EPOCHS
    echoed = json.loads((trained_dir / "config.json").read_text())
    assert echoed == meta["config"]
    assert echoed["data"]["seed"] == 7 and echoed["decoder"]["latent_dim"] == 32


def test_train_missing_data(tmp_path):
    out = tmp_path / "never"
    assert main(["train", "--data", str(tmp_path / "nope.finr"), "--out", str(out)]) == 3
    assert not out.exists()


def test_train_latent_channel_mismatch(wave_dir, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"decoder": {"latent_dim": 33}}))
    assert main(["train", "--data", str(wave_dir), "--preset", "desk", "--config", str(tmp_path / "c.json"),
                 "--out", str(tmp_path / "o"), "--epochs", "1", "--quiet"]) == 2


def test_train_config_disagreeing_with_data(wave_dir, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"data": {"resolution": 64}}))
    assert main(["train", "--data", str(wave_dir), "--config", str(tmp_path / "c.json"),
                 "--out", str(tmp_path / "o"), "--epochs", "1", "--quiet"]) == 2


def test_resume_equals_uninterrupted(wave_dir, trained_dir, tmp_path):
    a = tmp_path / "a"
    assert main(["train", "--data", str(wave_dir), "--preset", "desk", "--out", str(a),
                 "--epochs", str(EPOCHS), "--until", "1", "--quiet"]) == 0
    assert read_container(a / "checkpoint.finr", kind="checkpoint")[1]["epoch"] == 1
    assert main(["train", "--data", str(wave_dir), "--preset", "desk", "--out", str(a),
                 "--resume", str(a / "checkpoint.finr"), "--epochs", str(EPOCHS), "--quiet"]) == 0
    ra, ma = read_container(a / "checkpoint.finr", kind="checkpoint")
    rb, mb = read_container(trained_dir / "checkpoint.finr", kind="checkpoint")
    assert ra.keys() == rb.keys()
    for k in ra:
        assert np.array_equal(ra[k], rb[k]), k
    assert ma["history"] == mb["history"] and ma["rng"] == mb["rng"]


def test_resume_with_other_architecture(wave_dir, trained_dir, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"decoder": {"hidden": 32}}))
    assert main(["train", "--data", str(wave_dir), "--preset", "desk", "--config", str(tmp_path / "c.json"),
                 "--out", str(tmp_path / "o"), "--resume", str(trained_dir / "checkpoint.finr"), "--quiet"]) == 2


def test_workers_from_environment(wave_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWINR_WORKERS", "2")
    assert main(["train", "--data", str(wave_dir), "--preset", "desk", "--out", str(tmp_path),
                 "--epochs", "1", "--quiet"]) == 0
    assert read_container(tmp_path / "checkpoint.finr", kind="checkpoint")[1]["workers"] == 2
    monkeypatch.setenv("FLOWINR_WORKERS", "many")
    assert main(["train", "--data", str(wave_dir), "--out", str(tmp_path / "x"), "--quiet"]) == 2


# ---------------------------------------------------------------- evaluate

def test_evaluate_extrapolation(wave_dir, trained_dir, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", "--ckpt", str(trained_dir / "checkpoint.finr"), "--data", str(wave_dir),
                 "--tasks", "extrapolation,s=100", "--out", str(out)]) == 0
    with open(out / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    keys = {(r["dataset_split"], r["split_time"]) for r in rows}
    assert keys == {(s, t) for s in ("train", "test") for t in ("In-t", "Out-t")}
    assert all(r["split_space"] != "Out-s" for r in rows)
    doc = json.loads((out / "report.json").read_text())
    assert doc["config"]["data"]["seed"] == 7
    for name in ("mse_curves.png", "snapshots.png", "truth_last.pgm", "pred_last.pgm"):
        assert (out / name).stat().st_size > 0, name


def test_evaluate_finer_time(wave_dir, trained_dir, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", "--ckpt", str(trained_dir / "checkpoint.finr"), "--data", str(wave_dir),
                 "--tasks", "finer-time", "--out", str(out)]) == 0
    tasks = {r["task"] for r in csv.DictReader(open(out / "report.csv"))}
    assert tasks == {"finer-time/ode", "finer-time/linear", "finer-time/quadratic"}


def test_evaluate_skips_missing_cells(wave_dir, trained_dir, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", "--ckpt", str(trained_dir / "checkpoint.finr"), "--data", str(wave_dir / "test.finr"),
                 "--tasks", "finer-time,cross-resolution,r=256", "--out", str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert [c["status"] for c in doc["cells"]] == ["skipped", "skipped"]


@pytest.mark.parametrize("tasks", ["", " , ", "teleport"])
def test_evaluate_bad_task_spec(trained_dir, wave_dir, tmp_path, tasks):
    assert main(["evaluate", "--ckpt", str(trained_dir / "checkpoint.finr"), "--data", str(wave_dir),
                 "--tasks", tasks, "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_evaluate_missing_checkpoint(wave_dir, tmp_path):
    assert main(["evaluate", "--ckpt", str(tmp_path / "none.finr"), "--data", str(wave_dir),
                 "--tasks", "extrapolation", "--out", str(tmp_path / "o")]) == 3


def test_no_command_is_usage_error():
    assert main([]) == 2


# ---------------------------------------------------------------- selftest

def test_selftest_passes():
    assert main(["selftest", "--configs", "10"]) == 0


def test_selftest_detects_corrupted_gradient():
    assert main(["selftest", "--configs", "3", "--corrupt-gradient"]) == 1
