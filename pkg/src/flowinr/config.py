"""Run configuration: typed sections, shipped presets and strict JSON resolution."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

PDES = ("wave", "navier-stokes")
PRESETS = ("paper", "desk")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    pde: str = "wave"
    resolution: int = 64
    sim_resolution: int | None = None  # simulate finer, then spectrally truncate
    n_train: int = 512
    n_test: int = 32
    seed: int = 0
    dt: float = 0.25
    train_horizon: float = 2.25
    horizon: float = 4.75
    obs_ratio: float = 1.0
    time_refine: int = 1  # >1 samples the same trajectories on a finer time grid
    # wave
    speed: float = 2.0
    amp_range: tuple[float, float] = (2.0, 4.0)
    width_range: tuple[float, float] = (0.25, 0.3)
    # navier-stokes
    viscosity: float = 1e-3
    forcing: str = "paper"
    internal_dt: float = 5e-3
    discard_steps: int = 20
    grf_sigma: float = 7.0 ** 1.5
    grf_tau: float = 7.0
    grf_gamma: float = 2.5


@dataclass(frozen=True)
class DecoderConfig:
    latent_dim: int = 50
    layers: int = 3
    hidden: int = 64
    freq_scale: float = 64.0
    separable: bool = True  # False: frequencies are modulated too (ablation)


@dataclass(frozen=True)
class DynamicsConfig:
    layers: int = 4
    hidden: int = 512
    substeps: int = 1


@dataclass(frozen=True)
class TrainConfig:
    lr_phi: float = 1e-2
    lr_alpha: float = 1e-3
    lr_psi: float = 1e-3
    epochs: int = 12000
    batch_size: int = 64
    ss_tau: float | None = None  # None -> epochs / 6
    plateau_factor: float = 0.5
    plateau_patience: int = 200
    plateau_min_lr: float = 1e-5
    plateau_window: int = 50
    plateau_threshold: float = 1e-3
    decay_psi: bool = False  # also decay η_ψ on plateaus of ℓ_dyn
    seed: int = 0
    dyn_warmup_epochs: int = 0
    two_stage: bool = False
    checkpoint_every: int = 500

    def __post_init__(self):
        for name in ("lr_phi", "lr_alpha", "lr_psi"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    @property
    def tau(self) -> float:
        return self.ss_tau if self.ss_tau is not None else max(self.epochs, 1) / 6.0


@dataclass(frozen=True)
class EncodeConfig:
    steps: int = 2000
    lr: float = 1e-1
    decay: float = 0.5
    patience: int = 30
    tol: float = 1e-9


@dataclass(frozen=True)
class EvalConfig:
    refine_factor: int = 10
    grid_seed: int = 1
    use_stored_alpha: bool = False
    figures: bool = True
    render_pgm: bool = True


@dataclass(frozen=True)
class RunConfig:
    preset: str = "paper"
    data: DataConfig = field(default_factory=DataConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    encode: EncodeConfig = field(default_factory=EncodeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.data.pde not in PDES:
            raise ConfigError(f"unknown pde {self.data.pde!r}")
        n = 2 if self.data.pde == "wave" else 1
        if self.decoder.latent_dim % n:
            raise ConfigError(f"latent_dim {self.decoder.latent_dim} not divisible by {n} channels")
        if self.decoder.hidden % 2:
            raise ConfigError("decoder hidden width must be even")
        if self.decoder.layers < 2:
            raise ConfigError("decoder needs at least 2 layers")


_SECTIONS = {"data": DataConfig, "decoder": DecoderConfig, "dynamics": DynamicsConfig,
             "training": TrainConfig, "encode": EncodeConfig, "eval": EvalConfig}


def _merge_section(cls, base, overrides: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    clean = {}
    for k, v in overrides.items():
        if isinstance(v, list):
            v = tuple(v)
        clean[k] = v
    try:
        return replace(base, **clean)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def preset_dict(pde: str, preset: str) -> dict:
    if pde not in PDES:
        raise ConfigError(f"unknown pde {pde!r}")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    text = resources.files("flowinr.presets").joinpath(f"{pde}_{preset}.json").read_text()
    return json.loads(text)


def resolve(user: dict | None = None, pde: str | None = None, preset: str | None = None) -> RunConfig:
    """Apply a user JSON document on top of the (pde, preset) defaults.

    Precedence: explicit arguments, then the document's own ``preset`` and
    ``data.pde``, then ("wave", "paper").
    """
    user = dict(user or {})
    top_known = {"preset", *_SECTIONS}
    unknown = set(user) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    pde = pde or user.get("data", {}).get("pde") or "wave"
    preset = preset or user.get("preset") or "paper"
    base = preset_dict(pde, preset)
    cfg = RunConfig(preset=preset)
    merged = {}
    for name, cls in _SECTIONS.items():
        sec = _merge_section(cls, getattr(cfg, name), base.get(name, {}), f"preset {name}")
        sec = _merge_section(cls, sec, user.get(name, {}), name)
        merged[name] = sec
    if merged["data"].pde != pde:
        merged["data"] = replace(merged["data"], pde=pde)
    cfg = RunConfig(preset=preset, **merged)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, pde: str | None = None, preset: str | None = None) -> RunConfig:
    user = json.loads(Path(path).read_text()) if path else {}
    return resolve(user, pde=pde, preset=preset)


def from_dict(d: dict[str, Any]) -> RunConfig:
    """Rebuild a fully resolved config (as embedded in artifacts)."""
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _merge_section(cls, cls(), d.get(name, {}), name)
    return RunConfig(preset=d.get("preset", "paper"), **sections)
