"""Experiment configuration: versioned, strict, and fingerprintable.

A config plus the seeds it contains fully determines a run; the fingerprint
(sha256 of the canonical JSON form) names artifacts and ties reports to the
exact settings that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import tomllib
from dataclasses import dataclass, field
from pathlib import Path

CONFIG_VERSION = 1


@dataclass(frozen=True)
class GeometryConfig:
    height: int = 32
    width: int = 32
    nv: int = 2
    patch: int = 20
    stride: int = 10


@dataclass(frozen=True)
class MaskConfig:
    distribution: str = "rgbw"
    seed: int = 0


@dataclass(frozen=True)
class SceneConfig:
    count: int = 4
    test_count: int = 2
    layer_disparities: tuple = (0.0, 2.0)
    texture_smoothness: float = 2.5
    dmax: float = 4.0


@dataclass(frozen=True)
class ReconConfig:
    channels: int = 32
    beta: float = 0.004
    lr: float = 5e-4
    decay: float = 0.98
    epochs: int = 2
    steps_per_epoch: int = 150
    batch: int = 8
    fine_tune: bool = False


@dataclass(frozen=True)
class DispConfig:
    stage_channels: tuple = (8, 16, 32)
    gamma: float = 0.1
    lr: float = 1e-3
    dmax: float = 4.0
    epochs: int = 1
    steps_per_epoch: int = 150
    crop: int = 32
    source: str = "reconstruction"  # or "ground-truth"


@dataclass(frozen=True)
class SparseConfig:
    patch: int = 8
    overlap: int = 2
    atoms: int = 0  # 0 = 4x overcomplete default
    lam: float = 0.05
    max_nnz: int = 8
    solver: str = "admm"
    admm_iters: int = 300
    ksvd_iters: int = 5
    train_patches: int = 400


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    method: str = "net"  # net | sparse-admm | sparse-omp | backprojection
    noise_sigma: float = 0.0
    run_disparity: bool = False
    data_dir: str = ""
    out_dir: str = "runs/out"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    disp: DispConfig = field(default_factory=DispConfig)
    sparse: SparseConfig = field(default_factory=SparseConfig)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"config version {self.version} unsupported (expected {CONFIG_VERSION})")
        if self.method not in ("net", "sparse-admm", "sparse-omp", "backprojection"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_SECTIONS = {
    "geometry": GeometryConfig,
    "mask": MaskConfig,
    "scene": SceneConfig,
    "recon": ReconConfig,
    "disp": DispConfig,
    "sparse": SparseConfig,
}


def _build(cls, mapping: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ValueError(f"unknown config keys in [{path}]: {sorted(unknown)}")
    coerced = {}
    for key, val in mapping.items():
        if isinstance(val, list):
            val = tuple(val)
        coerced[key] = val
    return cls(**coerced)


def config_from_dict(data: dict) -> ExperimentConfig:
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, val in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], val, key)
        else:
            kwargs[key] = val
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Parse a TOML experiment file (strict keys, explicit version)."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return config_from_dict(data)


def write_resolved_config(cfg: ExperimentConfig, directory) -> Path:
    """Drop the fully resolved config (JSON) into an artifact directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "resolved_config.json"
    payload = {"fingerprint": cfg.fingerprint(), "config": cfg.to_dict()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=list))
    return path
