"""Structured experiment configuration.

One YAML file per experiment, validated strictly against the dataclass schema
below: unknown keys are rejected, and command-line overrides use dotted paths
(`--set stage1.iterations=200`). The resolved config is echoed into every
command's output directory.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class DataConfig:
    root: str = "data"
    train_samples: int = 8
    test_samples: int = 4
    height: int = 64
    width: int = 64
    bands: int = 4
    ratio: int = 4
    divisor: float = 1.0
    synth_seed: int = 1234


@dataclass
class ModelConfig:
    stem_channels: int = 32
    num_stages: int = 3
    n_tokens: int = 16
    z_dim: int = 128
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 2, 4)
    core_ranks: tuple = ((4, 4, 2, 2), (4, 4, 2, 2), (4, 4, 2, 2), (8, 8, 2, 2))
    latent_grids: tuple = (4, 2, 2, 1)
    factor_width: int = 32
    core_hidden: int = 256
    denoiser_hidden: int = 256
    denoiser_blocks: int = 5
    time_dim: int = 64


@dataclass
class DiffusionConfig:
    timesteps: int = 500
    cosine_s: float = 0.008
    beta_max: float = 0.999


@dataclass
class StageConfig:
    iterations: int = 200
    batch_size: int = 4
    lr: float = 0.8e-4
    weight_decay: float = 1.0e-4
    log_every: int = 10


@dataclass
class Stage1Config(StageConfig):
    no_prior: bool = False  # ablation: run the backbone unmodulated


@dataclass
class Stage2Config(StageConfig):
    lambda_reg: float = 1.0
    ema_decay: float = 0.995
    separate: bool = False  # ablation: train the denoiser alone, backbone frozen


@dataclass
class SamplingConfig:
    steps: int = 25
    sigma: float = 0.0
    use_ema: bool = True


@dataclass
class MetricsConfig:
    ratio: int = 4
    q_block: int = 32


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/exp"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)


def _coerce(value, target_type, path):
    if dataclasses.is_dataclass(target_type):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _from_dict(target_type, value, path)
    if target_type is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in value)
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        iv = int(float(value))
        if float(value) != iv:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return iv
    if target_type is float:
        return float(value)
    if target_type is str:
        return str(value)
    return value


def _from_dict(cls, raw, path=""):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"unknown config key(s) under {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, f in fields.items():
        if name not in raw:
            continue
        sub = f"{path}.{name}" if path else name
        ftype = f.type if not isinstance(f.type, str) else _resolve_type(f.type)
        kwargs[name] = _coerce(raw[name], ftype, sub)
    return cls(**kwargs)


def _resolve_type(name):
    return {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple,
            "DataConfig": DataConfig, "ModelConfig": ModelConfig,
            "DiffusionConfig": DiffusionConfig, "Stage1Config": Stage1Config,
            "Stage2Config": Stage2Config, "SamplingConfig": SamplingConfig,
            "MetricsConfig": MetricsConfig}.get(name, object)


def config_from_dict(raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a mapping")
    cfg = _from_dict(ExperimentConfig, raw)
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg.stage2.lambda_reg < 0:
        raise ConfigError("stage2.lambda_reg must be >= 0")
    if cfg.stage1.lr <= 0 or cfg.stage2.lr <= 0:
        raise ConfigError("learning rates must be positive")
    if cfg.diffusion.timesteps < 2:
        raise ConfigError("diffusion.timesteps must be >= 2")
    if not (0.0 <= cfg.stage2.ema_decay <= 1.0):
        raise ConfigError("stage2.ema_decay must lie in [0, 1]")
    if cfg.sampling.steps < 1 or cfg.sampling.steps > cfg.diffusion.timesteps:
        raise ConfigError("sampling.steps must lie in [1, diffusion.timesteps]")
    if len(cfg.model.channel_multipliers) != len(cfg.model.core_ranks):
        raise ConfigError("model.core_ranks must list one rank tuple per level")
    if len(cfg.model.channel_multipliers) != len(cfg.model.latent_grids):
        raise ConfigError("model.latent_grids must list one grid per level")
    return cfg


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw)


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def save_config(cfg, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(json.loads(json.dumps(to_dict(cfg))), fh, sort_keys=False)


def apply_overrides(cfg, assignments):
    """Apply `section.key=value` strings on top of a config, re-validating."""
    raw = to_dict(cfg)
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = yaml.safe_load(value)
    return config_from_dict(raw)


def config_hash(cfg):
    """Hash of the architecture-defining sections; checkpoints refuse to load
    under a different hash."""
    relevant = {
        "model": to_dict(cfg)["model"],
        "diffusion": to_dict(cfg)["diffusion"],
        "bands": cfg.data.bands,
    }
    blob = json.dumps(relevant, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
