"""Experiment configuration: strict-schema YAML, dataclass sections, and
content hashing for run provenance. Unknown keys are rejected at every level
so config drift fails loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


def _from_dict(cls, obj: dict, ctx: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{ctx}: expected a mapping, got {type(obj).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{ctx}: unknown keys {sorted(unknown)}; allowed: {sorted(allowed)}")
    return cls(**obj)


@dataclass
class DataSection:
    manifest: str = ""


@dataclass
class DiffusionSection:
    T: int = 1000
    cosine_s: float = 0.008
    sigma_rule: str = "posterior"  # or "beta"


@dataclass
class SamplingSection:
    steps: int = 50
    seed: int = 0


@dataclass
class ModelSection:
    base_width: int = 32
    depth: int = 3
    attention_at_bottleneck: bool = True
    time_embed_dim: int = 128


@dataclass
class OptimizerSection:
    lr: float = 1.0e-4
    betas: list = field(default_factory=lambda: [0.9, 0.999])  # list: YAML-stable
    weight_decay: float = 1.0e-2


@dataclass
class LossSection:
    perceptual_backend: str = "fallback"  # or "pretrained"
    global_weights: dict = field(
        default_factory=lambda: {"mae": 0.3, "perceptual": 0.6, "tv": 0.15, "mse": 0.05}
    )
    roi_weights: dict | None = None  # None -> global proportions normalized
    tumor_weights: dict = field(
        default_factory=lambda: {"global": 0.3, "roi": 0.6, "contrast_mae": 0.05, "intensity": 0.05}
    )


@dataclass
class TrainingSection:
    steps: int = 2000
    batch_size: int = 4
    ema_lambda: float = 0.999
    checkpoint_every: int = 0
    log_every: int = 50


@dataclass
class ExperimentConfig:
    variant: str = "SUB(Vanilla)"
    output_dir: str = "runs/default"
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    model: ModelSection = field(default_factory=ModelSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    loss: LossSection = field(default_factory=LossSection)
    training: TrainingSection = field(default_factory=TrainingSection)

    _SECTIONS = {
        "data": DataSection,
        "diffusion": DiffusionSection,
        "sampling": SamplingSection,
        "model": ModelSection,
        "optimizer": OptimizerSection,
        "loss": LossSection,
        "training": TrainingSection,
    }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config root must be a mapping")
        allowed = {f.name for f in fields(cls) if not f.name.startswith("_")}
        unknown = set(obj) - allowed
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}; allowed: {sorted(allowed)}")
        kwargs = {}
        for key, val in obj.items():
            section = cls._SECTIONS.get(key)
            kwargs[key] = _from_dict(section, val, key) if section else val
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(val) if dataclasses.is_dataclass(val) else val
        return out

    def content_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path: Path) -> ExperimentConfig:
    obj = yaml.safe_load(Path(path).read_text())
    if obj is None:
        obj = {}
    return ExperimentConfig.from_dict(obj)


def save_config(cfg: ExperimentConfig, path: Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
