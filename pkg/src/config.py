import os
import json
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from src.errors import ConfigError, DataFileError

load_dotenv()


@dataclass
class EngineConfig:
    # Paths & Runtime
    DATA_DIR: str = os.getenv("DIT_DATA_DIR", "data")
    THREADS: int = int(os.getenv("DIT_THREADS", "1"))
    SEED: int = int(os.getenv("DIT_SEED", "0"))

    # Geometry conventions (DeepSDF preprocessing)
    TSDF_DELTA: float = float(os.getenv("DIT_TSDF_DELTA", "0.1"))
    NORMALIZATION_MARGIN: float = 1.03

    # Grid evaluation chunk (points per forward pass)
    GRID_CHUNK: int = int(os.getenv("DIT_GRID_CHUNK", str(32 ** 3)))

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")


# Global instance
config = EngineConfig()


def _reject_unknown(cls, data: Dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")


@dataclass
class ModelConfig:
    """Hyperparameters of the template + warp network (stored in checkpoints)."""

    latent_dim: int = 256
    hidden_dim: int = 256
    template_width: int = 256
    template_layers: int = 4
    steps: int = 8
    softplus_beta: float = 100.0
    head_init_scale: float = 0.01
    warp_kind: str = "lstm"  # "lstm" or "mlp" (single-step ablation)

    def __post_init__(self):
        for name in ("latent_dim", "hidden_dim", "template_width", "template_layers", "steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"ModelConfig.{name} must be >= 1 (got {getattr(self, name)})")
        if self.warp_kind not in ("lstm", "mlp"):
            raise ConfigError(f"ModelConfig.warp_kind must be 'lstm' or 'mlp' (got {self.warp_kind!r})")
        if self.warp_kind == "mlp" and self.steps != 1:
            raise ConfigError("ModelConfig: the mlp warp is single-step, set steps=1")
        if self.softplus_beta <= 0:
            raise ConfigError("ModelConfig.softplus_beta must be > 0")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        _reject_unknown(cls, data)
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class CurriculumParams:
    """(eps, lam, delta) of the curriculum loss at one warp step."""

    eps: float = 0.0
    lam: float = 0.0
    delta: float = 0.1

    def __post_init__(self):
        if self.eps < 0:
            raise ConfigError(f"CurriculumParams.eps must be >= 0 (got {self.eps})")
        if not 0.0 <= self.lam < 1.0:
            raise ConfigError(f"CurriculumParams.lam must be in [0, 1) (got {self.lam})")
        if self.delta <= 0:
            raise ConfigError(f"CurriculumParams.delta must be > 0 (got {self.delta})")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CurriculumParams":
        _reject_unknown(cls, data)
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


# Progressive reconstruction schedule: supervision every other step.
CURRICULUM_SCHEDULE: Dict[int, CurriculumParams] = {
    2: CurriculumParams(eps=0.025, lam=0.0),
    4: CurriculumParams(eps=0.01, lam=0.1),
    6: CurriculumParams(eps=0.0025, lam=0.2),
    8: CurriculumParams(eps=0.0, lam=0.5),
}


@dataclass
class RegWeights:
    lambda_pw: float = 5e-4
    lambda_pp: float = 1e-3
    eps_pp: float = 0.5
    huber_delta: float = 0.25
    code_sigma: float = 100.0
    lambda_temp: float = 1.0
    lambda_corr: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"RegWeights.{f.name} must be >= 0")
        if self.huber_delta <= 0 or self.code_sigma <= 0:
            raise ConfigError("RegWeights: huber_delta and code_sigma must be > 0")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RegWeights":
        _reject_unknown(cls, data)
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class TrainConfig:
    iterations: int = 2000
    shapes_per_batch: int = 8
    points_per_shape: int = 512
    lr_net: float = 5e-4
    lr_code: float = 1e-3
    latent_init_std: float = 0.01
    schedule: Dict[int, CurriculumParams] = field(default_factory=lambda: dict(CURRICULUM_SCHEDULE))
    weights: RegWeights = field(default_factory=RegWeights)
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 10
    template_spec: Optional[Dict[str, Any]] = None
    template_samples: int = 4096
    correspondence_file: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("iterations", "shapes_per_batch", "points_per_shape", "checkpoint_every", "log_every"):
            value = getattr(self, name)
            if value < 1 and not (name == "iterations" and value == 0):
                raise ConfigError(f"TrainConfig.{name} must be positive (got {value})")
        if self.lr_net < 0 or self.lr_code < 0 or self.latent_init_std < 0:
            raise ConfigError("TrainConfig: learning rates and latent_init_std must be >= 0")
        if not self.schedule:
            raise ConfigError("TrainConfig.schedule must supervise at least one step")
        bad = [s for s in self.schedule if not 1 <= s <= self.model.steps]
        if bad:
            raise ConfigError(f"TrainConfig.schedule steps {bad} outside 1..{self.model.steps}")

    @classmethod
    def baseline(cls, **overrides) -> "TrainConfig":
        """DeepSDF-style ablation: plain clamp-L1 on the final step, no warp regularizers."""
        model = overrides.pop("model", ModelConfig())
        weights = overrides.pop("weights", RegWeights())
        weights = RegWeights(**{**weights.to_dict(), "lambda_pw": 0.0, "lambda_pp": 0.0})
        return cls(
            schedule={model.steps: CurriculumParams(0.0, 0.0)},
            weights=weights,
            model=model,
            **overrides,
        )

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        _reject_unknown(cls, data)
        data = dict(data)
        try:
            if "schedule" in data:
                data["schedule"] = {
                    int(step): CurriculumParams.from_dict(params)
                    for step, params in data["schedule"].items()
                }
            if "weights" in data:
                data["weights"] = RegWeights.from_dict(data["weights"])
            if "model" in data:
                data["model"] = ModelConfig.from_dict(data["model"])
            return cls(**data)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"TrainConfig: {e}") from e

    @classmethod
    def from_json(cls, path: str) -> "TrainConfig":
        return cls.from_dict(_read_json(path))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iterations": self.iterations,
            "shapes_per_batch": self.shapes_per_batch,
            "points_per_shape": self.points_per_shape,
            "lr_net": self.lr_net,
            "lr_code": self.lr_code,
            "latent_init_std": self.latent_init_std,
            "schedule": {str(s): p.to_dict() for s, p in sorted(self.schedule.items())},
            "weights": self.weights.to_dict(),
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "log_every": self.log_every,
            "template_spec": self.template_spec,
            "template_samples": self.template_samples,
            "correspondence_file": self.correspondence_file,
            "model": self.model.to_dict(),
        }


@dataclass
class RunConfig:
    """Everything one CLI invocation needs; flags override these fields."""

    dataset: str = ""
    checkpoint: str = ""
    out_dir: str = "runs"
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: List[str] = field(default_factory=lambda: ["chamfer", "emd"])
    chamfer_points: int = 30000
    emd_subsample: int = 500
    pck_thresholds: List[float] = field(default_factory=lambda: [0.01, 0.02])
    pool_resolution: int = 128
    resolution: int = 64
    infer_iterations: int = 800
    infer_lr: float = 5e-3
    seed: int = config.SEED

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        _reject_unknown(cls, data)
        data = dict(data)
        if "train" in data:
            data["train"] = TrainConfig.from_dict(data["train"])
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"RunConfig: {e}") from e

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        return cls.from_dict(_read_json(path))

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["train"] = self.train.to_dict()
        return out

    def validate_paths(self, *names: str):
        """Fail fast on missing inputs before long-running work begins."""
        for name in names:
            path = getattr(self, name)
            if not path or not Path(path).exists():
                raise DataFileError(path or f"<{name} unset>", f"RunConfig.{name} does not exist")


def _read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise DataFileError(path, "config file not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}") from e
