#!/usr/bin/env python3
"""
Run Settings
============
Flat KEY=value run files (dotenv syntax, see raven_config.template),
resolved with the precedence

    built-in defaults < config file < environment (RAVEN_DATA_DIR) < CLI flags

and hashed into a RunManifest that every output file refers to.
"""

import hashlib
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from tensor_core import RavenError

logger = logging.getLogger(__name__)

ENV_DATA_DIR = "RAVEN_DATA_DIR"
MANIFEST_FILE = "run_manifest_{command}.json"

# augmentation-kernel standard deviations per dataset
SIGMA_AUG_DEFAULTS = {"mnist": 0.01, "fmnist": 0.04, "synth": 0.1}
SWEEP_SIGMAS = (0.01, 0.04, 0.1, 0.2, 0.4, 1.0)
SYNTH_LAYOUT = {"classes": 4, "per_class": 300, "dim": 16, "separation": 0.8, "test_fraction": 0.2}

CONFIG_KEYS = ("DATASET", "DATA_DIR", "REGIME", "SIGMA_AUG", "NOISE_STD", "EPOCHS", "BATCH_SIZE", "LR",
               "LATENT_DIM", "HIDDEN_DIMS", "DELTA_GRID", "OBJECTIVE", "SEED", "OUT_DIR", "SUBSAMPLE",
               "TEST_SUBSAMPLE", "GMM_COMPONENTS", "GMM_SAMPLES", "ATTACK_ITERATIONS", "RANDOM_START",
               "WORKERS", "RECON_LIKELIHOOD")


class ConfigError(RavenError):
    pass


def parse_float_list(text: Union[str, List[float], Tuple[float, ...]]) -> List[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}")


def parse_int_list(text: Union[str, List[int], Tuple[int, ...]]) -> List[int]:
    values = parse_float_list(text)
    if any(v != int(v) for v in values):
        raise ConfigError(f"expected comma-separated integers, got {text!r}")
    return [int(v) for v in values]


class RunSettings(BaseModel):
    """Every resolvable run setting, one field per config key"""

    dataset: Literal["mnist", "fmnist", "synth"] = "synth"
    data_dir: str = "data"
    regime: Literal["vanilla", "noise_vae", "raven", "raven_gmm"] = "raven"
    sigma_aug: Optional[List[float]] = None
    noise_std: float = Field(default=0.05, ge=0.0)
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=128, ge=1)
    lr: float = Field(default=0.001, gt=0.0)
    latent_dim: int = Field(default=10, ge=1)
    hidden_dims: List[int] = Field(default_factory=lambda: [500, 250])
    delta_grid: List[float] = Field(default_factory=lambda: [0.0, 0.05, 0.1, 0.15, 0.2])
    objective: Literal["kl", "w2", "both"] = "both"
    seed: int = 0
    out_dir: str = "runs"
    subsample: Optional[int] = Field(default=None, ge=1)
    test_subsample: Optional[int] = Field(default=None, ge=1)
    gmm_components: int = Field(default=0, ge=0)
    gmm_samples: int = Field(default=1, ge=1)
    attack_iterations: int = Field(default=50, ge=1)
    random_start: bool = False
    workers: int = Field(default=1, ge=1)
    recon_likelihood: Literal["bernoulli-cross-entropy", "gaussian-mse"] = "bernoulli-cross-entropy"

    @field_validator("sigma_aug", "delta_grid", mode="before")
    @classmethod
    def _float_list(cls, v):
        return None if v is None or v == "" else parse_float_list(v)

    @field_validator("hidden_dims", mode="before")
    @classmethod
    def _int_list(cls, v):
        return [] if v == "" else parse_int_list(v)

    @field_validator("delta_grid")
    @classmethod
    def _non_negative(cls, v: List[float]) -> List[float]:
        if any(d < 0 for d in v):
            raise ValueError("attack budgets must be >= 0")
        return v

    def sigma_aug_stds(self) -> List[float]:
        """Configured standard deviations, or the dataset default"""
        return self.sigma_aug if self.sigma_aug else [SIGMA_AUG_DEFAULTS[self.dataset]]

    def objectives(self) -> List[str]:
        return ["kl", "w2"] if self.objective == "both" else [self.objective]


def validation_message(error: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in error.errors())


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """KEY=value pairs from a run file, lower-cased to RunSettings field names"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    values = dotenv_values(path)
    unknown = sorted(k for k in values if k.upper() not in CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return {k.lower(): v for k, v in values.items() if v not in (None, "")}


def resolve_settings(config_file: Optional[Union[str, Path]] = None,
                     overrides: Optional[Mapping[str, Any]] = None) -> RunSettings:
    """Merge defaults, config file, environment and CLI overrides (later wins)

    Raises:
        ConfigError: a value fails validation
    """
    merged: Dict[str, Any] = {}
    if config_file is not None:
        merged.update(load_config_file(config_file))
    load_dotenv()
    if os.environ.get(ENV_DATA_DIR):
        merged["data_dir"] = os.environ[ENV_DATA_DIR]
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunSettings(**merged)
    except ValidationError as e:
        raise ConfigError(validation_message(e)) from e


def canonical_hash(payload: Any) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunManifest(BaseModel):
    """Resolved command and settings plus content hashes of every input"""

    command: str
    settings: Dict[str, Any]
    seed: int
    inputs: Dict[str, str] = Field(default_factory=dict)
    started_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished_at: Optional[str] = None

    @classmethod
    def create(cls, command: str, settings: RunSettings, inputs: Optional[Mapping[str, Union[str, Path]]] = None,
               **extra: Any) -> "RunManifest":
        hashed = {name: file_sha256(p) for name, p in (inputs or {}).items() if Path(p).is_file()}
        return cls(command=command, settings={**settings.model_dump(), **extra}, seed=settings.seed,
                   inputs=hashed)

    @property
    def hash(self) -> str:
        """Timestamps are excluded so identical runs share a hash"""
        return canonical_hash({"command": self.command, "settings": self.settings, "inputs": self.inputs})[:16]

    def write(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.finished_at = datetime.now(timezone.utc).isoformat()
        path = out_dir / MANIFEST_FILE.format(command=self.command)
        with open(path, "w") as f:
            json.dump({**self.model_dump(), "hash": self.hash}, f, indent=2, sort_keys=True)
        logger.info("manifest %s written to %s", self.hash, path)
        return path
