#!/usr/bin/env python3
"""
VAE Trainer
===========
Training regimes over a Dataset:
- vanilla    : ELBO on the clean images
- noise_vae  : ELBO on clean images plus one noisy copy of each (dataset doubled)
- raven      : RAVEN bound on (x, x + eps) pairs
- raven_gmm  : RAVEN bound with a trainable Gaussian-mixture prior

Loss = -bound, minimised with RAdam. Augmentation noise is redrawn every
epoch and batches are prepared on a background thread through a bounded
queue. Every epoch ends with a checkpoint; a non-finite loss aborts the run
and points at the last finite checkpoint.
"""

import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator, model_validator

from gaussian_math import GmmPrior
from radam import RAdamState, radam_step
from raven_bound import BoundBreakdown, RavenBoundConfig, gmm_raven_bound, raven_bound, vanilla_bound
from tensor_core import Graph, NonFiniteError, RavenError, backward
from vae_model import BERNOULLI, LIKELIHOODS, VaeArchitecture, VaeModel
from dataset_io import Dataset

logger = logging.getLogger(__name__)

REGIMES = ("vanilla", "noise_vae", "raven", "raven_gmm")
PAIRED_REGIMES = ("raven", "raven_gmm")
METRICS_COLUMNS = ["step", "epoch", "regime", "loss", "recon_x", "recon_x_prime", "kl_term", "term3",
                   "total", "latent_gap", "grad_norm", "clipped", "run_hash"]

Batch = Tuple[np.ndarray, Optional[np.ndarray]]


class TrainingDivergedError(RavenError):
    """Non-finite loss; `checkpoint` is the last finite checkpoint (None before the first epoch)"""

    def __init__(self, message: str, checkpoint: Optional[Path] = None, step: int = 0):
        self.checkpoint = checkpoint
        self.step = step
        super().__init__(f"{message} (last finite checkpoint: {checkpoint})")


class AugmentationSpec(BaseModel):
    """x' = x + eps, eps ~ N(0, noise_std^2 I)"""

    noise_std: float = Field(default=0.05, ge=0.0)
    pairing: Literal["original-plus-noisy"] = "original-plus-noisy"


class TrainConfig(BaseModel):
    """Regime, schedule, architecture, bound and augmentation settings for one run"""

    regime: Literal["vanilla", "noise_vae", "raven", "raven_gmm"] = "raven"
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=128, ge=1)
    learning_rate: float = Field(default=0.001, gt=0.0)
    seed: int = 0
    hidden_dims: Tuple[int, ...] = (500, 250)
    latent_dim: int = Field(default=10, ge=1)
    sigma_aug: List[float] = Field(default_factory=lambda: [0.01])
    recon_likelihood: str = BERNOULLI
    gmm_components: int = Field(default=0, ge=0)
    gmm_samples: int = Field(default=1, ge=1)
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec)
    clip_norm: float = Field(default=100.0, gt=0.0)
    max_steps: Optional[int] = Field(default=None, ge=1)
    prefetch: int = Field(default=2, ge=1)

    @field_validator("sigma_aug")
    @classmethod
    def _positive_std(cls, v: List[float]) -> List[float]:
        if not v or any(not (s > 0 and math.isfinite(s)) for s in v):
            raise ValueError("sigma_aug standard deviations must be finite and > 0")
        return v

    @field_validator("recon_likelihood")
    @classmethod
    def _likelihood(cls, v: str) -> str:
        if v not in LIKELIHOODS:
            raise ValueError(f"recon_likelihood must be one of {LIKELIHOODS}")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "TrainConfig":
        if len(self.sigma_aug) not in (1, self.latent_dim):
            raise ValueError(f"sigma_aug needs 1 or {self.latent_dim} entries, got {len(self.sigma_aug)}")
        if self.regime == "raven_gmm" and self.gmm_components < 1:
            raise ValueError("regime raven_gmm needs gmm_components >= 1")
        return self

    def sigma_aug_variances(self) -> List[float]:
        stds = self.sigma_aug * self.latent_dim if len(self.sigma_aug) == 1 else self.sigma_aug
        return [s * s for s in stds]

    def bound_config(self, gmm: Optional[GmmPrior] = None) -> RavenBoundConfig:
        return RavenBoundConfig(sigma_aug=self.sigma_aug_variances(), latent_dim=self.latent_dim,
                                recon_likelihood=self.recon_likelihood, gmm=gmm,
                                gmm_samples=self.gmm_samples)


def make_pair(x_tilde: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """(x, x') = (x~, x~ + eps) with fresh eps per datum"""
    x = np.asarray(x_tilde, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an N x D batch, got shape {x.shape}")
    if spec.noise_std == 0.0:
        return x, x.copy()
    return x, x + spec.noise_std * rng.standard_normal(x.shape)


def epoch_batches(images: np.ndarray, regime: str, spec: AugmentationSpec, batch_size: int,
                  rng: np.random.Generator) -> Iterator[Batch]:
    """Shuffled batches for one epoch; paired regimes yield (x, x'), the others (x, None)"""
    if regime in PAIRED_REGIMES:
        x, x_prime = make_pair(images, spec, rng)
    elif regime == "noise_vae":
        x, x_prime = np.vstack(make_pair(images, spec, rng)), None
    else:
        x, x_prime = np.asarray(images, dtype=np.float64), None
    order = rng.permutation(len(x))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], (x_prime[idx] if x_prime is not None else None)


class BatchPrefetcher:
    """Runs a batch iterator on a background thread, `depth` batches ahead"""

    _DONE = object()

    def __init__(self, batches: Iterator[Batch], depth: int = 2):
        self._queue: "queue.Queue" = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._fill, args=(batches,), daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _fill(self, batches: Iterator[Batch]) -> None:
        try:
            for batch in batches:
                if not self._put(batch):
                    return
        except Exception as e:  # surfaced to the consumer
            self._put(e)
            return
        self._put(self._DONE)

    def __iter__(self) -> Iterator[Batch]:
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)


@dataclass
class TrainResult:
    model: VaeModel
    gmm: Optional[GmmPrior]
    metrics: pd.DataFrame
    checkpoint: Path
    metrics_path: Path
    timings_path: Path
    steps: int
    epochs_completed: int
    checkpoints: List[Path] = field(default_factory=list)


def _global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


class RavenTrainer:
    """Owns the model, mixture prior and optimizer state for one run"""

    def __init__(self, config: TrainConfig, input_dim: int, out_dir: Union[str, Path], run_hash: str = ""):
        """Initialize a trainer

        Args:
            config: Validated training configuration
            input_dim: Pixels per image D
            out_dir: Run directory (metrics, timings, checkpoints)
            run_hash: Manifest hash written into every metrics row and checkpoint
        """
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.run_hash = run_hash

        arch = VaeArchitecture(input_dim=input_dim, hidden_dims=tuple(config.hidden_dims),
                               latent_dim=config.latent_dim)
        self.model = VaeModel.initialize(arch, seed=config.seed)
        self.gmm = (GmmPrior.initialize(config.gmm_components, config.latent_dim, seed=config.seed)
                    if config.regime == "raven_gmm" else None)
        self.optimizer = RAdamState()
        self.step_count = 0
        self.start_epoch = 1
        self.rows: List[Dict[str, Any]] = []
        self.timings: List[Dict[str, float]] = []
        self.checkpoints: List[Path] = []

    # ------------------------------------------------------------------
    # resume
    # ------------------------------------------------------------------

    def resume_from(self, checkpoint: Union[str, Path]) -> None:
        """Continue from a saved checkpoint (parameters, mixture prior, optimizer moments)"""
        model, extra, manifest = VaeModel.load(checkpoint)
        if model.architecture.to_dict() != self.model.architecture.to_dict():
            raise RavenError(f"checkpoint architecture {model.architecture.describe()} does not match "
                             f"{self.model.architecture.describe()}")
        self.model = model
        if self.gmm is not None:
            self.gmm = GmmPrior.from_arrays({k: v for k, v in extra.items() if k.startswith("gmm.")})
        self.optimizer = RAdamState.from_arrays(extra)
        meta = manifest.get("metadata", {})
        self.start_epoch = int(meta.get("epoch", 0)) + 1
        self.step_count = int(meta.get("step", 0))
        self._load_previous_rows()
        logger.info("resuming from %s at epoch %d, step %d", checkpoint, self.start_epoch, self.step_count)

    def _load_previous_rows(self) -> None:
        for path, sink in ((self.metrics_path, self.rows), (self.timings_path, self.timings)):
            if path.exists():
                frame = pd.read_csv(path, keep_default_na=False)
                sink.extend(r for r in frame.to_dict("records") if int(r["step"]) <= self.step_count)

    # ------------------------------------------------------------------
    # one optimizer step
    # ------------------------------------------------------------------

    def _bound(self, batch: Batch, params, prior, rng: np.random.Generator) -> BoundBreakdown:
        x, x_prime = batch
        regime = self.config.regime
        if regime in ("vanilla", "noise_vae"):
            return vanilla_bound(x, self.model, self.config.bound_config(), params=params, rng=rng)
        if regime == "raven":
            return raven_bound((x, x_prime), self.model, self.config.bound_config(), params=params, rng=rng)
        return gmm_raven_bound((x, x_prime), self.model, self.config.bound_config(), params=params,
                               prior=prior, rng=rng)

    def step(self, batch: Batch, rng: np.random.Generator) -> Tuple[BoundBreakdown, float, bool]:
        """Forward, backward and one RAdam update

        Returns:
            Tuple of (bound breakdown, pre-clip gradient norm, whether clipping was active)
        """
        graph = Graph()
        params = self.model.leaves(graph)
        prior = self.gmm.leaves(graph) if self.gmm is not None else None
        breakdown = self._bound(batch, params, prior, rng)
        grad_map = backward(-breakdown.objective)

        grads = {name: grad_map.of(t) for name, t in params.items()}
        if prior is not None:
            grads.update({"gmm.logits": grad_map.of(prior.logits), "gmm.means": grad_map.of(prior.means),
                          "gmm.log_vars": grad_map.of(prior.log_vars)})
        norm = _global_norm(grads)
        if not math.isfinite(norm):
            raise NonFiniteError("gradient norm is not finite")
        clipped = norm > self.config.clip_norm
        if clipped:
            scale = self.config.clip_norm / norm
            grads = {n: g * scale for n, g in grads.items()}
            logger.warning("step %d: gradient norm %.1f clipped to %.1f", self.step_count + 1, norm,
                           self.config.clip_norm)

        current = dict(self.model.params)
        if self.gmm is not None:
            current.update(self.gmm.arrays())
        updated = radam_step(self.optimizer, current, grads, self.config.learning_rate)
        self.model = self.model.with_params({n: updated[n] for n in self.model.params})
        if self.gmm is not None:
            self.gmm = GmmPrior.from_arrays(updated)
        return breakdown, norm, clipped

    # ------------------------------------------------------------------
    # epochs
    # ------------------------------------------------------------------

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.csv"

    @property
    def timings_path(self) -> Path:
        return self.out_dir / "timings.csv"

    def _epoch_rngs(self, epoch: int) -> Tuple[np.random.Generator, np.random.Generator]:
        # per-epoch streams so a resumed run replays the same noise
        return (np.random.default_rng([self.config.seed, 0, epoch]),
                np.random.default_rng([self.config.seed, 1, epoch]))

    def save_checkpoint(self, epoch: int, directory: Optional[Path] = None) -> Path:
        directory = directory or self.out_dir / "checkpoints" / f"epoch_{epoch:03d}"
        extra = self.optimizer.arrays()
        if self.gmm is not None:
            extra.update(self.gmm.arrays())
        metadata = {"epoch": epoch, "step": self.step_count, "regime": self.config.regime,
                    "sigma_aug": self.config.sigma_aug, "recon_likelihood": self.config.recon_likelihood,
                    "noise_std": self.config.augmentation.noise_std, "seed": self.config.seed}
        self.model.save(directory, config_hash=self.run_hash, extra=extra, metadata=metadata)
        return directory

    def write_logs(self) -> None:
        frame = pd.DataFrame(self.rows, columns=METRICS_COLUMNS)
        frame.to_csv(self.metrics_path, index=False)
        pd.DataFrame(self.timings, columns=["step", "wall_clock_s"]).to_csv(self.timings_path, index=False)

    def train(self, dataset: Dataset) -> TrainResult:
        """Run the configured number of epochs (or max_steps) over a dataset

        Returns:
            TrainResult with the final model, metrics frame and output paths

        Raises:
            TrainingDivergedError: the loss or its gradient became non-finite
        """
        cfg = self.config
        logger.info("training %s on %s: %d images, %s", cfg.regime, dataset.name, len(dataset),
                    self.model.architecture.describe())
        started = time.perf_counter()
        epoch = self.start_epoch - 1
        stop = False
        for epoch in range(self.start_epoch, cfg.epochs + 1):
            data_rng, noise_rng = self._epoch_rngs(epoch)
            prefetcher = BatchPrefetcher(epoch_batches(dataset.images, cfg.regime, cfg.augmentation,
                                                       cfg.batch_size, data_rng), depth=cfg.prefetch)
            try:
                for batch in prefetcher:
                    try:
                        breakdown, norm, clipped = self.step(batch, noise_rng)
                    except NonFiniteError as e:
                        self.write_logs()
                        last = self.checkpoints[-1] if self.checkpoints else None
                        raise TrainingDivergedError(f"training diverged at step {self.step_count + 1}: {e}",
                                                    last, self.step_count + 1) from e
                    self.step_count += 1
                    self.rows.append({"step": self.step_count, "epoch": epoch, "regime": cfg.regime,
                                      "loss": -breakdown.total, **breakdown.as_row(), "grad_norm": norm,
                                      "clipped": int(clipped), "run_hash": self.run_hash})
                    self.timings.append({"step": self.step_count,
                                         "wall_clock_s": time.perf_counter() - started})
                    if cfg.max_steps is not None and self.step_count >= cfg.max_steps:
                        stop = True
                        break
            finally:
                prefetcher.close()

            self.checkpoints.append(self.save_checkpoint(epoch))
            epoch_rows = [r for r in self.rows if r["epoch"] == epoch]
            if epoch_rows:
                logger.info("epoch %d/%d: mean bound %.4f over %d steps", epoch, cfg.epochs,
                            float(np.mean([r["total"] for r in epoch_rows])), len(epoch_rows))
            if stop:
                break

        final = self.save_checkpoint(epoch, self.out_dir / "checkpoint")
        self.write_logs()
        logger.info("%s trained: %d steps, checkpoint at %s", cfg.regime, self.step_count, final)
        return TrainResult(model=self.model, gmm=self.gmm, metrics=pd.DataFrame(self.rows, columns=METRICS_COLUMNS),
                           checkpoint=final, metrics_path=self.metrics_path, timings_path=self.timings_path,
                           steps=self.step_count, epochs_completed=epoch, checkpoints=list(self.checkpoints))

    def get_model_info(self) -> Dict[str, Any]:
        return {"architecture": self.model.architecture.describe(), "regime": self.config.regime,
                "steps": self.step_count, "fingerprint": self.model.fingerprint(),
                "gmm_components": self.gmm.components if self.gmm is not None else 0}


def train(config: TrainConfig, dataset: Dataset, out_dir: Union[str, Path], run_hash: str = "",
          resume: Optional[Union[str, Path]] = None) -> TrainResult:
    """Train one model; see RavenTrainer.train"""
    trainer = RavenTrainer(config, dataset.dim, out_dir, run_hash)
    if resume is not None:
        trainer.resume_from(resume)
    return trainer.train(dataset)
