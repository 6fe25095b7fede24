#!/usr/bin/env python3
"""
Robustness Evaluation
=====================
Latent-space attacks and representation metrics:
- PGD (l-infinity, sign-gradient ascent) on KL or squared-W2 between the
  clean posterior and the posterior of the perturbed input
- Frozen encoder means as representations, scored with a linear probe
- Clean / adversarial accuracy, reconstruction MSE and the latent-pair
  distance between clean and noise-perturbed inputs

Attacked inputs are not clamped to [0, 1].
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, Field, model_validator
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score

from dataset_io import Dataset
from gaussian_math import DiagGaussian, kl_diag, w2_diag
from tensor_core import Graph, RavenError, Tensor, backward
from vae_model import VaeModel

logger = logging.getLogger(__name__)

OBJECTIVES = ("kl", "w2")
DEFAULT_DELTA_GRID = (0.0, 0.05, 0.1, 0.15, 0.2)
PGD_STEP_DIVISOR = 25.0
ENCODE_CHUNK = 1024


class AttackConfig(BaseModel):
    """l-infinity budget, schedule and dissimilarity for one attack"""

    budget: float = Field(default=0.1, ge=0.0)
    iterations: int = Field(default=50, ge=1)
    step: Optional[float] = None
    objective: Literal["kl", "w2"] = "kl"
    seed: int = 0
    random_start: bool = False

    @model_validator(mode="after")
    def _positive_step(self) -> "AttackConfig":
        if self.budget > 0 and self.step is not None and not self.step > 0:
            raise ValueError("attack step must be > 0 when the budget is > 0")
        return self

    @property
    def step_size(self) -> float:
        return self.step if self.step is not None else self.budget / PGD_STEP_DIVISOR


@dataclass
class AttackResult:
    epsilon: np.ndarray
    objective: float
    history: List[float] = field(default_factory=list)
    failed: bool = False
    reason: str = ""


# ---------------------------------------------------------------------------
# PGD
# ---------------------------------------------------------------------------

def posterior_dissimilarity(clean: DiagGaussian, perturbed: DiagGaussian, objective: str) -> Tensor:
    """KL(q(.|x) || q(.|x + eps)) or squared W2, summed over the batch"""
    if objective == "kl":
        return kl_diag(clean, perturbed).sum()
    if objective == "w2":
        return w2_diag(clean, perturbed).sum()
    raise ValueError(f"unknown attack objective {objective!r}")


def _objective_and_grad(model: VaeModel, x: np.ndarray, clean: DiagGaussian, eps: np.ndarray,
                        objective: str):
    graph = Graph()
    leaf = graph.leaf(eps[None, :], "epsilon")
    perturbed = model.encode(Tensor(x[None, :]) + leaf).gaussian()
    value = posterior_dissimilarity(clean, perturbed, objective)
    grad = backward(value).of(leaf)[0]
    return value.item(), grad


def pgd_attack(model: VaeModel, x: np.ndarray, cfg: AttackConfig) -> AttackResult:
    """Maximise the posterior dissimilarity over {||eps||_inf <= budget}

    Starts at eps = 0 (or uniform in the box with random_start). The start is
    a stationary point, so on the first iteration coordinates with an exactly
    zero gradient move in a seeded +-1 direction. The best iterate, start
    included, is returned.

    Args:
        model: Model whose encoder is attacked
        x: One input vector of length D
        cfg: Attack configuration

    Returns:
        AttackResult; `failed` is set when the objective became non-finite
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    delta = cfg.budget
    if delta == 0.0:
        return AttackResult(np.zeros_like(x), 0.0, [0.0])

    rng = np.random.default_rng(cfg.seed)
    clean = model.encode(x[None, :]).gaussian()
    eps = rng.uniform(-delta, delta, x.shape) if cfg.random_start else np.zeros_like(x)
    step = cfg.step_size
    try:
        value, grad = _objective_and_grad(model, x, clean, eps, cfg.objective)
    except RavenError as e:
        return AttackResult(np.zeros_like(x), 0.0, [], True, str(e))
    best_eps, best_value, history = eps.copy(), value, [value]

    for it in range(cfg.iterations):
        direction = np.sign(grad)
        if it == 0:
            still = direction == 0
            direction[still] = rng.choice([-1.0, 1.0], size=int(still.sum()))
        eps = np.clip(eps + step * direction, -delta, delta)
        try:
            value, grad = _objective_and_grad(model, x, clean, eps, cfg.objective)
        except RavenError as e:
            logger.warning("attack aborted at iteration %d: %s", it + 1, e)
            return AttackResult(best_eps, best_value, history, True, str(e))
        if not math.isfinite(value):
            return AttackResult(best_eps, best_value, history, True, "non-finite objective")
        history.append(value)
        if value > best_value:
            best_eps, best_value = eps.copy(), value
    return AttackResult(best_eps, best_value, history)


def attack_batch(model: VaeModel, images: np.ndarray, cfg: AttackConfig, workers: int = 1) -> List[AttackResult]:
    """Attack every row independently; sample i uses seed (cfg.seed, i)"""
    configs = [cfg.model_copy(update={"seed": int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])})
               for i in range(len(images))]
    if workers == 1:
        return [pgd_attack(model, x, c) for x, c in zip(images, configs)]
    return Parallel(n_jobs=workers)(delayed(pgd_attack)(model, x, c) for x, c in zip(images, configs))


# ---------------------------------------------------------------------------
# representations and the linear probe
# ---------------------------------------------------------------------------

def extract_representations(model: VaeModel, data: Union[Dataset, np.ndarray]) -> np.ndarray:
    """Encoder means, one row per input"""
    images = data.images if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if len(images) == 0:
        return np.zeros((0, model.latent_dim))
    chunks = [model.encode(images[i:i + ENCODE_CHUNK]).mean.numpy()
              for i in range(0, len(images), ENCODE_CHUNK)]
    return np.vstack(chunks)


@dataclass
class LinearProbe:
    """Multinomial logistic regression on frozen representations"""

    classifier: Optional[LogisticRegression]
    degenerate: bool = False
    constant_label: int = 0

    def predict(self, z: np.ndarray) -> np.ndarray:
        if self.degenerate:
            return np.full(len(z), self.constant_label, dtype=np.int64)
        return self.classifier.predict(z)

    def accuracy(self, z: np.ndarray, labels: np.ndarray) -> float:
        if len(labels) == 0:
            return 0.0
        return float(accuracy_score(labels, self.predict(z)))


def fit_linear_probe(z: np.ndarray, labels: np.ndarray, max_iter: int = 1000, tol: float = 1e-5,
                     C: float = 1.0) -> LinearProbe:
    """Full-batch lbfgs fit; single-class input gives a constant probe flagged degenerate"""
    labels = np.asarray(labels).astype(np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        logger.warning("linear probe fitted on a single class; predictions are constant")
        return LinearProbe(None, True, int(classes[0]) if classes.size else 0)
    clf = LogisticRegression(solver="lbfgs", tol=tol, max_iter=max_iter, C=C)
    clf.fit(np.asarray(z, dtype=np.float64), labels)
    return LinearProbe(clf)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def reconstruction_mse(model: VaeModel, images: np.ndarray) -> float:
    """Mean over images of the pixel-sum squared error of the clean reconstruction"""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        return 0.0
    errors = [np.sum((images[i:i + ENCODE_CHUNK] - model.reconstruct(images[i:i + ENCODE_CHUNK])) ** 2, axis=1)
              for i in range(0, len(images), ENCODE_CHUNK)]
    return float(np.mean(np.concatenate(errors)))


def latent_pair_distances(model: VaeModel, images: np.ndarray, noise_std: float = 0.05,
                          seed: int = 0) -> np.ndarray:
    """||mu(x + eps) - mu(x)||^2 per image, one seeded noise draw"""
    images = np.asarray(images, dtype=np.float64)
    if noise_std == 0.0:
        return np.zeros(len(images))
    noisy = images + noise_std * np.random.default_rng(seed).standard_normal(images.shape)
    diff = extract_representations(model, noisy) - extract_representations(model, images)
    return np.sum(diff * diff, axis=1)


class AdversarialRow(BaseModel):
    objective: Literal["kl", "w2"]
    delta: float = Field(ge=0.0)
    accuracy: float = Field(ge=0.0, le=1.0)
    failures: int = Field(default=0, ge=0)
    samples: int = Field(default=0, ge=0)


class EvalReport(BaseModel):
    """Metric bundle for one model on one test set"""

    regime: str = ""
    run_hash: str = ""
    n_test: int = 0
    clean_accuracy: float = Field(ge=0.0, le=1.0)
    per_class_accuracy: Dict[str, float] = Field(default_factory=dict)
    adversarial: List[AdversarialRow] = Field(default_factory=list)
    recon_mse: float = Field(ge=0.0)
    latent_pair_distance_mean: float = Field(ge=0.0)
    latent_pair_distance_std: float = Field(ge=0.0)
    probe_degenerate: bool = False

    def accuracy_frame(self) -> pd.DataFrame:
        rows = [{"delta": r.delta, "objective": r.objective, "accuracy": r.accuracy, "failures": r.failures,
                 "samples": r.samples, "regime": self.regime, "run_hash": self.run_hash}
                for r in self.adversarial]
        return pd.DataFrame(rows, columns=["delta", "objective", "accuracy", "failures", "samples",
                                           "regime", "run_hash"])

    def write(self, out_dir: Union[str, Path]) -> Dict[str, Path]:
        """eval_report.json plus accuracy.csv (delta, objective, accuracy, ...)"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path, csv_path = out_dir / "eval_report.json", out_dir / "accuracy.csv"
        with open(json_path, "w") as f:
            json.dump(self.model_dump(), f, indent=2, sort_keys=True)
        self.accuracy_frame().to_csv(csv_path, index=False)
        return {"json": json_path, "csv": csv_path}


def per_class_accuracy(labels: np.ndarray, predictions: np.ndarray) -> Dict[str, float]:
    out = {}
    for c in np.unique(labels):
        mask = labels == c
        out[str(int(c))] = float(np.mean(predictions[mask] == c))
    return out


def evaluate(model: VaeModel, probe: LinearProbe, testset: Dataset,
             delta_grid: Sequence[float] = DEFAULT_DELTA_GRID, objectives: Sequence[str] = OBJECTIVES,
             attack: Optional[AttackConfig] = None, noise_std: float = 0.05, noise_seed: int = 0,
             workers: int = 1, regime: str = "", run_hash: str = "") -> EvalReport:
    """Clean and adversarial probe accuracy, reconstruction MSE and latent-pair distance

    Args:
        model: Trained model (frozen)
        probe: Linear probe fitted on training representations
        testset: Test images and labels
        delta_grid: Attack budgets; a zero budget reuses the clean accuracy
        objectives: Attack dissimilarities to run ("kl", "w2")
        attack: Template for iterations, step, seed and random start
        noise_std: Noise of the latent-pair distance (one shared seeded draw)
        noise_seed: Seed of that draw
        workers: Attack worker processes

    Returns:
        EvalReport
    """
    attack = attack or AttackConfig()
    labels = testset.labels
    z_clean = extract_representations(model, testset)
    predictions = probe.predict(z_clean)
    clean_acc = float(accuracy_score(labels, predictions)) if len(labels) else 0.0

    rows = []
    for objective in objectives:
        for delta in delta_grid:
            if delta == 0.0:
                rows.append(AdversarialRow(objective=objective, delta=0.0, accuracy=clean_acc,
                                           samples=len(labels)))
                continue
            cfg = attack.model_copy(update={"budget": float(delta), "objective": objective})
            results = attack_batch(model, testset.images, cfg, workers)
            eps = np.stack([r.epsilon for r in results]) if results else np.zeros_like(testset.images)
            if np.any(np.abs(eps) > delta + 1e-12):
                raise RavenError(f"attack left the budget {delta}")
            failures = sum(r.failed for r in results)
            z_adv = extract_representations(model, testset.images + eps)
            acc = probe.accuracy(z_adv, labels)
            rows.append(AdversarialRow(objective=objective, delta=float(delta), accuracy=acc,
                                       failures=failures, samples=len(labels)))
            logger.info("attack %s delta=%.3f: accuracy %.4f (%d failures)", objective, delta, acc, failures)
            if failures:
                logger.warning("%d of %d attacks failed at %s delta=%.3f", failures, len(labels), objective, delta)

    distances = latent_pair_distances(model, testset.images, noise_std, noise_seed)
    return EvalReport(
        regime=regime, run_hash=run_hash, n_test=len(labels), clean_accuracy=clean_acc,
        per_class_accuracy=per_class_accuracy(labels, predictions), adversarial=rows,
        recon_mse=reconstruction_mse(model, testset.images),
        latent_pair_distance_mean=float(np.mean(distances)) if len(distances) else 0.0,
        latent_pair_distance_std=float(np.std(distances)) if len(distances) else 0.0,
        probe_degenerate=probe.degenerate)


def write_latents(path: Union[str, Path], z: np.ndarray, labels: np.ndarray) -> Path:
    """Latent matrix as CSV (z0..z{d-1}, label) for external embedding tools"""
    frame = pd.DataFrame(z, columns=[f"z{i}" for i in range(z.shape[1])])
    frame["label"] = np.asarray(labels).astype(np.int64)
    frame.to_csv(path, index=False)
    return Path(path)
