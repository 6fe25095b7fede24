#!/usr/bin/env python3
"""
VAE Model
=========
Fully connected encoder/decoder with PReLU activations:
- Encoder  D -> hidden... -> (mean head, log-variance head), both of size d
- Decoder  d -> ...hidden -> D Bernoulli logits
- Reparameterisation z = mu + sigma * eps
- Reconstruction log-likelihoods (Bernoulli cross-entropy, Gaussian MSE)
- Checkpoints: JSON manifest + one RAVTNSR1 tensor file per parameter

Parameters are held as an immutable snapshot of numpy arrays. A forward pass
binds them either as leaves of a fresh Graph (training, attacks) or as
constants (evaluation).
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from gaussian_math import DiagGaussian
from tensor_core import (ArrayLike, Graph, RavenError, ShapeError, Tensor, as_tensor,
                         load_tensor, prelu, save_tensor)

logger = logging.getLogger(__name__)

PRELU_INIT_SLOPE = 0.25
MANIFEST_NAME = "manifest.json"

BERNOULLI = "bernoulli-cross-entropy"
GAUSSIAN_MSE = "gaussian-mse"
LIKELIHOODS = (BERNOULLI, GAUSSIAN_MSE)


class CheckpointError(RavenError):
    pass


class TargetRangeError(RavenError):
    pass


@dataclass(frozen=True)
class VaeArchitecture:
    input_dim: int = 784
    hidden_dims: Tuple[int, ...] = (500, 250)
    latent_dim: int = 10

    def __post_init__(self):
        if self.input_dim < 1 or self.latent_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ShapeError(f"invalid architecture {self.describe()}")

    def describe(self) -> str:
        return "-".join(str(n) for n in (self.input_dim, *self.hidden_dims, self.latent_dim))

    def to_dict(self) -> Dict[str, Any]:
        return {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims),
                "latent_dim": self.latent_dim}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VaeArchitecture":
        return cls(int(data["input_dim"]), tuple(int(h) for h in data["hidden_dims"]),
                   int(data["latent_dim"]))


@dataclass(frozen=True, eq=False)
class PosteriorOutput:
    """Encoder output (mu_x, sigma_x); var is carried alongside to avoid squaring sigma"""

    mean: Tensor
    std: Tensor
    var: Tensor

    def gaussian(self) -> DiagGaussian:
        return DiagGaussian(self.mean, self.var)

    def __len__(self) -> int:
        return self.mean.shape[0]


def _linear_names(prefix: str, index: Union[int, str]) -> Tuple[str, str]:
    return f"{prefix}.{index}.weight", f"{prefix}.{index}.bias"


def parameter_shapes(arch: VaeArchitecture) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    widths = [arch.input_dim, *arch.hidden_dims]
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w, b = _linear_names("enc", i)
        shapes[w], shapes[b], shapes[f"enc.{i}.slope"] = (fan_in, fan_out), (fan_out,), ()
    for head in ("mean", "logvar"):
        w, b = _linear_names("enc", head)
        shapes[w], shapes[b] = (widths[-1], arch.latent_dim), (arch.latent_dim,)

    widths = [arch.latent_dim, *reversed(arch.hidden_dims)]
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w, b = _linear_names("dec", i)
        shapes[w], shapes[b], shapes[f"dec.{i}.slope"] = (fan_in, fan_out), (fan_out,), ()
    w, b = _linear_names("dec", "out")
    shapes[w], shapes[b] = (widths[-1], arch.input_dim), (arch.input_dim,)
    return shapes


class VaeModel:
    """Encoder/decoder MLP pair over an immutable parameter snapshot"""

    def __init__(self, architecture: VaeArchitecture, params: Mapping[str, np.ndarray]):
        self.architecture = architecture
        self.params: Dict[str, np.ndarray] = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        for arr in self.params.values():
            arr.setflags(write=False)
        missing = set(self.parameter_shapes()) - set(self.params)
        if missing:
            raise CheckpointError(f"missing parameters: {sorted(missing)}")
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"parameter {name} has non-finite entries")

    @property
    def latent_dim(self) -> int:
        return self.architecture.latent_dim

    @property
    def input_dim(self) -> int:
        return self.architecture.input_dim

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return parameter_shapes(self.architecture)

    @classmethod
    def initialize(cls, architecture: VaeArchitecture, seed: int = 0) -> "VaeModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, PReLU slopes at 0.25"""
        rng = np.random.default_rng(seed)
        shapes = parameter_shapes(architecture)
        params = {}
        for name, shape in shapes.items():
            if name.endswith(".slope"):
                params[name] = np.array(PRELU_INIT_SLOPE)
                continue
            fan_in = shapes[name.rsplit(".", 1)[0] + ".weight"][0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(architecture, params)

    def encoder_names(self) -> List[str]:
        return [n for n in self.params if n.startswith("enc.")]

    def decoder_names(self) -> List[str]:
        return [n for n in self.params if n.startswith("dec.")]

    def leaves(self, graph: Graph) -> Dict[str, Tensor]:
        return {name: graph.leaf(arr, name) for name, arr in self.params.items()}

    def constants(self) -> Dict[str, Tensor]:
        return {name: Tensor(arr) for name, arr in self.params.items()}

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "VaeModel":
        merged = dict(self.params)
        merged.update(updates)
        return VaeModel(self.architecture, merged)

    def _mlp(self, h: Tensor, params: Mapping[str, Tensor], prefix: str, layers: int) -> Tensor:
        for i in range(layers):
            w, b = _linear_names(prefix, i)
            h = prelu(h @ params[w] + params[b], params[f"{prefix}.{i}.slope"])
        return h

    def encode(self, x: ArrayLike, params: Optional[Mapping[str, Tensor]] = None) -> PosteriorOutput:
        """q(z|x): mean head and log-variance head, sigma = exp(logvar / 2)"""
        params = params if params is not None else self.constants()
        x = as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"input of width {x.shape[-1]} for a model of input dimension {self.input_dim}")
        h = self._mlp(x, params, "enc", len(self.architecture.hidden_dims))
        mean = h @ params["enc.mean.weight"] + params["enc.mean.bias"]
        log_var = h @ params["enc.logvar.weight"] + params["enc.logvar.bias"]
        return PosteriorOutput(mean, (log_var * 0.5).exp(), log_var.exp())

    def decode(self, z: ArrayLike, params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        params = params if params is not None else self.constants()
        z = as_tensor(z)
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent of width {z.shape[-1]} for latent dimension {self.latent_dim}")
        h = self._mlp(z, params, "dec", len(self.architecture.hidden_dims))
        return h @ params["dec.out.weight"] + params["dec.out.bias"]

    def reconstruct(self, x: ArrayLike) -> np.ndarray:
        """Sigmoid decoder output from the clean encoder mean"""
        logits = self.decode(self.encode(x).mean)
        return logits.sigmoid().numpy()

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return digest.hexdigest()

    # ------------------------------------------------------------------
    # checkpoints
    # ------------------------------------------------------------------

    def save(self, directory: Union[str, Path], config_hash: str = "",
             extra: Optional[Mapping[str, np.ndarray]] = None,
             metadata: Optional[Mapping[str, Any]] = None) -> Path:
        """Write manifest.json plus one tensor file per parameter

        Args:
            directory: Checkpoint directory (created if needed)
            config_hash: Manifest hash of the run that produced the model
            extra: Additional named arrays (mixture prior, optimizer moments)
            metadata: Free-form JSON-serialisable metadata

        Returns:
            Path to the manifest
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, arr in {**self.params, **dict(extra or {})}.items():
            filename = f"{name}.rvt"
            save_tensor(directory / filename, arr)
            files[name] = filename

        manifest = {
            "architecture": self.architecture.describe(),
            "layout": self.architecture.to_dict(),
            "latent_dim": self.latent_dim,
            "input_dim": self.input_dim,
            "config_hash": config_hash,
            "parameters": {n: files[n] for n in self.params},
            "extra": {n: files[n] for n in (extra or {})},
            "fingerprint": self.fingerprint(),
            "metadata": dict(metadata or {}),
        }
        path = directory / MANIFEST_NAME
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        logger.info("checkpoint written to %s", directory)
        return path

    @classmethod
    def load(cls, directory: Union[str, Path]) -> Tuple["VaeModel", Dict[str, np.ndarray], Dict[str, Any]]:
        """Load a checkpoint

        Returns:
            Tuple of (model, extra arrays, manifest)
        """
        directory = Path(directory)
        path = directory / MANIFEST_NAME
        if not path.exists():
            raise CheckpointError(f"no checkpoint manifest at {path}")
        with open(path) as f:
            manifest = json.load(f)
        architecture = VaeArchitecture.from_dict(manifest["layout"])
        params = {n: load_tensor(directory / fn).numpy() for n, fn in manifest["parameters"].items()}
        extra = {n: load_tensor(directory / fn).numpy() for n, fn in manifest.get("extra", {}).items()}
        model = cls(architecture, params)
        if manifest.get("fingerprint") and manifest["fingerprint"] != model.fingerprint():
            raise CheckpointError(f"checkpoint at {directory} does not match its fingerprint")
        return model, extra, manifest


def reparameterize(posterior: PosteriorOutput, eps: ArrayLike) -> Tensor:
    """z = mu + sigma * eps"""
    eps = as_tensor(eps)
    if eps.shape != posterior.mean.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match posterior {posterior.mean.shape}")
    return posterior.mean + posterior.std * eps


def likelihood_target(x: ArrayLike, likelihood: str = BERNOULLI) -> Tensor:
    """Reconstruction target, never tracked; clipped to the pixel range for the Bernoulli likelihood only"""
    values = as_tensor(x).data
    return Tensor(np.clip(values, 0.0, 1.0) if likelihood == BERNOULLI else values)


def recon_loglik(logits: Tensor, x: ArrayLike, likelihood: str = BERNOULLI) -> Tensor:
    """Per-datum reconstruction log-likelihood, summed over pixels

    Bernoulli: sum x*l - softplus(l), the stable form of
    x log sigmoid(l) + (1 - x) log(1 - sigmoid(l)).
    Gaussian MSE: -1/2 ||x - sigmoid(l)||^2 (unit observation variance);
    its targets may leave [0, 1].
    """
    x = as_tensor(x)
    if x.shape != logits.shape:
        raise ShapeError(f"targets {x.shape} and logits {logits.shape} differ")
    if likelihood == BERNOULLI:
        if np.any(x.data < 0.0) or np.any(x.data > 1.0):
            raise TargetRangeError("Bernoulli targets must lie in [0, 1]")
        return (x * logits - logits.softplus()).sum(axis=-1)
    if likelihood == GAUSSIAN_MSE:
        return ((x - logits.sigmoid()).square() * -0.5).sum(axis=-1)
    raise ValueError(f"unknown likelihood {likelihood!r}")
