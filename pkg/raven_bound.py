#!/usr/bin/env python3
"""
RAVEN Training Objectives
=========================
Variational bounds maximised by the trainer:
- Vanilla ELBO: E_q[log p(x|z)] - KL(q(z|x) || N(0, I))
- RAVEN bound on an augmented pair (x, x'): two reconstruction terms plus
  the closed-form -KL between the product posterior and the paired prior
- The mean-vector term (3) and its decomposition
- The Gaussian-mixture-prior bound, with a reparameterised estimate of the
  mixture expectation

Sigma_aug is diagonal throughout, so every inverse and determinant is a
per-dimension operation.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from gaussian_math import (DiagGaussian, DimensionError, GmmPrior,
                           gmm_midpoint_log_density, kl_diag, standard_prior)
from tensor_core import ArrayLike, NonFiniteError, RavenError, ShapeError, Tensor, as_tensor
from vae_model import BERNOULLI, LIKELIHOODS, VaeModel, likelihood_target, recon_loglik, reparameterize

LOG_PI = math.log(math.pi)
LOG_2 = math.log(2.0)


class MissingMixtureError(RavenError):
    pass


class RavenBoundConfig(BaseModel):
    """Sigma_aug (diagonal variances), latent dimension, likelihood and optional mixture prior"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    sigma_aug: List[float]
    latent_dim: int = Field(ge=1)
    recon_likelihood: str = BERNOULLI
    gmm: Optional[GmmPrior] = None
    gmm_samples: int = Field(default=1, ge=1)

    @field_validator("sigma_aug")
    @classmethod
    def _positive(cls, v: List[float]) -> List[float]:
        if not v or any(not (s > 0 and math.isfinite(s)) for s in v):
            raise ValueError("sigma_aug entries must be finite and > 0")
        return v

    @field_validator("recon_likelihood")
    @classmethod
    def _known_likelihood(cls, v: str) -> str:
        if v not in LIKELIHOODS:
            raise ValueError(f"recon_likelihood must be one of {LIKELIHOODS}")
        return v

    @model_validator(mode="after")
    def _dims_agree(self) -> "RavenBoundConfig":
        if len(self.sigma_aug) != self.latent_dim:
            raise ValueError(f"sigma_aug has {len(self.sigma_aug)} entries for latent_dim {self.latent_dim}")
        if self.gmm is not None and self.gmm.dim != self.latent_dim:
            raise ValueError(f"mixture prior of dimension {self.gmm.dim} for latent_dim {self.latent_dim}")
        return self

    @classmethod
    def isotropic(cls, std: float, latent_dim: int, **kwargs) -> "RavenBoundConfig":
        """Sigma_aug = std^2 I"""
        return cls(sigma_aug=[std * std] * latent_dim, latent_dim=latent_dim, **kwargs)

    def sigma_aug_array(self) -> np.ndarray:
        return np.asarray(self.sigma_aug, dtype=np.float64)


@dataclass
class BoundBreakdown:
    """Batch-averaged pieces of a bound; total = recon_x + recon_x_prime + kl_term"""

    recon_x: float
    recon_x_prime: float
    kl_term: float
    term3: float
    total: float
    latent_gap: float = 0.0
    objective: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self) -> Dict[str, float]:
        return {"recon_x": self.recon_x, "recon_x_prime": self.recon_x_prime,
                "kl_term": self.kl_term, "term3": self.term3, "total": self.total,
                "latent_gap": self.latent_gap}


def _check_pair(qx: DiagGaussian, qx_prime: DiagGaussian, cfg: RavenBoundConfig) -> Tensor:
    if qx.mean.shape != qx_prime.mean.shape:
        raise DimensionError(f"posteriors of shapes {qx.mean.shape} and {qx_prime.mean.shape}")
    if qx.dim != cfg.latent_dim:
        raise DimensionError(f"posterior of dimension {qx.dim} for latent_dim {cfg.latent_dim}")
    return Tensor(cfg.sigma_aug_array())


def _require_finite(value: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(value.data)):
        raise NonFiniteError(f"{what} is not finite")
    return value


def vanilla_elbo(posterior: DiagGaussian, recon: ArrayLike) -> Tensor:
    """recon - KL(q || N(0, I)) per datum"""
    recon = _require_finite(as_tensor(recon), "reconstruction log-likelihood")
    _require_finite(posterior.mean, "posterior mean")
    return recon - kl_diag(posterior, standard_prior(posterior.dim))


# ---------------------------------------------------------------------------
# term (3) and its decomposition
# ---------------------------------------------------------------------------

def term3(qx: DiagGaussian, qx_prime: DiagGaussian, cfg: RavenBoundConfig) -> Tensor:
    """(mu - mu')^T Sigma_aug^-1 (mu - mu') + (mu + mu')^T (2I + Sigma_aug)^-1 (mu + mu')"""
    s = _check_pair(qx, qx_prime, cfg)
    diff = (qx.mean - qx_prime.mean).square() / s
    both = (qx.mean + qx_prime.mean).square() / (s + 2.0)
    return (diff + both).sum(axis=-1)


def term3_decomposed(qx: DiagGaussian, qx_prime: DiagGaussian, cfg: RavenBoundConfig) -> Tensor:
    """2 (mu^T A mu + mu'^T A mu') - (mu + mu')^T A (I/2 + A)^-1 A (mu + mu'), A = Sigma_aug^-1"""
    s = _check_pair(qx, qx_prime, cfg)
    a = 1.0 / s
    own = (qx.mean.square() + qx_prime.mean.square()) * a * 2.0
    coupling = (qx.mean + qx_prime.mean).square() * a * a / (a + 0.5)
    return (own - coupling).sum(axis=-1)


# ---------------------------------------------------------------------------
# the three expectations that make up -KL against the paired prior
# ---------------------------------------------------------------------------

def expected_log_difference_kernel(qx: DiagGaussian, qx_prime: DiagGaussian,
                                   cfg: RavenBoundConfig) -> Tensor:
    """E_q[log N(0; z - z', 2 Sigma_aug)]"""
    s = _check_pair(qx, qx_prime, cfg)
    spread = ((qx.var + qx_prime.var) / s).sum(axis=-1)
    mahal = ((qx.mean - qx_prime.mean).square() / s).sum(axis=-1)
    d = cfg.latent_dim
    return (spread + mahal) * -0.25 - 0.5 * (float(np.log(s.data).sum()) + d * math.log(4.0 * math.pi))


def expected_log_midpoint_prior(qx: DiagGaussian, qx_prime: DiagGaussian,
                                cfg: RavenBoundConfig) -> Tensor:
    """E_q[log N((z + z')/2; 0, I + Sigma_aug/2)]"""
    s = _check_pair(qx, qx_prime, cfg)
    spread = ((qx.var + qx_prime.var) / (s + 2.0)).sum(axis=-1)
    mahal = ((qx.mean + qx_prime.mean).square() / (s + 2.0)).sum(axis=-1)
    d = cfg.latent_dim
    return (spread + mahal) * -0.25 - 0.5 * (float(np.log(s.data + 2.0).sum()) + d * LOG_PI)


def posterior_pair_entropy(qx: DiagGaussian, qx_prime: DiagGaussian) -> Tensor:
    """H(q(z|x)) + H(q(z'|x'))"""
    d = qx.dim
    return (qx.log_det() + qx_prime.log_det()) * 0.5 + d * (1.0 + math.log(2.0 * math.pi))


def raven_kl_term(qx: DiagGaussian, qx_prime: DiagGaussian, cfg: RavenBoundConfig,
                  printed_constant: bool = False) -> Tensor:
    """-KL(q(z|x) q(z'|x') || p(z, z')) in closed form

    The constant per dimension is 1. With printed_constant=True the
    d(1 - log 2) variant is returned instead, which sits exactly d*log(2)
    below the true divergence.
    """
    s = _check_pair(qx, qx_prime, cfg)
    d = cfg.latent_dim
    trace = ((qx.var + qx_prime.var) * (1.0 / s + 1.0 / (s + 2.0))).sum(axis=-1)
    constant = 2.0 * d * (1.0 - LOG_2) if printed_constant else 2.0 * d
    log_dets = (qx.log_det() + qx_prime.log_det()
                - float(np.log(s.data).sum()) - float(np.log(s.data + 2.0).sum()) + constant)
    return (trace + term3(qx, qx_prime, cfg)) * -0.25 + log_dets * 0.5


def gmm_closed_terms(qx: DiagGaussian, qx_prime: DiagGaussian, cfg: RavenBoundConfig) -> Tensor:
    """Every closed-form piece of the mixture-prior -KL (all but the mixture expectation)"""
    s = _check_pair(qx, qx_prime, cfg)
    d = cfg.latent_dim
    spread = ((qx.var + qx_prime.var) / s).sum(axis=-1)
    mahal = ((qx.mean - qx_prime.mean).square() / s).sum(axis=-1)
    return ((spread + mahal) * -0.25 + (qx.log_det() + qx_prime.log_det()) * 0.5
            + d * (1.0 + 0.5 * LOG_PI) - 0.5 * float(np.log(s.data).sum()))


def gmm_expectation_estimate(z_pairs: Sequence[Tuple[Tensor, Tensor]], cfg: RavenBoundConfig,
                             prior: GmmPrior) -> Tensor:
    """Reparameterised estimate of E_q[log sum_c pi_c N((z + z')/2; mu_c, Sigma_c + Sigma_aug/2)]"""
    s = Tensor(cfg.sigma_aug_array())
    total = None
    for z, z_prime in z_pairs:
        term = gmm_midpoint_log_density((z + z_prime) * 0.5, s, prior)
        total = term if total is None else total + term
    return total / float(len(z_pairs))


# ---------------------------------------------------------------------------
# batch bounds
# ---------------------------------------------------------------------------

def _draw(rng: Optional[np.random.Generator], shape: Tuple[int, ...]) -> np.ndarray:
    if rng is None:
        raise ValueError("either explicit noise or a random generator is required")
    return rng.standard_normal(shape)


def _breakdown(recon_x: Tensor, recon_xp: Tensor, kl: Tensor, t3: Tensor,
               gap: Tensor) -> BoundBreakdown:
    total = recon_x + recon_xp + kl
    objective = total.mean()
    _require_finite(objective, "bound")
    rx, rxp, k = recon_x.mean().item(), recon_xp.mean().item(), kl.mean().item()
    return BoundBreakdown(recon_x=rx, recon_x_prime=rxp, kl_term=k, term3=t3.mean().item(),
                          total=objective.item(), latent_gap=gap.mean().item(), objective=objective)


def vanilla_bound(batch: ArrayLike, model: VaeModel, cfg: RavenBoundConfig,
                  params: Optional[Mapping[str, Tensor]] = None,
                  rng: Optional[np.random.Generator] = None,
                  noise: Optional[ArrayLike] = None) -> BoundBreakdown:
    """Batch-averaged vanilla ELBO as a BoundBreakdown (x' terms are zero)"""
    x = as_tensor(batch)
    post = model.encode(x, params)
    eps = noise if noise is not None else _draw(rng, post.mean.shape)
    z = reparameterize(post, eps)
    likelihood = cfg.recon_likelihood
    recon = recon_loglik(model.decode(z, params), likelihood_target(x, likelihood), likelihood)
    elbo = vanilla_elbo(post.gaussian(), recon)
    zeros = Tensor(np.zeros(len(x)))
    return _breakdown(recon, zeros, elbo - recon, zeros, zeros)


def _encode_pair(batch_pair, model: VaeModel, params, rng, noise):
    x, x_prime = (as_tensor(b) for b in batch_pair)
    if x.shape != x_prime.shape:
        raise ShapeError(f"pair members have shapes {x.shape} and {x_prime.shape}")
    post_x, post_xp = model.encode(x, params), model.encode(x_prime, params)
    if noise is None:
        noise = (_draw(rng, post_x.mean.shape), _draw(rng, post_xp.mean.shape))
    z = reparameterize(post_x, noise[0])
    z_prime = reparameterize(post_xp, noise[1])
    return x, x_prime, post_x, post_xp, z, z_prime


def raven_bound(batch_pair: Tuple[ArrayLike, ArrayLike], model: VaeModel, cfg: RavenBoundConfig,
                params: Optional[Mapping[str, Tensor]] = None,
                rng: Optional[np.random.Generator] = None,
                noise: Optional[Tuple[ArrayLike, ArrayLike]] = None) -> BoundBreakdown:
    """One-sample RAVEN bound on a paired batch, averaged over the batch

    Args:
        batch_pair: (x, x') of equal shape (B, D)
        model: Encoder/decoder
        cfg: Bound configuration
        params: Bound parameter tensors (graph leaves when gradients are wanted)
        rng: Source of reparameterisation noise when `noise` is not given
        noise: Explicit (eps, eps') of shape (B, d) each

    Returns:
        BoundBreakdown whose `objective` tensor is the differentiable total
    """
    x, x_prime, post_x, post_xp, z, z_prime = _encode_pair(batch_pair, model, params, rng, noise)
    likelihood = cfg.recon_likelihood
    rx = recon_loglik(model.decode(z, params), likelihood_target(x, likelihood), likelihood)
    rxp = recon_loglik(model.decode(z_prime, params), likelihood_target(x_prime, likelihood), likelihood)
    qx, qxp = post_x.gaussian(), post_xp.gaussian()
    gap = (post_x.mean - post_xp.mean).square().sum(axis=-1)
    return _breakdown(rx, rxp, raven_kl_term(qx, qxp, cfg), term3(qx, qxp, cfg), gap)


def gmm_raven_bound(batch_pair: Tuple[ArrayLike, ArrayLike], model: VaeModel, cfg: RavenBoundConfig,
                    params: Optional[Mapping[str, Tensor]] = None,
                    prior: Optional[GmmPrior] = None,
                    rng: Optional[np.random.Generator] = None,
                    noise: Optional[Tuple[ArrayLike, ArrayLike]] = None,
                    samples: Optional[int] = None) -> BoundBreakdown:
    """Mixture-prior bound; the mixture expectation reuses the reconstruction sample

    Extra expectation samples (samples > 1) are drawn from `rng`.
    """
    prior = prior if prior is not None else cfg.gmm
    if prior is None:
        raise MissingMixtureError("the mixture-prior bound needs cfg.gmm or an explicit prior")
    if prior.dim != cfg.latent_dim:
        raise DimensionError(f"mixture prior of dimension {prior.dim} for latent_dim {cfg.latent_dim}")
    samples = samples or cfg.gmm_samples

    x, x_prime, post_x, post_xp, z, z_prime = _encode_pair(batch_pair, model, params, rng, noise)
    likelihood = cfg.recon_likelihood
    rx = recon_loglik(model.decode(z, params), likelihood_target(x, likelihood), likelihood)
    rxp = recon_loglik(model.decode(z_prime, params), likelihood_target(x_prime, likelihood), likelihood)

    z_pairs = [(z, z_prime)]
    for _ in range(samples - 1):
        z_pairs.append((reparameterize(post_x, _draw(rng, z.shape)),
                        reparameterize(post_xp, _draw(rng, z.shape))))
    qx, qxp = post_x.gaussian(), post_xp.gaussian()
    kl = gmm_closed_terms(qx, qxp, cfg) + gmm_expectation_estimate(z_pairs, cfg, prior)
    gap = (post_x.mean - post_xp.mean).square().sum(axis=-1)
    return _breakdown(rx, rxp, kl, term3(qx, qxp, cfg), gap)


def gmm_kl_term(qx: DiagGaussian, qx_prime: DiagGaussian, cfg: RavenBoundConfig, prior: GmmPrior,
                noise_pairs: Sequence[Tuple[ArrayLike, ArrayLike]]) -> Tensor:
    """Mixture-prior -KL for fixed posteriors, estimated over the given noise pairs"""
    z_pairs = [(qx.mean + qx.std * as_tensor(e), qx_prime.mean + qx_prime.std * as_tensor(e2))
               for e, e2 in noise_pairs]
    return gmm_closed_terms(qx, qx_prime, cfg) + gmm_expectation_estimate(z_pairs, cfg, prior)
