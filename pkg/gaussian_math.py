#!/usr/bin/env python3
"""
Gaussian Closed Forms
=====================
Densities, divergences and product identities used by the RAVEN bound:
- Diagonal Gaussians (encoder posteriors), differentiable through tensor_core
- Full-covariance Gaussians for the oracle-side identities
- Paired latent prior p(z, z') and its Gaussian-mixture generalisation

Diagonal functions accept a leading batch axis and reduce over the last one.
Full-covariance functions are plain numpy and are used only for verification.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from tensor_core import ArrayLike, Graph, RavenError, Tensor, as_tensor, log_sum_exp

LOG_2PI = math.log(2.0 * math.pi)


class DimensionError(RavenError):
    pass


class NotPositiveDefiniteError(RavenError):
    pass


class NotSymmetricError(RavenError):
    pass


class VarianceError(RavenError):
    pass


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    """N(mean, diag(var)); mean and var are (d,) or batched (B, d)"""

    mean: Tensor
    var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise DimensionError(f"mean {self.mean.shape} and var {self.var.shape} differ")
        if np.any(self.var.data <= 0.0):
            raise VarianceError("variances must be strictly positive")

    @classmethod
    def of(cls, mean: ArrayLike, var: ArrayLike) -> "DiagGaussian":
        return cls(as_tensor(mean), as_tensor(var))

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(Tensor(np.zeros(dim)), Tensor(np.ones(dim)))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> Tensor:
        return self.var.sqrt()

    def log_det(self) -> Tensor:
        return self.var.log().sum(axis=-1)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.var.detach())

    def to_full(self) -> "FullGaussian":
        if self.mean.ndim != 1:
            raise DimensionError("only a single (unbatched) posterior converts to FullGaussian")
        return FullGaussian(self.mean.numpy(), np.diag(self.var.data))


@dataclass(frozen=True, eq=False)
class FullGaussian:
    """N(mean, cov) with a symmetric positive-definite covariance"""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(f"covariance {cov.shape} does not match mean of length {mean.size}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12:
            raise NotSymmetricError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean.reshape(-1))
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", _cholesky(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    def precision(self) -> np.ndarray:
        inv_chol = np.linalg.inv(self._chol)
        return inv_chol.T @ inv_chol

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self._chol.T


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefiniteError(f"covariance is not positive definite: {e}") from e


class GmmPrior:
    """Trainable Gaussian mixture p(z~) = sum_c pi_c N(mu_c, diag(Sigma_c))

    Weights live as unnormalised logits and variances as log-variances, so any
    gradient step keeps the weights on the simplex and the variances positive.
    """

    def __init__(self, logits: ArrayLike, means: ArrayLike, log_vars: ArrayLike):
        self.logits = as_tensor(logits)
        self.means = as_tensor(means)
        self.log_vars = as_tensor(log_vars)
        if self.logits.ndim != 1:
            raise DimensionError("mixture logits must be a vector")
        c = self.logits.shape[0]
        if self.means.ndim != 2 or self.means.shape[0] != c or self.log_vars.shape != self.means.shape:
            raise DimensionError(
                f"mixture shapes disagree: logits {self.logits.shape}, means {self.means.shape}, "
                f"log_vars {self.log_vars.shape}")

    @classmethod
    def from_moments(cls, weights: Sequence[float], means: ArrayLike, variances: ArrayLike) -> "GmmPrior":
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise DimensionError("mixture weights must lie on the simplex")
        variances = np.asarray(variances, dtype=np.float64)
        if np.any(variances <= 0):
            raise VarianceError("mixture variances must be strictly positive")
        with np.errstate(divide="ignore"):
            logits = np.log(weights)
        # zero-weight components keep a finite, negligible logit
        logits = np.where(np.isfinite(logits), logits, -700.0)
        return cls(logits, np.asarray(means, dtype=np.float64), np.log(variances))

    @classmethod
    def initialize(cls, components: int, dim: int, seed: int = 0, spread: float = 1.0) -> "GmmPrior":
        rng = np.random.default_rng(seed)
        return cls(np.zeros(components), spread * rng.standard_normal((components, dim)),
                   np.zeros((components, dim)))

    @property
    def components(self) -> int:
        return self.logits.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> np.ndarray:
        shifted = self.logits.data - self.logits.data.max()
        w = np.exp(shifted)
        return w / w.sum()

    @property
    def variances(self) -> np.ndarray:
        return np.exp(self.log_vars.data)

    def log_weights(self) -> Sequence[Tensor]:
        terms = [self.logits[c] for c in range(self.components)]
        norm = log_sum_exp(terms)
        return [t - norm for t in terms]

    def permuted(self, order: Sequence[int]) -> "GmmPrior":
        order = list(order)
        return GmmPrior(self.logits.data[order], self.means.data[order], self.log_vars.data[order])

    def leaves(self, graph: Graph) -> "GmmPrior":
        return GmmPrior(graph.leaf(self.logits, "gmm.logits"),
                        graph.leaf(self.means, "gmm.means"),
                        graph.leaf(self.log_vars, "gmm.log_vars"))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"gmm.logits": self.logits.numpy(), "gmm.means": self.means.numpy(),
                "gmm.log_vars": self.log_vars.numpy()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "GmmPrior":
        return cls(arrays["gmm.logits"], arrays["gmm.means"], arrays["gmm.log_vars"])


def _check_dims(*shapes: Tuple[int, ...]) -> None:
    last = {s[-1] if s else 1 for s in shapes}
    if len(last) != 1:
        raise DimensionError(f"dimension mismatch between {shapes}")


def diag_log_normal(x: ArrayLike, mean: ArrayLike, var: ArrayLike) -> Tensor:
    """log N(x; mean, diag(var)) summed over the last axis"""
    x, mean, var = as_tensor(x), as_tensor(mean), as_tensor(var)
    _check_dims(x.shape, mean.shape, var.shape)
    quad = (x - mean).square() / var
    return ((quad + var.log() + LOG_2PI) * -0.5).sum(axis=-1)


def log_density(g: Union[DiagGaussian, FullGaussian], x: ArrayLike) -> Union[Tensor, np.ndarray, float]:
    """Log of the Gaussian density at x (a point or a batch of points)"""
    if isinstance(g, DiagGaussian):
        return diag_log_normal(x, g.mean, g.var)

    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.shape[-1] != g.dim:
        raise DimensionError(f"point of dimension {x.shape[-1]} for a {g.dim}-dimensional Gaussian")
    centred = np.atleast_2d(x - g.mean)
    solved = np.linalg.solve(g._chol, centred.T)
    quad = np.sum(solved * solved, axis=0)
    out = -0.5 * (quad + g.log_det() + g.dim * LOG_2PI)
    return float(out[0]) if x.ndim == 1 else out


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) between diagonal Gaussians, exact per dimension"""
    _check_dims(q.mean.shape, p.mean.shape)
    ratio = q.var / p.var
    mahal = (q.mean - p.mean).square() / p.var
    return ((ratio + mahal - ratio.log() - 1.0) * 0.5).sum(axis=-1)


def w2_diag(a: DiagGaussian, b: DiagGaussian) -> Tensor:
    """Squared 2-Wasserstein distance between diagonal Gaussians"""
    _check_dims(a.mean.shape, b.mean.shape)
    return (a.mean - b.mean).square().sum(axis=-1) + (a.std - b.std).square().sum(axis=-1)


# ---------------------------------------------------------------------------
# full-covariance identities (verification side)
# ---------------------------------------------------------------------------

def expected_quadratic_form(A: np.ndarray, g: FullGaussian, a: np.ndarray) -> float:
    """E_{x~g}[(x - a)^T A (x - a)] = Tr(A Sigma) + (mu - a)^T A (mu - a)"""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if A.shape != (g.dim, g.dim) or a.size != g.dim:
        raise DimensionError("quadratic form does not match the Gaussian's dimension")
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-12:
        raise NotSymmetricError("quadratic form matrix is not symmetric")
    shift = g.mean - a
    return float(np.trace(A @ g.cov) + shift @ A @ shift)


def cross_entropy(a: FullGaussian, b: FullGaussian) -> float:
    """-E_a[log b]"""
    if a.dim != b.dim:
        raise DimensionError(f"cross-entropy between dimensions {a.dim} and {b.dim}")
    prec = b.precision()
    shift = a.mean - b.mean
    return 0.5 * float(np.trace(a.cov @ prec) + shift @ prec @ shift + b.log_det() + a.dim * LOG_2PI)


def entropy(a: FullGaussian) -> float:
    return 0.5 * (a.dim + a.dim * LOG_2PI + a.log_det())


def gaussian_product(a: FullGaussian, b: FullGaussian) -> Tuple[FullGaussian, float]:
    """N(x; a) N(x; b) = N(0; mu_a - mu_b, Sigma_a + Sigma_b) N(x; c)

    Returns:
        Tuple of (c, log of the scale factor)
    """
    if a.dim != b.dim:
        raise DimensionError(f"product of Gaussians of dimensions {a.dim} and {b.dim}")
    prec_a, prec_b = a.precision(), b.precision()
    cov_c = np.linalg.inv(prec_a + prec_b)
    cov_c = 0.5 * (cov_c + cov_c.T)
    mean_c = cov_c @ (prec_a @ a.mean + prec_b @ b.mean)
    joint = FullGaussian(np.zeros(a.dim), a.cov + b.cov)
    log_scale = log_density(joint, a.mean - b.mean)
    return FullGaussian(mean_c, cov_c), float(log_scale)


def parallel_sum(X: np.ndarray, Y: np.ndarray, method: str = "inverse") -> np.ndarray:
    """(X^-1 + Y^-1)^-1, or the equivalent X (X + Y)^-1 Y for SPD X, Y"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape != Y.shape:
        raise DimensionError(f"matrices {X.shape} and {Y.shape} differ")
    _cholesky(X)
    _cholesky(Y)
    if method == "inverse":
        return np.linalg.inv(np.linalg.inv(X) + np.linalg.inv(Y))
    if method == "product":
        return X @ np.linalg.solve(X + Y, Y)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# paired latent prior
# ---------------------------------------------------------------------------

def _sigma_aug_tensor(sigma_aug: ArrayLike, dim: int) -> Tensor:
    s = as_tensor(sigma_aug)
    if s.ndim != 1 or s.shape[0] != dim:
        raise DimensionError(f"Sigma_aug of shape {s.shape} for latent dimension {dim}")
    if np.any(s.data <= 0.0):
        raise VarianceError("Sigma_aug entries must be strictly positive")
    return s


def log_difference_kernel(z: ArrayLike, z_prime: ArrayLike, sigma_aug: ArrayLike) -> Tensor:
    """log N(0; z - z', 2 Sigma_aug)"""
    z, z_prime = as_tensor(z), as_tensor(z_prime)
    if z.shape != z_prime.shape:
        raise DimensionError(f"pair members have shapes {z.shape} and {z_prime.shape}")
    s = _sigma_aug_tensor(sigma_aug, z.shape[-1])
    return diag_log_normal(z - z_prime, 0.0 * s, s * 2.0)


def paired_prior_log_density(z: ArrayLike, z_prime: ArrayLike, sigma_aug: ArrayLike) -> Tensor:
    """log p(z, z') of the paired prior with a standard-normal base latent"""
    z, z_prime = as_tensor(z), as_tensor(z_prime)
    s = _sigma_aug_tensor(sigma_aug, z.shape[-1])
    midpoint = (z + z_prime) * 0.5
    return log_difference_kernel(z, z_prime, s) + diag_log_normal(midpoint, 0.0 * s, s * 0.5 + 1.0)


def gmm_midpoint_log_density(midpoint: ArrayLike, sigma_aug: ArrayLike, prior: GmmPrior) -> Tensor:
    """log sum_c pi_c N(midpoint; mu_c, Sigma_c + Sigma_aug / 2), via log-sum-exp"""
    midpoint = as_tensor(midpoint)
    s = _sigma_aug_tensor(sigma_aug, midpoint.shape[-1])
    if prior.dim != midpoint.shape[-1]:
        raise DimensionError(f"mixture of dimension {prior.dim} for latent dimension {midpoint.shape[-1]}")
    terms = []
    for c, log_w in enumerate(prior.log_weights()):
        var_c = prior.log_vars[c].exp() + s * 0.5
        terms.append(diag_log_normal(midpoint, prior.means[c], var_c) + log_w)
    return log_sum_exp(terms)


def gmm_paired_prior_log_density(z: ArrayLike, z_prime: ArrayLike, sigma_aug: ArrayLike,
                                 prior: GmmPrior) -> Tensor:
    """log p(z, z') of the paired prior with a Gaussian-mixture base latent"""
    z, z_prime = as_tensor(z), as_tensor(z_prime)
    return (log_difference_kernel(z, z_prime, sigma_aug)
            + gmm_midpoint_log_density((z + z_prime) * 0.5, sigma_aug, prior))


def as_full_prior_components(prior: GmmPrior, sigma_aug: ArrayLike) -> Sequence[Tuple[float, FullGaussian]]:
    """(pi_c, N(mu_c, Sigma_c + Sigma_aug / 2)) pairs as full Gaussians"""
    s = np.asarray(as_tensor(sigma_aug).data)
    return [(float(w), FullGaussian(prior.means.data[c], np.diag(prior.variances[c] + 0.5 * s)))
            for c, w in enumerate(prior.weights)]


def unit_gmm(dim: int) -> GmmPrior:
    """Single-component mixture equal to N(0, I)"""
    return GmmPrior(np.zeros(1), np.zeros((1, dim)), np.zeros((1, dim)))


def standard_prior(dim: int, batch: Optional[int] = None) -> DiagGaussian:
    shape = (dim,) if batch is None else (batch, dim)
    return DiagGaussian(Tensor(np.zeros(shape)), Tensor(np.ones(shape)))
