#!/usr/bin/env python3
"""
Numerical Oracles for the Gaussian Closed Forms
===============================================
Independent checks of every closed form used by the RAVEN bound:
- Adaptive composite Gauss-Legendre quadrature (log space, tensorized in 2-D)
  for the paired prior and its Gaussian-mixture version
- Seeded Monte Carlo for expectations (quadratic forms, cross-entropy, KL,
  the three expectations that make up the bound)
- Exact matrix and pointwise identities (parallel sum, product of Gaussians,
  the decomposition of term (3))
- Finite-difference gradient checks on a toy model

run_verification_suite() returns one OracleResult per (identity, instance).
"""

import logging
import math
import zlib
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from gaussian_math import (DiagGaussian, FullGaussian, GmmPrior, cross_entropy, entropy,
                           expected_quadratic_form, gaussian_product, gmm_paired_prior_log_density,
                           kl_diag, log_density, paired_prior_log_density, parallel_sum)
from raven_bound import (RavenBoundConfig, expected_log_difference_kernel, expected_log_midpoint_prior,
                         gmm_closed_terms, posterior_pair_entropy, raven_bound, raven_kl_term, term3,
                         term3_decomposed)
from tensor_core import RavenError, Tensor, finite_diff_check
from vae_model import VaeArchitecture, VaeModel

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
QUAD_HALF_WIDTH = 12.0
MC_SIGMAS = 3.0
GOLDEN_SIGMA_AUG = (math.sqrt(5.0) - 1.0) / 2.0


class QuadratureError(RavenError):
    pass


@dataclass
class OracleResult:
    identity: str
    instance_seed: int
    error: float
    tolerance: float
    passed: bool

    def as_row(self) -> Dict[str, object]:
        return asdict(self)


@dataclass(frozen=True)
class SuiteSize:
    """Instance counts per identity family"""

    quadrature_instances: int = 100
    gmm_instances: int = 100
    term3_instances: int = 1000
    matrix_instances: int = 100
    mc_instances: int = 20
    mc_samples: int = 1_000_000
    offset_draws: int = 100

    @classmethod
    def quick(cls) -> "SuiteSize":
        return cls(quadrature_instances=4, gmm_instances=2, term3_instances=50, matrix_instances=10,
                   mc_instances=2, mc_samples=50_000, offset_draws=20)


# ---------------------------------------------------------------------------
# plain-numpy densities
# ---------------------------------------------------------------------------

def _log_normal(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum((x - mean) ** 2 / var + np.log(var) + LOG_2PI, axis=-1)


def _log_mixture(x: np.ndarray, weights: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    per_component = np.stack([_log_normal(x, means[c], variances[c]) + log_w[c]
                              for c in range(len(weights))])
    return np.logaddexp.reduce(per_component, axis=0)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def _axis_rule(lower: float, upper: float, panels: int, order: int) -> Tuple[np.ndarray, np.ndarray]:
    xi, wi = leggauss(order)
    edges = np.linspace(lower, upper, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * xi[None, :]).reshape(-1)
    weights = (half[:, None] * wi[None, :]).reshape(-1)
    return nodes, weights


def _log_composite(log_f: Callable[[np.ndarray], np.ndarray], lower: np.ndarray, upper: np.ndarray,
                   panels: int, order: int) -> float:
    rules = [_axis_rule(lo, hi, panels, order) for lo, hi in zip(lower, upper)]
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    log_w = np.meshgrid(*[np.log(r[1]) for r in rules], indexing="ij")
    points = np.stack([g.reshape(-1) for g in grids], axis=-1)
    values = log_f(points) + sum(w.reshape(-1) for w in log_w)
    shift = np.max(values)
    return float(shift + np.log(np.sum(np.exp(values - shift))))


def log_integrate(log_f: Callable[[np.ndarray], np.ndarray], lower: Sequence[float], upper: Sequence[float],
                  order: int = 32, tol: float = 1e-11, max_points: int = 4_000_000) -> float:
    """log of the integral of exp(log_f) over a box, by panel doubling until stable

    Args:
        log_f: Vectorised log-integrand, (N, d) points -> (N,) values
        lower: Lower corner of the box
        upper: Upper corner of the box
        order: Gauss-Legendre nodes per panel
        tol: Absolute change in the log-integral that ends refinement

    Returns:
        log of the integral
    """
    lower, upper = np.asarray(lower, dtype=np.float64), np.asarray(upper, dtype=np.float64)
    panels, previous = 1, None
    while True:
        value = _log_composite(log_f, lower, upper, panels, order)
        if previous is not None and abs(value - previous) < tol:
            return value
        if (2 * panels * order) ** len(lower) > max_points:
            if previous is not None and abs(value - previous) < 1e3 * tol:
                return value
            raise QuadratureError(f"quadrature did not settle: {previous} -> {value}")
        previous, panels = value, panels * 2


def _product_window(z: np.ndarray, z_prime: np.ndarray, sigma_aug: np.ndarray,
                    means: np.ndarray, variances: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # each mixture component times the two kernels is Gaussian in the base latent
    precision = 2.0 / sigma_aug + 1.0 / variances
    centre = ((z + z_prime) / sigma_aug + means / variances) / precision
    width = QUAD_HALF_WIDTH / np.sqrt(precision)
    return np.min(centre - width, axis=0), np.max(centre + width, axis=0)


def paired_prior_by_quadrature(z: np.ndarray, z_prime: np.ndarray, sigma_aug: np.ndarray,
                               weights: Optional[np.ndarray] = None, means: Optional[np.ndarray] = None,
                               variances: Optional[np.ndarray] = None) -> float:
    """log of the integral of a(z|u) a(z'|u) p(u) du, p a unit Gaussian or a mixture"""
    z, z_prime = np.asarray(z, dtype=np.float64), np.asarray(z_prime, dtype=np.float64)
    sigma_aug = np.asarray(sigma_aug, dtype=np.float64)
    d = z.size
    if weights is None:
        weights, means, variances = np.ones(1), np.zeros((1, d)), np.ones((1, d))
    lower, upper = _product_window(z, z_prime, sigma_aug, means, variances)

    def log_f(u):
        return (_log_normal(z, u, sigma_aug) + _log_normal(z_prime, u, sigma_aug)
                + _log_mixture(u, weights, means, variances))

    return log_integrate(log_f, lower, upper)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

def mc_mean(values: np.ndarray) -> Tuple[float, float]:
    """Sample mean and its standard error"""
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def mc_agrees(closed: float, draw: Callable[[np.random.Generator], np.ndarray], rng: np.random.Generator,
              sigmas: float = MC_SIGMAS) -> Tuple[float, bool]:
    """Compare a closed form with the mean of one MC draw at `sigmas` standard errors

    Returns:
        Tuple of (distance in standard errors, passed)
    """
    mean, se = mc_mean(draw(rng))
    z_score = abs(closed - mean) / max(se, 1e-300)
    return z_score, z_score <= sigmas


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------

def random_spd(rng: np.random.Generator, d: int) -> np.ndarray:
    a = rng.standard_normal((d, d))
    return a @ a.T + d * np.eye(d)


def random_full_gaussian(rng: np.random.Generator, d: int) -> FullGaussian:
    return FullGaussian(rng.standard_normal(d), random_spd(rng, d))


def random_diag(rng: np.random.Generator, d: int, low: float = 0.2, high: float = 2.0) -> DiagGaussian:
    return DiagGaussian.of(rng.standard_normal(d), rng.uniform(low, high, d))


def random_bound_config(rng: np.random.Generator, d: int, low: float = 0.05, high: float = 2.0) -> RavenBoundConfig:
    return RavenBoundConfig(sigma_aug=rng.uniform(low, high, d).tolist(), latent_dim=d)


def _instance_rng(identity: str, instance_seed: int) -> np.random.Generator:
    return np.random.default_rng([instance_seed, zlib.crc32(identity.encode())])


def _sample_diag(rng: np.random.Generator, g: DiagGaussian, n: int) -> np.ndarray:
    return g.mean.data + np.sqrt(g.var.data) * rng.standard_normal((n, g.dim))


# ---------------------------------------------------------------------------
# individual identity checks; each returns (error, passed)
# ---------------------------------------------------------------------------

def check_paired_prior(rng: np.random.Generator, d: int) -> Tuple[float, bool]:
    sigma_aug = rng.uniform(0.0016, 2.0, d) if d > 1 else rng.uniform(0.05, 2.0, d)
    z = rng.standard_normal(d)
    z_prime = z + np.sqrt(sigma_aug) * rng.standard_normal(d)
    closed = paired_prior_log_density(z, z_prime, sigma_aug).item()
    error = abs(closed - paired_prior_by_quadrature(z, z_prime, sigma_aug))
    return error, error < 1e-6


def check_gmm_paired_prior(rng: np.random.Generator, components: int, d: int) -> Tuple[float, bool]:
    weights = rng.dirichlet(np.ones(components))
    means = 1.5 * rng.standard_normal((components, d))
    variances = rng.uniform(0.3, 1.5, (components, d))
    prior = GmmPrior.from_moments(weights, means, variances)
    sigma_aug = rng.uniform(0.05, 1.5, d)
    z = rng.standard_normal(d)
    z_prime = z + np.sqrt(sigma_aug) * rng.standard_normal(d)
    closed = gmm_paired_prior_log_density(z, z_prime, sigma_aug, prior).item()
    error = abs(closed - paired_prior_by_quadrature(z, z_prime, sigma_aug, weights, means, variances))
    return error, error < 1e-6


def check_term3_decomposition(rng: np.random.Generator) -> Tuple[float, bool]:
    d = int(rng.integers(1, 6))
    cfg = random_bound_config(rng, d, 0.01, 4.0)
    qx, qxp = random_diag(rng, d), random_diag(rng, d)
    a, b = term3(qx, qxp, cfg).item(), term3_decomposed(qx, qxp, cfg).item()
    error = abs(a - b) / max(1.0, abs(a))
    return error, error < 1e-10


def check_parallel_sum(rng: np.random.Generator) -> Tuple[float, bool]:
    d = int(rng.integers(1, 6))
    x, y = random_spd(rng, d), random_spd(rng, d)
    a, b = parallel_sum(x, y, "inverse"), parallel_sum(x, y, "product")
    error = float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a))))
    return error, error < 1e-10


def check_gaussian_product(rng: np.random.Generator, points: int = 50) -> Tuple[float, bool]:
    a, b = random_full_gaussian(rng, 3), random_full_gaussian(rng, 3)
    c, log_scale = gaussian_product(a, b)
    x = rng.standard_normal((points, 3))
    lhs = log_density(a, x) + log_density(b, x)
    rhs = log_density(c, x) + log_scale
    error = float(np.max(np.abs(lhs - rhs)))
    return error, error < 1e-10


def check_quadratic_form(rng: np.random.Generator, samples: int) -> Tuple[float, bool]:
    d = int(rng.integers(1, 6))
    g = random_full_gaussian(rng, d)
    b = rng.standard_normal((d, d))
    A = 0.5 * (b + b.T)
    shift = rng.standard_normal(d)
    closed = expected_quadratic_form(A, g, shift)

    def draw(r):
        c = g.sample(r, samples) - shift
        return np.einsum("ni,ij,nj->n", c, A, c)

    return mc_agrees(closed, draw, rng)


def check_cross_entropy(rng: np.random.Generator, samples: int) -> Tuple[float, bool]:
    d = int(rng.integers(1, 6))
    a, b = random_full_gaussian(rng, d), random_full_gaussian(rng, d)
    return mc_agrees(cross_entropy(a, b), lambda r: -log_density(b, a.sample(r, samples)), rng)


def check_entropy(rng: np.random.Generator, samples: int) -> Tuple[float, bool]:
    a = random_full_gaussian(rng, int(rng.integers(1, 6)))
    return mc_agrees(entropy(a), lambda r: -log_density(a, a.sample(r, samples)), rng)


def check_kl_diag(rng: np.random.Generator, samples: int) -> Tuple[float, bool]:
    d = int(rng.integers(1, 6))
    q, p = random_diag(rng, d), random_diag(rng, d)

    def draw(r):
        x = _sample_diag(r, q, samples)
        return _log_normal(x, q.mean.data, q.var.data) - _log_normal(x, p.mean.data, p.var.data)

    return mc_agrees(kl_diag(q, p).item(), draw, rng)


def _pair_instance(rng: np.random.Generator):
    d = int(rng.integers(1, 6))
    return random_bound_config(rng, d), random_diag(rng, d), random_diag(rng, d)


def _paired_prior_log(z: np.ndarray, z_prime: np.ndarray, s: np.ndarray) -> np.ndarray:
    return _log_normal(z - z_prime, 0.0, 2.0 * s) + _log_normal(0.5 * (z + z_prime), 0.0, 1.0 + 0.5 * s)


def check_raven_kl(rng: np.random.Generator, samples: int) -> Tuple[float, bool]:
    cfg, qx, qxp = _pair_instance(rng)
    s = cfg.sigma_aug_array()

    def draw(r):
        z, zp = _sample_diag(r, qx, samples), _sample_diag(r, qxp, samples)
        log_q = _log_normal(z, qx.mean.data, qx.var.data) + _log_normal(zp, qxp.mean.data, qxp.var.data)
        return _paired_prior_log(z, zp, s) - log_q

    return mc_agrees(raven_kl_term(qx, qxp, cfg).item(), draw, rng)


def check_expectation_pieces(rng: np.random.Generator, samples: int) -> Dict[str, Tuple[float, bool]]:
    cfg, qx, qxp = _pair_instance(rng)
    s = cfg.sigma_aug_array()

    def pair(r):
        return _sample_diag(r, qx, samples), _sample_diag(r, qxp, samples)

    def kernel(r):
        z, zp = pair(r)
        return _log_normal(z - zp, 0.0, 2.0 * s)

    def midpoint(r):
        z, zp = pair(r)
        return _log_normal(0.5 * (z + zp), 0.0, 1.0 + 0.5 * s)

    def pair_entropy(r):
        z, zp = pair(r)
        return -(_log_normal(z, qx.mean.data, qx.var.data) + _log_normal(zp, qxp.mean.data, qxp.var.data))

    return {
        "expected_log_difference_kernel_mc": mc_agrees(expected_log_difference_kernel(qx, qxp, cfg).item(), kernel, rng),
        "expected_log_midpoint_prior_mc": mc_agrees(expected_log_midpoint_prior(qx, qxp, cfg).item(), midpoint, rng),
        "posterior_pair_entropy_mc": mc_agrees(posterior_pair_entropy(qx, qxp).item(), pair_entropy, rng),
    }


def check_gmm_unit_collapse(rng: np.random.Generator) -> Tuple[float, bool]:
    """With a single standard-normal component the mixture bound is the unit bound"""
    cfg, qx, qxp = _pair_instance(rng)
    collapsed = (gmm_closed_terms(qx, qxp, cfg) + expected_log_midpoint_prior(qx, qxp, cfg)).item()
    error = abs(collapsed - raven_kl_term(qx, qxp, cfg).item())
    return error, error < 1e-10


def check_fixed_instance() -> Tuple[float, bool]:
    cfg = RavenBoundConfig(sigma_aug=[1.0], latent_dim=1)
    q = DiagGaussian.of([0.0], [1.0])
    expected = -0.5 * (math.log(3.0) - 2.0 / 3.0)
    error = abs(raven_kl_term(q, q, cfg).item() - expected)
    return error, error < 1e-6


def check_constant_offset(rng: np.random.Generator, draws: int) -> Tuple[float, bool]:
    """raven_kl_term + KL(q || N(0, I)) is constant when q(z'|x') = N(0, I)"""
    d = int(rng.integers(1, 6))
    cfg = RavenBoundConfig.isotropic(math.sqrt(GOLDEN_SIGMA_AUG), d)
    standard = DiagGaussian.standard(d)
    totals = []
    for _ in range(draws):
        qx = random_diag(rng, d, 0.1, 3.0)
        totals.append(raven_kl_term(qx, standard, cfg).item() + kl_diag(qx, standard).item())
    spread = float(np.var(totals))
    return spread, spread < 1e-10


def check_bound_gradient(rng: np.random.Generator, tol: float = 1e-4) -> Tuple[float, bool]:
    """Central differences against backward() for every parameter of a toy model"""
    arch = VaeArchitecture(input_dim=8, hidden_dims=(6,), latent_dim=2)
    model = VaeModel.initialize(arch, seed=int(rng.integers(1 << 31)))
    x = rng.uniform(0.0, 1.0, (4, 8))
    pair = (x, x + 0.05 * rng.standard_normal(x.shape))
    noise = (rng.standard_normal((4, 2)), rng.standard_normal((4, 2)))
    cfg = RavenBoundConfig.isotropic(0.3, 2)
    worst = 0.0
    for name in sorted(model.params):
        def objective(value: Tensor, name=name) -> Tensor:
            params = {**model.constants(), name: value}
            return raven_bound(pair, model, cfg, params=params, noise=noise).objective
        worst = max(worst, finite_diff_check(objective, model.params[name]))
    return worst, worst < tol


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------

def _instances(identity: str, seed: int, count: int) -> Iterator[Tuple[int, np.random.Generator]]:
    for i in range(count):
        instance_seed = seed * 100_000 + i
        yield instance_seed, _instance_rng(identity, instance_seed)


def run_verification_suite(seed: int = 0, size: Optional[SuiteSize] = None) -> List[OracleResult]:
    """Run every identity check and return one result row per instance

    Args:
        seed: Base seed; each instance derives its own generator from it
        size: Instance counts (full size by default)

    Returns:
        List of OracleResult rows in a fixed order
    """
    size = size or SuiteSize()
    rows: List[OracleResult] = []

    def record(identity, instance_seed, outcome, tolerance):
        error, passed = outcome
        rows.append(OracleResult(identity, instance_seed, float(error), tolerance, bool(passed)))

    for d in (1, 2):
        identity = f"paired_prior_quadrature_d{d}"
        for s, rng in _instances(identity, seed, size.quadrature_instances):
            record(identity, s, check_paired_prior(rng, d), 1e-6)
    for components in (1, 2, 3):
        for d in (1, 2):
            identity = f"gmm_paired_prior_quadrature_c{components}_d{d}"
            for s, rng in _instances(identity, seed, size.gmm_instances):
                record(identity, s, check_gmm_paired_prior(rng, components, d), 1e-6)

    exact = [("term3_decomposition", check_term3_decomposition, size.term3_instances),
             ("parallel_sum", check_parallel_sum, size.matrix_instances),
             ("gaussian_product_pointwise", check_gaussian_product, size.matrix_instances),
             ("gmm_unit_collapse", check_gmm_unit_collapse, size.matrix_instances)]
    for identity, check, count in exact:
        for s, rng in _instances(identity, seed, count):
            record(identity, s, check(rng), 1e-10)

    sampled = [("quadratic_form_mc", check_quadratic_form),
               ("cross_entropy_mc", check_cross_entropy),
               ("entropy_mc", check_entropy),
               ("kl_diag_mc", check_kl_diag),
               ("raven_kl_mc", check_raven_kl)]
    for identity, check in sampled:
        for s, rng in _instances(identity, seed, size.mc_instances):
            record(identity, s, check(rng, size.mc_samples), MC_SIGMAS)
    for s, rng in _instances("expectation_pieces", seed, size.mc_instances):
        for identity, outcome in check_expectation_pieces(rng, size.mc_samples).items():
            record(identity, s, outcome, MC_SIGMAS)

    record("raven_kl_fixed_instance", seed, check_fixed_instance(), 1e-6)
    for s, rng in _instances("kl_constant_offset", seed, 1):
        record("kl_constant_offset", s, check_constant_offset(rng, size.offset_draws), 1e-10)
    for s, rng in _instances("bound_gradient", seed, 1):
        record("bound_gradient", s, check_bound_gradient(rng), 1e-4)

    failed = [r for r in rows if not r.passed]
    logger.info("verification suite: %d checks, %d failed", len(rows), len(failed))
    for r in failed:
        logger.warning("identity %s failed at instance %d (error %.3g)", r.identity, r.instance_seed, r.error)
    return rows
