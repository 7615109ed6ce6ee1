"""Hierarchical model for log concentrations with a non-stationary spatial term.

    y = mu * 1 + z + eps,           eps ~ N(0, I / lambda_y)
    z | lambda_z, tau_z, psi        ~ N(0, R_z(tau_z, psi) / lambda_z)
    psi_x, psi_y | tau_psi          ~ N(0, R_psi(tau_psi))      (independently)
    lambda_y ~ Gamma(a_y, b_y),  lambda_z ~ Gamma(a_z, b_z)     (shape, rate)
    mu flat,  tau_z ~ U(l_z, u_z),  tau_psi ~ U(l_psi, u_psi)

The latent surface ``z`` is integrated out, leaving
``y ~ N(mu * 1, R_z / lambda_z + I / lambda_y)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from . import covariance as cov
from .exceptions import DomainError
from .geometry import DEFAULT_AREA, foci_to_covariance_array

SCALAR_PARAMS = ("mu", "lambda_y", "lambda_z", "tau_z", "tau_psi")


@dataclass(frozen=True)
class Dataset:
    sites: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        sites = np.asarray(self.sites, dtype=float).reshape(-1, 2)
        values = np.asarray(self.values, dtype=float).ravel()
        if len(sites) < 1 or len(sites) != len(values):
            raise DomainError("dataset needs n >= 1 sites with one value each")
        if not (np.all(np.isfinite(sites)) and np.all(np.isfinite(values))):
            raise DomainError("dataset contains non-finite numbers")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return len(self.values)

    def permuted(self, order) -> "Dataset":
        return Dataset(self.sites[order], self.values[order])


@dataclass(frozen=True)
class HyperPriors:
    """Gamma (shape, rate) hyperparameters and uniform bounds for the ranges."""

    a_y: float = 0.1
    b_y: float = 0.1
    a_z: float = 0.1
    b_z: float = 0.1
    tau_z_bounds: tuple = (3.0, 200.0)
    tau_psi_bounds: tuple = (3.0, 200.0)
    area: float = DEFAULT_AREA

    def __post_init__(self):
        for name in ("a_y", "b_y", "a_z", "b_z", "area"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        for name in ("tau_z_bounds", "tau_psi_bounds"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise DomainError(f"{name} must satisfy 0 < lower < upper")
            object.__setattr__(self, name, (float(lo), float(hi)))


@dataclass(frozen=True)
class ModelState:
    mu: float
    lambda_y: float
    lambda_z: float
    tau_z: float
    tau_psi: float
    psi_x: np.ndarray = field(repr=False)
    psi_y: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("psi_x", "psi_y"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if len(self.psi_x) != len(self.psi_y):
            raise DomainError("psi_x and psi_y differ in length")
        if not (self.lambda_y > 0 and self.lambda_z > 0 and self.tau_z > 0 and self.tau_psi > 0):
            raise DomainError("precisions and ranges must be positive")

    @property
    def n(self) -> int:
        return len(self.psi_x)

    def with_(self, **changes) -> "ModelState":
        return replace(self, **changes)

    def permuted(self, order) -> "ModelState":
        return replace(self, psi_x=self.psi_x[order], psi_y=self.psi_y[order])

    def scalars(self) -> dict:
        return {p: float(getattr(self, p)) for p in SCALAR_PARAMS}


def initial_state(data: Dataset, priors: HyperPriors) -> ModelState:
    """Starting point: interval midpoints, prior means, sample mean, zero foci."""
    return ModelState(
        mu=float(np.mean(data.values)),
        lambda_y=priors.a_y / priors.b_y,
        lambda_z=priors.a_z / priors.b_z,
        tau_z=0.5 * sum(priors.tau_z_bounds),
        tau_psi=0.5 * sum(priors.tau_psi_bounds),
        psi_x=np.zeros(data.n),
        psi_y=np.zeros(data.n),
    )


def gamma_logpdf(x: float, shape: float, rate: float) -> float:
    if x <= 0:
        return -math.inf
    return shape * math.log(rate) - gammaln(shape) + (shape - 1.0) * math.log(x) - rate * x


def kernels_for(state: ModelState, area: float = DEFAULT_AREA) -> np.ndarray:
    return foci_to_covariance_array(state.psi_x, state.psi_y, state.tau_z, area)


def spatial_correlation(data: Dataset, state: ModelState, area: float = DEFAULT_AREA) -> np.ndarray:
    """Unfactorized ``R_z(tau_z, psi)`` at the data sites."""
    if state.n != data.n:
        raise DomainError(f"state has {state.n} foci but data has {data.n} sites")
    return cov.correlation_matrix(data.sites, kernels_for(state, area))


def loglik_from_correlation(y, mu, lambda_y, lambda_z, rz) -> float:
    """Gaussian log density of ``y`` under ``N(mu, rz / lambda_z + I / lambda_y)``."""
    v = rz / lambda_z
    v.flat[::v.shape[0] + 1] += 1.0 / lambda_y
    chol, _ = cov.cholesky_with_jitter(v)
    return cov.mvn_logpdf_chol(np.asarray(y) - mu, chol)


def marginal_loglik(data: Dataset, state: ModelState, area: float = DEFAULT_AREA) -> float:
    """Log likelihood of the observations with the latent surface integrated out.

    Raises
    ------
    NumericalError
        If the marginal covariance cannot be factorized within the jitter cap.
    """
    rz = spatial_correlation(data, state, area)
    return loglik_from_correlation(data.values, state.mu, state.lambda_y, state.lambda_z, rz)


def psi_log_prior(psi_x, psi_y, psi_corr: cov.CorrelationMatrix) -> float:
    """Sum of the two ``N(0, R_psi)`` log densities, normalizing constant included."""
    w = cov.solve_lower(psi_corr.chol, np.column_stack([psi_x, psi_y]))
    n = len(psi_x)
    return float(-0.5 * np.sum(w * w) - psi_corr.logdet() - n * math.log(2.0 * math.pi))


def scalar_log_prior(state: ModelState, priors: HyperPriors, fixed=()) -> float:
    """Gamma and uniform terms; a parameter listed in ``fixed`` contributes nothing."""
    lp = 0.0
    if "lambda_y" not in fixed:
        lp += gamma_logpdf(state.lambda_y, priors.a_y, priors.b_y)
    if "lambda_z" not in fixed:
        lp += gamma_logpdf(state.lambda_z, priors.a_z, priors.b_z)
    for name, (lo, hi) in (("tau_z", priors.tau_z_bounds), ("tau_psi", priors.tau_psi_bounds)):
        if name in fixed:
            continue
        value = getattr(state, name)
        if not lo <= value <= hi:
            return -math.inf
        lp -= math.log(hi - lo)
    return lp


def log_prior(state: ModelState, priors: HyperPriors, psi_corr: cov.CorrelationMatrix | None = None,
              sites=None, fixed=()) -> float:
    """Joint log prior density of every non-integrated parameter.

    ``mu`` has a flat prior and contributes zero.  ``psi_corr`` must be
    ``R_psi`` for ``state.tau_psi``; it is built from ``sites`` when omitted.
    Parameters named in ``fixed`` are conditioned on and their own prior
    terms are skipped, which lets a run hold ``tau_psi`` outside its bounds.
    """
    lp = scalar_log_prior(state, priors, fixed)
    if lp == -math.inf:
        return lp
    if psi_corr is None:
        if sites is None:
            raise DomainError("need psi_corr or sites")
        psi_corr = cov.build_psi_correlation_matrix(sites, state.tau_psi)
    if "psi" not in fixed:
        lp += psi_log_prior(state.psi_x, state.psi_y, psi_corr)
    return lp


def log_posterior(data: Dataset, state: ModelState, priors: HyperPriors, fixed=()) -> float:
    """Unnormalized log posterior; ``-inf`` for states outside the prior support."""
    lp = scalar_log_prior(state, priors, fixed)
    if lp == -math.inf:
        return lp
    return log_prior(state, priors, sites=data.sites, fixed=fixed) + \
        marginal_loglik(data, state, priors.area)
