"""Metropolis / Metropolis-Hastings sampling of the hierarchical model.

One sweep updates, in order, ``mu``, ``log lambda_y``, ``log lambda_z``,
``tau_z`` and ``tau_psi`` by scalar random walks, then the foci in blocks of
``psi_block_size`` consecutive sites.  A focus block steps along the
conditional prior covariance of that block given the other sites, so a
one-site block moves on the scale of its conditional prior sd and a block of
every site moves in the shape of the prior itself.  Precisions move on the log scale and
the proposal Jacobian enters the acceptance ratio.  Proposal scales may be
tuned by Robbins-Monro during burn-in only and are frozen afterwards.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import covariance as cov
from .exceptions import DomainError, NumericalError, SamplerAbort
from .geometry import _foci_packed
from .model import (SCALAR_PARAMS, Dataset, HyperPriors, ModelState, initial_state,
                    kernels_for, loglik_from_correlation, psi_log_prior, scalar_log_prior)

log = logging.getLogger(__name__)

BLOCKS = SCALAR_PARAMS + ("psi",)
LOG_SCALE_PARAMS = ("lambda_y", "lambda_z")
TARGET_ACCEPT = {**{p: 0.44 for p in SCALAR_PARAMS}, "psi": 0.23}
MAX_FAILURE_FRACTION = 0.01


@dataclass
class SamplerConfig:
    n_iter: int = 2000
    burn_in: int = 1000
    thin: int = 1
    scale_mu: float = 0.2
    scale_lambda_y: float = 0.3
    scale_lambda_z: float = 0.3
    scale_tau_z: float = 2.0
    scale_tau_psi: float = 5.0
    scale_psi: float = 0.3
    psi_block_size: int = 1
    seed: int = 0
    adapt_window: int = 50
    # parameter name -> value held fixed; "psi" takes a (psi_x, psi_y) pair
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_iter < 1:
            raise DomainError("n_iter must be at least 1")
        if not 0 <= self.burn_in < self.n_iter:
            raise DomainError("burn_in must satisfy 0 <= burn_in < n_iter")
        if self.thin < 1 or self.psi_block_size < 1 or self.adapt_window < 0:
            raise DomainError("thin and psi_block_size must be >= 1, adapt_window >= 0")
        for p in BLOCKS:
            if not self.scale(p) > 0:
                raise DomainError(f"proposal scale for {p} must be positive")
        unknown = set(self.fixed) - set(BLOCKS)
        if unknown:
            raise DomainError(f"cannot fix unknown parameters {sorted(unknown)}")

    def scale(self, param: str) -> float:
        return getattr(self, f"scale_{param}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed"] = {k: (np.asarray(v).tolist() if k == "psi" else float(v))
                      for k, v in self.fixed.items()}
        return d


@dataclass
class Trace:
    samples: list
    log_posts: np.ndarray
    iterations: np.ndarray
    accepted: dict
    proposals: dict
    seed: int
    config: dict
    final_scales: dict = field(default_factory=dict)
    factorization_failures: int = 0

    def __len__(self):
        return len(self.samples)

    @property
    def acceptance_rates(self) -> dict:
        return {b: (self.accepted[b] / self.proposals[b] if self.proposals[b] else float("nan"))
                for b in self.proposals}

    @property
    def rejected(self) -> dict:
        return {b: self.proposals[b] - self.accepted[b] for b in self.proposals}

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.samples], dtype=float)

    def psi_matrix(self, which: str) -> np.ndarray:
        """Foci of every stored sample, shape ``(n_samples, n_sites)``."""
        return np.array([getattr(s, which) for s in self.samples], dtype=float)


class Chain:
    """Current state plus the cached pieces of its log posterior."""

    def __init__(self, data: Dataset, priors: HyperPriors, state: ModelState, fixed=()):
        if state.n != data.n:
            raise DomainError(f"state has {state.n} foci but data has {data.n} sites")
        self.data = data
        self.priors = priors
        self.fixed = frozenset(fixed)
        self.failures = 0
        self.state = state
        self.kernels = kernels_for(state, priors.area)
        self.rz = cov.correlation_matrix(data.sites, self.kernels)
        self.psi_corr = cov.build_psi_correlation_matrix(data.sites, state.tau_psi)
        self.loglik = loglik_from_correlation(data.values, state.mu, state.lambda_y,
                                              state.lambda_z, self.rz)
        self.scalar_prior = scalar_log_prior(state, priors, self.fixed)
        self.psi_prior = self._psi_prior(state.psi_x, state.psi_y, self.psi_corr)
        self._step_factors, self._precision = {}, None

    @property
    def log_post(self) -> float:
        return self.loglik + self.scalar_prior + self.psi_prior

    def _psi_prior(self, px, py, psi_corr):
        return 0.0 if "psi" in self.fixed else psi_log_prior(px, py, psi_corr)

    def _loglik(self, state, rz):
        return loglik_from_correlation(self.data.values, state.mu, state.lambda_y,
                                       state.lambda_z, rz)

    def _accept(self, log_alpha, rng) -> bool:
        return log_alpha >= 0 or math.log(rng.random()) < log_alpha

    def propose_scalar(self, param: str, scale: float, rng) -> bool:
        s = self.state
        step = scale * rng.standard_normal()
        old = getattr(s, param)
        if param in LOG_SCALE_PARAMS:
            new, log_jac = old * math.exp(step), step
        else:
            new, log_jac = old + step, 0.0
        if not math.isfinite(new) or (param != "mu" and new <= 0):
            return False
        proposed = s.with_(**{param: new})
        scalar_prior = scalar_log_prior(proposed, self.priors, self.fixed)
        if scalar_prior == -math.inf:
            return False
        kernels, rz, loglik = self.kernels, self.rz, self.loglik
        psi_corr, psi_prior = self.psi_corr, self.psi_prior
        try:
            if param == "tau_psi":
                psi_corr = cov.build_psi_correlation_matrix(self.data.sites, new)
                psi_prior = self._psi_prior(s.psi_x, s.psi_y, psi_corr)
            else:
                if param == "tau_z":
                    kernels = kernels_for(proposed, self.priors.area)
                    rz = cov.correlation_matrix(self.data.sites, kernels)
                loglik = self._loglik(proposed, rz)
        except NumericalError:
            self.failures += 1
            return False
        new_post = loglik + scalar_prior + psi_prior
        if not self._accept(new_post - self.log_post + log_jac, rng):
            return False
        self.state, self.kernels, self.rz, self.loglik = proposed, kernels, rz, loglik
        if psi_corr is not self.psi_corr:
            self._step_factors, self._precision = {}, None
        self.scalar_prior, self.psi_corr, self.psi_prior = scalar_prior, psi_corr, psi_prior
        return True

    def psi_step_factor(self, idx) -> np.ndarray:
        """Lower factor of the prior covariance of the block ``idx`` given the rest."""
        key = tuple(int(i) for i in idx)
        f = self._step_factors.get(key)
        if f is None:
            n = self.data.n
            if len(key) == n:
                f = self.psi_corr.chol
            else:
                if self._precision is None:
                    w = cov.solve_lower(self.psi_corr.chol, np.eye(n))
                    self._precision = w.T @ w
                f = np.linalg.cholesky(np.linalg.inv(self._precision[np.ix_(key, key)]))
            self._step_factors[key] = f
        return f

    def evaluate_psi(self, idx, new_x, new_y):
        """Log posterior and cache pieces with the foci at ``idx`` replaced."""
        s = self.state
        px, py = s.psi_x.copy(), s.psi_y.copy()
        px[idx], py[idx] = new_x, new_y
        proposed = s.with_(psi_x=px, psi_y=py)
        kernels = self.kernels.copy()
        kernels[idx] = _foci_packed(px[idx], py[idx], s.tau_z, self.priors.area)
        sites = self.data.sites
        rows = cov._correlation_block(sites[idx], kernels[idx], sites, kernels)
        rz = self.rz.copy()
        rz[idx, :] = rows
        rz[:, idx] = rows.T
        loglik = self._loglik(proposed, rz)
        psi_prior = self._psi_prior(px, py, self.psi_corr)
        return loglik + self.scalar_prior + psi_prior, (proposed, kernels, rz, loglik, psi_prior)

    def commit_psi(self, pieces):
        self.state, self.kernels, self.rz, self.loglik, self.psi_prior = pieces

    def propose_psi_block(self, idx, scale: float, rng) -> bool:
        idx = np.asarray(idx, dtype=int)
        s = self.state
        steps = scale * rng.standard_normal((2, len(idx))) @ self.psi_step_factor(idx).T
        try:
            new_post, pieces = self.evaluate_psi(idx, s.psi_x[idx] + steps[0],
                                                 s.psi_y[idx] + steps[1])
        except NumericalError:
            self.failures += 1
            return False
        if not self._accept(new_post - self.log_post, rng):
            return False
        self.commit_psi(pieces)
        return True


def mh_update_scalar(chain: Chain, param_id: str, proposal_scale: float, rng):
    """One random-walk update of a scalar parameter of ``chain``.

    Returns
    -------
    (ModelState, bool)
        The chain's state after the step and whether the proposal was accepted.
    """
    if param_id not in SCALAR_PARAMS:
        raise DomainError(f"unknown scalar parameter {param_id!r}")
    accepted = chain.propose_scalar(param_id, proposal_scale, rng)
    return chain.state, accepted


def mh_update_psi_block(chain: Chain, site_indices, proposal_scale: float, rng):
    """Jointly perturb the foci at ``site_indices`` and accept or reject once."""
    accepted = chain.propose_psi_block(site_indices, proposal_scale, rng)
    return chain.state, accepted


def _apply_fixed(state: ModelState, fixed: dict) -> ModelState:
    changes = {}
    for name, value in fixed.items():
        if name == "psi":
            px, py = value
            changes["psi_x"], changes["psi_y"] = np.asarray(px, float), np.asarray(py, float)
        else:
            changes[name] = float(value)
    return state.with_(**changes) if changes else state


def run_chain(data: Dataset, priors: HyperPriors, config: SamplerConfig,
              initial: ModelState | None = None) -> Trace:
    """Run one chain and return the thinned post-burn-in samples.

    Raises
    ------
    SamplerAbort
        If more than 1% of proposals hit factorization failures.
    """
    state = initial if initial is not None else initial_state(data, priors)
    state = _apply_fixed(state, config.fixed)
    chain = Chain(data, priors, state, fixed=config.fixed.keys())
    if not math.isfinite(chain.log_post):
        raise DomainError("initial state has zero posterior density")

    rng = np.random.default_rng(config.seed)
    free = [p for p in BLOCKS if p not in config.fixed]
    blocks = [np.arange(i, min(i + config.psi_block_size, data.n))
              for i in range(0, data.n, config.psi_block_size)]
    log_scales = {p: math.log(config.scale(p)) for p in free}
    accepted = {p: 0 for p in free}
    proposals = {p: 0 for p in free}
    window_acc = {p: 0 for p in free}
    window_prop = {p: 0 for p in free}
    n_adapt = 0
    total_proposals = 0

    samples, log_posts, iterations = [], [], []
    for it in range(config.n_iter):
        burning = it < config.burn_in
        for p in free:
            scale = math.exp(log_scales[p])
            if p == "psi":
                outcomes = [chain.propose_psi_block(b, scale, rng) for b in blocks]
            else:
                outcomes = [chain.propose_scalar(p, scale, rng)]
            total_proposals += len(outcomes)
            if burning:
                window_acc[p] += sum(outcomes)
                window_prop[p] += len(outcomes)
            else:
                accepted[p] += sum(outcomes)
                proposals[p] += len(outcomes)

        if total_proposals >= 100 and chain.failures > MAX_FAILURE_FRACTION * total_proposals:
            raise SamplerAbort(
                f"{chain.failures} factorization failures in {total_proposals} proposals "
                f"by iteration {it}; last state {chain.state}")

        if burning and config.adapt_window and (it + 1) % config.adapt_window == 0:
            n_adapt += 1
            gain = 1.0 / math.sqrt(n_adapt)
            for p in free:
                rate = window_acc[p] / max(window_prop[p], 1)
                log_scales[p] += gain * (rate - TARGET_ACCEPT[p])
                window_acc[p] = window_prop[p] = 0

        if not burning and (it - config.burn_in) % config.thin == 0:
            samples.append(chain.state)
            log_posts.append(chain.log_post)
            iterations.append(it)

    if chain.failures:
        log.warning("%d factorization failures were treated as rejections", chain.failures)
    return Trace(samples, np.array(log_posts), np.array(iterations), accepted, proposals,
                 config.seed, config.to_dict(),
                 {p: math.exp(v) for p, v in log_scales.items()}, chain.failures)
