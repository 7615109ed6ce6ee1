"""Posterior prediction of the latent surface and summaries of the kernel field."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import covariance as cov
from .exceptions import DomainError, NumericalError
from .fields import LatticeSpec, kernel_ellipses
from .geometry import DEFAULT_AREA, foci_to_covariance_array, one_sd_radius
from .mcmc import Chain, Trace
from .model import SCALAR_PARAMS, Dataset, HyperPriors, ModelState

log = logging.getLogger(__name__)

QUANTILES = (0.025, 0.5, 0.975)


@dataclass
class PredictionGrid:
    lattice: LatticeSpec
    mean: np.ndarray
    sd: np.ndarray
    n_samples: int = 0
    skipped: int = 0

    def __post_init__(self):
        if len(self.mean) != self.lattice.size or len(self.sd) != self.lattice.size:
            raise DomainError("prediction arrays do not match the lattice size")


def draw_grid_psi(data_sites, grid_sites, state: ModelState, rng=None, mode: str = "draw"):
    """Foci at grid sites from their Gaussian-process conditional given the data-site foci.

    The joint correlation over data and grid sites is factorized once as
    ``[[L11, 0], [L21, L22]]``; the conditional mean is ``L21 L11^-1 psi_d``
    and a draw adds ``L22 u``.  ``mode="mean"`` returns the conditional mean.
    """
    if mode not in ("draw", "mean"):
        raise DomainError(f"unknown mode {mode!r}")
    data_sites = np.asarray(data_sites, float).reshape(-1, 2)
    grid_sites = np.asarray(grid_sites, float).reshape(-1, 2)
    n = len(data_sites)
    joint = cov.build_psi_correlation_matrix(np.vstack([data_sites, grid_sites]), state.tau_psi)
    l11, l21, l22 = joint.chol[:n, :n], joint.chol[n:, :n], joint.chol[n:, n:]
    w = cov.solve_lower(l11, np.column_stack([state.psi_x, state.psi_y]))
    psi = l21 @ w
    if mode == "draw":
        psi = psi + l22 @ rng.standard_normal((len(grid_sites), 2))
    return psi[:, 0], psi[:, 1]


def conditional_surface(data: Dataset, state: ModelState, grid_sites, grid_psi_x, grid_psi_y,
                        area: float = DEFAULT_AREA, include_nugget: bool = False):
    """Conditional mean and variance of ``mu + z`` at grid sites given the data.

    With ``include_nugget`` the measurement-error variance ``1/lambda_y`` is
    added, giving the predictive distribution of a new observation.
    """
    grid_sites = np.asarray(grid_sites, float).reshape(-1, 2)
    kd = foci_to_covariance_array(state.psi_x, state.psi_y, state.tau_z, area)
    kg = foci_to_covariance_array(grid_psi_x, grid_psi_y, state.tau_z, area)
    r_dd = cov.correlation_matrix(data.sites, kd)
    r_dg = cov.correlation_block(data.sites, kd, grid_sites, kg)
    v = r_dd / state.lambda_z
    v.flat[::data.n + 1] += 1.0 / state.lambda_y
    chol, _ = cov.cholesky_with_jitter(v)
    a = cov.solve_lower(chol, r_dg / state.lambda_z)
    resid = cov.solve_lower(chol, data.values - state.mu)
    mean = state.mu + a.T @ resid
    var = np.maximum(1.0 / state.lambda_z - np.sum(a * a, axis=0), 0.0)
    if include_nugget:
        var = var + 1.0 / state.lambda_y
    return mean, var


def predict_surface(data: Dataset, trace: Trace, grid: LatticeSpec, seed=0,
                    area: float = DEFAULT_AREA, psi_mode: str = "draw",
                    include_nugget: bool = False, max_skip_fraction: float = 0.05) -> PredictionGrid:
    """Posterior mean and sd of the surface on ``grid``, averaged over the trace.

    For each stored sample the grid foci are drawn by :func:`draw_grid_psi`
    (one generator seeded by ``seed`` serves all samples, in trace order)
    and the surface is conditioned on the data by
    :func:`conditional_surface`.  Means are averaged and variances combined
    by the law of total variance.

    Raises
    ------
    NumericalError
        If more than ``max_skip_fraction`` of the samples fail to factorize.
    """
    if len(trace) == 0:
        raise DomainError("trace is empty")
    if trace.samples[0].n != data.n:
        raise DomainError(f"trace has {trace.samples[0].n} sites but data has {data.n}")
    rng = np.random.default_rng(seed)
    sites = grid.sites()
    means, variances, skipped = [], [], 0
    for state in trace.samples:
        try:
            gx, gy = draw_grid_psi(data.sites, sites, state, rng, psi_mode)
            m, v = conditional_surface(data, state, sites, gx, gy, area, include_nugget)
        except NumericalError as exc:
            skipped += 1
            log.warning("skipping trace sample: %s", exc)
            if skipped > max_skip_fraction * len(trace):
                raise NumericalError(
                    f"{skipped} of {len(trace)} trace samples failed to factorize") from exc
            continue
        means.append(m)
        variances.append(v)
    means, variances = np.array(means), np.array(variances)
    mean = means.mean(axis=0)
    var = variances.mean(axis=0) + np.mean((means - mean) ** 2, axis=0)
    return PredictionGrid(grid, mean, np.sqrt(var), len(means), skipped)


# ---------------------------------------------------------------------------
# kernel summaries
# ---------------------------------------------------------------------------

@dataclass
class ModalKernels:
    psi_x: np.ndarray
    psi_y: np.ndarray
    ellipses: list
    objective: float
    history: list
    converged: bool
    sweeps: int


def _coordinate_ascent(chain: Chain, n: int, max_sweeps: int, rtol: float):
    history = [chain.log_post]
    for sweeps in range(1, max_sweeps + 1):
        for i in range(n):
            idx = np.array([i])
            current = chain.log_post

            def neg(v):
                try:
                    return -chain.evaluate_psi(idx, v[:1], v[1:])[0]
                except NumericalError:
                    return math.inf

            x0 = np.array([chain.state.psi_x[i], chain.state.psi_y[i]])
            res = optimize.minimize(neg, x0, method="Nelder-Mead",
                                    options={"xatol": 1e-7, "fatol": 1e-12,
                                             "initial_simplex": x0 + np.array([[0, 0], [0.1, 0], [0, 0.1]])})
            if res.fun < -current:
                _, pieces = chain.evaluate_psi(idx, res.x[:1], res.x[1:])
                chain.commit_psi(pieces)
        history.append(chain.log_post)
        if history[-1] - history[-2] <= rtol * abs(history[-2]):
            return history, True, sweeps
    return history, False, max_sweeps


def modal_kernels(data: Dataset, fixed_state: ModelState, tau_psi_fixed: float,
                  priors: HyperPriors | None = None, max_sweeps: int = 500, rtol: float = 1e-8,
                  shrink_factor: float = 4.0, starts=()) -> ModalKernels:
    """Maximize the log posterior over the foci with every other parameter held fixed.

    Cyclic coordinate ascent: each site's ``(psi_x, psi_y)`` pair is improved
    by a Nelder-Mead search.  A site's move is kept only if it raises the
    objective, so the objective never decreases.  Iteration stops when a
    sweep improves the objective by less than ``rtol`` relative, or after
    ``max_sweeps`` sweeps (``converged`` is then False).

    The search starts from zero foci.  Zero foci are always a stationary
    point (kernels depend on the foci quadratically) and may be a saddle that
    single-site moves cannot leave, so further ``(psi_x, psi_y)`` starting
    points may be given in ``starts``; the best end point is returned.
    """
    priors = priors or HyperPriors()
    zero = np.zeros(data.n)
    best = None
    for px, py in [(zero, zero), *starts]:
        start = fixed_state.with_(tau_psi=float(tau_psi_fixed), psi_x=np.array(px, dtype=float),
                                  psi_y=np.array(py, dtype=float))
        try:
            chain = Chain(data, priors, start, fixed=("tau_psi",))
        except NumericalError:
            continue
        history, converged, sweeps = _coordinate_ascent(chain, data.n, max_sweeps, rtol)
        if best is None or chain.log_post > best[0].log_post:
            best = (chain, history, converged, sweeps)
    chain, history, converged, sweeps = best
    if not converged:
        log.warning("modal kernel search stopped after %d sweeps without converging", sweeps)
    s = chain.state
    kernels = foci_to_covariance_array(s.psi_x, s.psi_y, s.tau_z, priors.area)
    return ModalKernels(s.psi_x.copy(), s.psi_y.copy(),
                        kernel_ellipses(data.sites, kernels, shrink_factor),
                        chain.log_post, history, converged, sweeps)


def radial_average_ellipses(trace: Trace, site_index: int, n_angles: int = 72,
                            area: float = DEFAULT_AREA) -> np.ndarray:
    """Mean one-sd ellipse radius per direction at one site across the trace.

    Returns an ``(n_angles, 2)`` array of ``(angle, mean radius)`` with angles
    ``2 pi k / n_angles``.
    """
    if len(trace) == 0:
        raise DomainError("trace is empty")
    if n_angles < 8:
        raise DomainError("n_angles must be at least 8")
    angles = 2.0 * math.pi * np.arange(n_angles) / n_angles
    radii = np.zeros(n_angles)
    for s in trace.samples:
        k = foci_to_covariance_array(s.psi_x[site_index], s.psi_y[site_index], s.tau_z, area)
        radii += one_sd_radius(k, angles)[0]
    return np.column_stack([angles, radii / len(trace)])


@dataclass
class KernelSummary:
    mean_foci: list
    radial: list
    shrink_factor: float
    modal: dict = field(default_factory=dict)


def mean_foci_ellipses(data: Dataset, trace: Trace, area: float = DEFAULT_AREA,
                       shrink_factor: float = 4.0) -> list:
    """Ellipses at the posterior-mean foci and posterior-mean ``tau_z``."""
    px = trace.psi_matrix("psi_x").mean(axis=0)
    py = trace.psi_matrix("psi_y").mean(axis=0)
    kernels = foci_to_covariance_array(px, py, float(trace.column("tau_z").mean()), area)
    return kernel_ellipses(data.sites, kernels, shrink_factor)


def kernel_summary(data: Dataset, trace: Trace, priors: HyperPriors | None = None,
                   modal_tau_psi=(), n_angles: int = 72, shrink_factor: float = 4.0,
                   max_sweeps: int = 500) -> KernelSummary:
    """Posterior-mean-foci ellipses, radial averages and optional modal kernels.

    Radial profiles are unscaled; divide by ``shrink_factor`` for display.
    Modal kernels are computed for each value in ``modal_tau_psi`` with the
    scalar parameters at their posterior means, starting from zero foci and
    from the posterior-mean foci.
    """
    priors = priors or HyperPriors()
    radial = [radial_average_ellipses(trace, i, n_angles, priors.area) for i in range(data.n)]
    summary = KernelSummary(mean_foci_ellipses(data, trace, priors.area, shrink_factor),
                            radial, shrink_factor)
    if modal_tau_psi:
        means = {p: float(trace.column(p).mean()) for p in SCALAR_PARAMS}
        state = ModelState(**means, psi_x=np.zeros(data.n), psi_y=np.zeros(data.n))
        mean_px = trace.psi_matrix("psi_x").mean(axis=0)
        mean_py = trace.psi_matrix("psi_y").mean(axis=0)
        for t in modal_tau_psi:
            summary.modal[float(t)] = modal_kernels(data, state, t, priors, max_sweeps,
                                                    shrink_factor=shrink_factor,
                                                    starts=[(mean_px, mean_py)])
    return summary


# ---------------------------------------------------------------------------
# posterior summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Summary:
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float


def summarize_values(values) -> Summary:
    """Mean, sd and quantiles of a sample.

    Quantiles interpolate linearly between order statistics: the ``p``
    quantile of ``m`` sorted values sits at 1-based position ``p (m - 1) + 1``.
    The sd uses ``m - 1`` in the denominator (0 for a single value).
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise DomainError("cannot summarize an empty sample")
    if np.all(v == v[0]):
        c = float(v[0])
        return Summary(c, 0.0, c, c, c)
    q = np.quantile(v, QUANTILES, method="linear")
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return Summary(float(np.mean(v)), sd, float(q[0]), float(q[1]), float(q[2]))


def posterior_summaries(trace: Trace) -> dict:
    """Summaries keyed by parameter name, scalars first, then ``psi_x[i]``, ``psi_y[i]``."""
    if len(trace) == 0:
        raise DomainError("trace is empty")
    out = {p: summarize_values(trace.column(p)) for p in SCALAR_PARAMS}
    for which in ("psi_x", "psi_y"):
        m = trace.psi_matrix(which)
        for i in range(m.shape[1]):
            out[f"{which}[{i}]"] = summarize_values(m[:, i])
    return out
