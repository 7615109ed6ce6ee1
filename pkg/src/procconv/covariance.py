"""Correlation functions induced by Gaussian smoothing kernels.

For kernels ``k_s = N(. ; s, S_s)`` the overlap integral
``int k_s(u) k_t(u) du`` equals the normal density ``N(s - t; 0, S_s + S_t)``.
Dividing by the square roots of the two self-overlaps gives a correlation
with unit diagonal::

    rho(s, t) = 2 |S_s|^(1/4) |S_t|^(1/4) |S_s + S_t|^(-1/2)
                * exp(-(s - t)^T (S_s + S_t)^(-1) (s - t) / 2)

Correlation matrices built from any family of kernels are positive
semi-definite by construction; a small diagonal jitter is added only to
absorb rounding when the matrix is numerically singular.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg.lapack import dpotrf, dtrtrs

from .exceptions import DomainError, NumericalError, PreconditionError
from .geometry import Covariance2x2, check_positive_definite, pack

JITTER_START = 1e-12
JITTER_FACTOR = 10.0
JITTER_CAP = 1e-8


@dataclass
class CorrelationMatrix:
    """Dense correlation matrix with the Cholesky factor of ``matrix + jitter*I``."""

    matrix: np.ndarray
    chol: np.ndarray
    jitter_applied: float = 0.0

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def mvn_logpdf(self, x) -> float:
        """Log density of ``N(0, matrix + jitter*I)`` at ``x``."""
        return mvn_logpdf_chol(x, self.chol)


def cholesky_with_jitter(a: np.ndarray, start=JITTER_START, factor=JITTER_FACTOR,
                         cap=JITTER_CAP):
    """Lower Cholesky factor of ``a``, adding diagonal jitter on failure.

    The plain factorization is tried first.  On failure ``start`` is added to
    the diagonal and multiplied by ``factor`` on each retry; once the next
    jitter would exceed ``cap`` a :class:`NumericalError` is raised carrying
    the smallest eigenvalue of ``a``.

    Returns
    -------
    chol : ndarray
    jitter : float
    """
    chol, info = dpotrf(a, lower=1, clean=1)
    if info == 0:
        return chol, 0.0
    if info < 0:
        raise DomainError("matrix passed to Cholesky is malformed")
    jitter = start
    eye = np.eye(a.shape[0])
    while jitter <= cap * (1.0 + 1e-9):
        chol, info = dpotrf(a + jitter * eye, lower=1, clean=1)
        if info == 0:
            return chol, jitter
        jitter *= factor
    try:
        min_eig = float(np.linalg.eigvalsh(a)[0])
    except np.linalg.LinAlgError:
        min_eig = float("nan")
    raise NumericalError(
        f"Cholesky failed with jitter up to {cap:g}; smallest eigenvalue ~ {min_eig:.3e}",
        min_eigenvalue=min_eig,
    )


def mvn_logpdf_chol(x, chol) -> float:
    """Log density of ``N(0, L L^T)`` at ``x`` given the lower factor ``L``."""
    x = np.asarray(x, dtype=float)
    w = solve_lower(chol, x)
    return float(-0.5 * np.sum(w * w) - np.sum(np.log(np.diag(chol)))
                 - 0.5 * w.shape[0] * math.log(2.0 * math.pi))


def solve_lower(chol, b):
    """Solve ``L w = b`` for lower-triangular ``L`` (``b`` may have several columns)."""
    w, info = dtrtrs(chol, b, lower=1)
    if info != 0:
        raise NumericalError("triangular solve failed: singular factor")
    return w


def _as_points(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        p = p.reshape(1, 2)
    if p.ndim != 2 or p.shape[1] != 2:
        raise DomainError(f"sites must have shape (n, 2), got {p.shape}")
    return p


def correlation_block(sites_a, kernels_a, sites_b, kernels_b) -> np.ndarray:
    """Pairwise non-stationary correlations between two site sets.

    ``kernels_a`` and ``kernels_b`` are packed ``(n, 3)`` arrays (or
    sequences of :class:`Covariance2x2`).  Returns shape ``(na, nb)``.
    """
    xa, xb = _as_points(sites_a), _as_points(sites_b)
    ka, kb = pack(kernels_a), pack(kernels_b)
    if len(ka) != len(xa) or len(kb) != len(xb):
        raise DomainError("sites and kernels must have equal length")
    return _correlation_block(xa, ka, xb, kb)


def _correlation_block(xa, ka, xb, kb):
    s11 = ka[:, 0:1] + kb[None, :, 0]
    s12 = ka[:, 1:2] + kb[None, :, 1]
    s22 = ka[:, 2:3] + kb[None, :, 2]
    det = s11 * s22 - s12 * s12
    root_a = np.sqrt(ka[:, 0] * ka[:, 2] - ka[:, 1] ** 2)
    root_b = np.sqrt(kb[:, 0] * kb[:, 2] - kb[:, 1] ** 2)
    # sqrt(sqrt(da) * sqrt(db)) collapses to sqrt(da) exactly when da == db,
    # which keeps the self-correlation at exactly 1
    pref = 2.0 * np.sqrt(root_a[:, None] * root_b[None, :]) / np.sqrt(det)
    dx = xa[:, 0:1] - xb[None, :, 0]
    dy = xa[:, 1:2] - xb[None, :, 1]
    quad = (s22 * dx * dx - 2.0 * s12 * dx * dy + s11 * dy * dy) / det
    return pref * np.exp(-0.5 * quad)


def nonstationary_correlation(s, sigma_s: Covariance2x2, t, sigma_t: Covariance2x2) -> float:
    """Correlation between sites ``s`` and ``t`` with kernels ``sigma_s``, ``sigma_t``."""
    ks, kt = pack(sigma_s), pack(sigma_t)
    check_positive_definite(ks)
    check_positive_definite(kt)
    return float(_correlation_block(_as_points(s), ks, _as_points(t), kt)[0, 0])


def stationary_correlation(d, sigma: Covariance2x2) -> float:
    """Correlation at lag ``d`` when every site shares the kernel ``sigma``.

    For ``sigma = v * I`` this is ``exp(-|d|^2 / (4 v))``.
    """
    return nonstationary_correlation(np.zeros(2), sigma, np.asarray(d, dtype=float), sigma)


def psi_field_correlation(dist, tau_psi: float):
    """Squared-exponential correlation ``exp(-(dist / tau_psi)^2)`` of the focus fields."""
    if not (tau_psi > 0 and math.isfinite(tau_psi)):
        raise DomainError(f"tau_psi must be positive, got {tau_psi!r}")
    d = np.asarray(dist, dtype=float) / tau_psi
    out = np.exp(-d * d)
    return float(out) if out.ndim == 0 else out


def correlation_matrix(sites, kernels) -> np.ndarray:
    """Raw (unfactorized) non-stationary correlation matrix with unit diagonal."""
    x = _as_points(sites)
    k = pack(kernels)
    if len(k) != len(x) or len(x) < 1:
        raise DomainError("need n >= 1 sites and one kernel per site")
    check_positive_definite(k)
    return _correlation_block(x, k, x, k)


def psi_correlation_matrix(sites, tau_psi: float) -> np.ndarray:
    x = _as_points(sites)
    diff = x[:, None, :] - x[None, :, :]
    return psi_field_correlation(np.sqrt(np.sum(diff * diff, axis=-1)), tau_psi)


def build_correlation_matrix(sites, kernels) -> CorrelationMatrix:
    """Assemble and factorize the correlation matrix of a kernel field.

    Raises
    ------
    NumericalError
        If the jitter cap is exceeded.
    """
    r = correlation_matrix(sites, kernels)
    chol, jitter = cholesky_with_jitter(r)
    return CorrelationMatrix(r, chol, jitter)


def build_psi_correlation_matrix(sites, tau_psi: float) -> CorrelationMatrix:
    r = psi_correlation_matrix(sites, tau_psi)
    chol, jitter = cholesky_with_jitter(r)
    return CorrelationMatrix(r, chol, jitter)


# ---------------------------------------------------------------------------
# quadrature oracle
# ---------------------------------------------------------------------------

def default_quadrature_grid(s, sigma_s, t, sigma_t, n_sd=8.0, min_n=200):
    """Half-width and node count adequate for :func:`quadrature_correlation_oracle`.

    The box extends ``n_sd`` major-axis standard deviations past each site and
    the node spacing is at most 0.4 of the smallest kernel standard deviation.
    """
    s, t = np.asarray(s, float), np.asarray(t, float)
    k = pack([sigma_s, sigma_t])
    major, minor = _eig_bounds(k)
    mid = 0.5 * (s + t)
    half = max(np.max(np.abs(s - mid)), np.max(np.abs(t - mid))) + n_sd * math.sqrt(major.max())
    spacing = 0.4 * math.sqrt(minor.min())
    return half, max(min_n, int(math.ceil(2.0 * half / spacing)))


def _eig_bounds(k):
    mean = 0.5 * (k[:, 0] + k[:, 2])
    spread = np.hypot(0.5 * (k[:, 0] - k[:, 2]), k[:, 1])
    return mean + spread, mean - spread


def quadrature_correlation_oracle(s, sigma_s: Covariance2x2, t, sigma_t: Covariance2x2,
                                  grid_half_width=None, grid_n=None) -> float:
    """Normalized kernel overlap by 2-D midpoint-rule integration.

    Evaluates the two kernel densities with :mod:`scipy.stats` on a square
    grid centred between the sites and normalizes the cross integral by the
    square roots of the two self integrals.  Independent of the closed form.

    Raises
    ------
    PreconditionError
        If the grid does not reach 6 standard deviations beyond either site
        or has fewer than 200 nodes per axis.
    """
    s, t = np.asarray(s, float), np.asarray(t, float)
    if grid_half_width is None or grid_n is None:
        hw, gn = default_quadrature_grid(s, sigma_s, t, sigma_t)
        grid_half_width = hw if grid_half_width is None else grid_half_width
        grid_n = gn if grid_n is None else grid_n
    if grid_n < 200:
        raise PreconditionError(f"grid_n must be >= 200, got {grid_n}")
    mid = 0.5 * (s + t)
    k = pack([sigma_s, sigma_t])
    major, _ = _eig_bounds(k)
    for site, var in ((s, major[0]), (t, major[1])):
        reach = np.abs(site - mid) + 6.0 * math.sqrt(var)
        if np.any(reach > grid_half_width):
            raise PreconditionError("quadrature grid does not cover 6 sd of both kernels")

    h = 2.0 * grid_half_width / grid_n
    ax = -grid_half_width + h * (np.arange(grid_n) + 0.5)
    gx, gy = np.meshgrid(mid[0] + ax, mid[1] + ax, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    fs = stats.multivariate_normal(mean=s, cov=sigma_s.matrix).pdf(pts)
    ft = stats.multivariate_normal(mean=t, cov=sigma_t.matrix).pdf(pts)
    cell = h * h
    cross = np.sum(fs * ft) * cell
    self_s = np.sum(fs * fs) * cell
    self_t = np.sum(ft * ft) * cell
    return float(cross / math.sqrt(self_s * self_t))
