"""Simulation of focus fields and non-stationary Gaussian surfaces.

Two independent routes produce the same process:

* :func:`simulate_realization` factorizes the closed-form correlation matrix
  and multiplies the factor into standard normal deviates;
* :func:`convolve_white_noise` discretizes white noise on a fine grid and
  smooths it with each site's kernel.

Every sampler takes a seed (an ``int`` or :class:`numpy.random.SeedSequence`)
and is a pure function of its inputs and that seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import covariance as cov
from .exceptions import DomainError, PreconditionError
from .geometry import (DEFAULT_AREA, Ellipse, covariance_to_ellipse,
                       foci_to_covariance_array, pack, principal_axes, Covariance2x2)


@dataclass(frozen=True)
class LatticeSpec:
    """Regular grid of ``nx * ny`` sites, endpoints included.

    Sites are ordered with x varying fastest.
    """

    x_min: float = 0.0
    x_max: float = 20.0
    y_min: float = 0.0
    y_max: float = 20.0
    nx: int = 21
    ny: int = 21

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DomainError("lattice needs x_min < x_max and y_min < y_max")
        if int(self.nx) != self.nx or int(self.ny) != self.ny or self.nx < 1 or self.ny < 1:
            raise DomainError("lattice needs positive integer nx and ny")

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny)

    @property
    def spacing(self):
        dx = (self.x_max - self.x_min) / (self.nx - 1) if self.nx > 1 else math.inf
        dy = (self.y_max - self.y_min) / (self.ny - 1) if self.ny > 1 else math.inf
        return dx, dy

    def sites(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass
class FieldRealization:
    sites: np.ndarray
    values: np.ndarray
    seed: object = None
    kernel_ellipses: list | None = None
    psi_x: np.ndarray | None = None
    psi_y: np.ndarray | None = None
    kernels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.values) != len(self.sites):
            raise DomainError("values and sites differ in length")


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def spawn_seeds(seed, k: int) -> list:
    """Independent child seed sequences derived from ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(k)


def sample_gp(sites, corr: cov.CorrelationMatrix, scale: float = 1.0, seed=None) -> FieldRealization:
    """Draw ``scale * L u`` with ``L`` the Cholesky factor of ``corr``."""
    if not scale > 0:
        raise DomainError("scale must be positive")
    sites = np.asarray(sites, dtype=float).reshape(-1, 2)
    u = make_rng(seed).standard_normal(corr.n)
    return FieldRealization(sites, scale * (corr.chol @ u), seed)


def sample_psi_fields(sites, tau_psi: float, seed=None):
    """Two independent focus fields drawn from ``N(0, R_psi(tau_psi))``.

    Returns
    -------
    (FieldRealization, FieldRealization)
        The ``psi_x`` and ``psi_y`` fields.
    """
    sites = np.asarray(sites, dtype=float).reshape(-1, 2)
    corr = cov.build_psi_correlation_matrix(sites, tau_psi)
    u = make_rng(seed).standard_normal((2, corr.n))
    return (FieldRealization(sites, corr.chol @ u[0], seed),
            FieldRealization(sites, corr.chol @ u[1], seed))


def kernel_ellipses(sites, kernels, shrink_factor: float = 1.0) -> list:
    """One-sd ellipses of packed kernels centred on their sites, divided by ``shrink_factor``."""
    out = []
    for site, k in zip(np.asarray(sites, float), pack(kernels)):
        e = covariance_to_ellipse(Covariance2x2(*map(float, k)), center=site)
        out.append(e.shrunk(shrink_factor))
    return out


def simulate_realization(lattice: LatticeSpec, tau_psi: float = 10.0, tau_z: float = 1.0,
                         area: float = DEFAULT_AREA, seed=None, scale: float = 1.0,
                         shrink_factor: float = 10.0) -> FieldRealization:
    """One surface from the process with spatially evolving kernels.

    Focus fields are drawn on the lattice, mapped to kernel covariances,
    the correlation matrix is assembled and factorized, and a multivariate
    normal draw with standard deviation ``scale`` is made.  The returned
    ellipses are shrunk by ``shrink_factor`` for display.
    """
    sites = lattice.sites()
    psi_seed, z_seed = spawn_seeds(seed, 2)
    fx, fy = sample_psi_fields(sites, tau_psi, psi_seed)
    kernels = foci_to_covariance_array(fx.values, fy.values, tau_z, area)
    corr = cov.build_correlation_matrix(sites, kernels)
    z = sample_gp(sites, corr, scale, z_seed)
    return FieldRealization(sites, z.values, seed,
                            kernel_ellipses(sites, kernels, shrink_factor),
                            fx.values, fy.values, kernels)


# ---------------------------------------------------------------------------
# discrete white-noise convolution
# ---------------------------------------------------------------------------

def _kernel_sd_range(kernels):
    major, minor, _ = principal_axes(kernels)
    return math.sqrt(minor.min()), math.sqrt(major.max())


def default_noise_grid(sites, kernels, points_per_sd: float = 4.0,
                       margin_sd: float = 4.0) -> LatticeSpec:
    """Smallest noise grid meeting the :func:`convolve_white_noise` preconditions."""
    sites = np.asarray(sites, float).reshape(-1, 2)
    sd_min, sd_max = _kernel_sd_range(pack(kernels))
    h = sd_min / points_per_sd
    lo = sites.min(axis=0) - margin_sd * sd_max - h
    hi = sites.max(axis=0) + margin_sd * sd_max + h
    nx, ny = (int(math.ceil((hi - lo)[i] / h)) + 1 for i in range(2))
    return LatticeSpec(lo[0], hi[0], lo[1], hi[1], nx, ny)


def white_noise_weights(sites, kernels, noise_grid: LatticeSpec,
                        points_per_sd: float = 4.0, margin_sd: float = 4.0) -> np.ndarray:
    """Standardized convolution weights from noise cells to output sites.

    White noise integrates to ``N(0, area)`` over a region, so a cell of area
    ``a`` carries an impulse ``sqrt(a) * xi`` with ``xi`` standard normal.
    Row ``i`` holds ``k_i(u_c) * sqrt(a)`` rescaled so that the discrete
    self-overlap of every site is 1.

    Raises
    ------
    PreconditionError
        If the noise grid is coarser than ``points_per_sd`` nodes per minimum
        kernel sd or does not extend ``margin_sd`` maximum sds past the sites.
    """
    sites = np.asarray(sites, float).reshape(-1, 2)
    k = pack(kernels)
    if len(k) != len(sites):
        raise DomainError("need one kernel per site")
    sd_min, sd_max = _kernel_sd_range(k)
    dx, dy = noise_grid.spacing
    if max(dx, dy) > sd_min / points_per_sd:
        raise PreconditionError(
            f"noise grid spacing {max(dx, dy):.4g} exceeds 1/{points_per_sd:g} of "
            f"the minimum kernel sd {sd_min:.4g}")
    lo, hi = sites.min(axis=0), sites.max(axis=0)
    reach = margin_sd * sd_max
    if (noise_grid.x_min > lo[0] - reach or noise_grid.x_max < hi[0] + reach
            or noise_grid.y_min > lo[1] - reach or noise_grid.y_max < hi[1] + reach):
        raise PreconditionError(f"noise grid must extend {margin_sd:g} kernel sd beyond the sites")

    cells = noise_grid.sites()
    det = k[:, 0] * k[:, 2] - k[:, 1] ** 2
    w = np.empty((len(sites), len(cells)))
    for i, (site, (s11, s12, s22), d) in enumerate(zip(sites, k, det)):
        ux = cells[:, 0] - site[0]
        uy = cells[:, 1] - site[1]
        quad = (s22 * ux * ux - 2.0 * s12 * ux * uy + s11 * uy * uy) / d
        w[i] = np.exp(-0.5 * quad) / (2.0 * math.pi * math.sqrt(d)) * math.sqrt(dx * dy)
    w /= np.sqrt(np.sum(w * w, axis=1, keepdims=True))
    return w


def convolve_white_noise_draws(sites, kernels, noise_grid: LatticeSpec, n_draws: int,
                               seed=None, batch: int = 250) -> np.ndarray:
    """``n_draws`` independent white-noise convolutions, shape ``(n_draws, n_sites)``."""
    w = white_noise_weights(sites, kernels, noise_grid)
    rng = make_rng(seed)
    out = np.empty((n_draws, w.shape[0]))
    for start in range(0, n_draws, batch):
        m = min(batch, n_draws - start)
        xi = rng.standard_normal((m, w.shape[1]))
        out[start:start + m] = xi @ w.T
    return out


def convolve_white_noise(lattice: LatticeSpec, kernels, noise_grid: LatticeSpec | None = None,
                         seed=None) -> FieldRealization:
    """One surface obtained by smoothing discretized white noise with per-site kernels.

    ``kernels`` holds one covariance per lattice site (packed or a sequence of
    :class:`Covariance2x2`).  ``noise_grid`` defaults to
    :func:`default_noise_grid`.
    """
    sites = lattice.sites()
    k = pack(kernels)
    if noise_grid is None:
        noise_grid = default_noise_grid(sites, k)
    values = convolve_white_noise_draws(sites, k, noise_grid, 1, seed)[0]
    return FieldRealization(sites, values, seed, kernels=k)
