"""Synthetic observation scenes with a curved high-concentration channel.

The foci follow the tangent of a circular arc, so kernels stretch along the
channel, and the mean is raised in a band around the arc.  Setting
``stationary=True`` gives zero foci and no channel, which makes the scene a
draw from the stationary special case of the fitted model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import covariance as cov
from .fields import LatticeSpec, spawn_seeds
from .geometry import DEFAULT_AREA, foci_to_covariance_array
from .exceptions import DomainError
from .model import Dataset


@dataclass
class SyntheticConfig:
    n: int = 60
    domain: float = 100.0
    mu: float = 2.0
    lambda_y: float = 10.0
    lambda_z: float = 1.0
    tau_z: float = 10.0
    tau_psi: float = 30.0
    area: float = DEFAULT_AREA
    stationary: bool = False
    # arc centred on the (0, 0) corner
    channel_radius: float = 60.0
    channel_width: float = 15.0
    channel_amplitude: float = 1.5
    psi_magnitude: float = 2.0
    psi_noise_sd: float = 0.3
    truth_nx: int = 21
    truth_ny: int = 21
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.domain <= 0:
            raise DomainError("need n >= 1 and a positive domain size")
        for name in ("lambda_y", "lambda_z", "tau_z", "tau_psi", "area", "channel_width"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")

    @property
    def truth_lattice(self) -> LatticeSpec:
        return LatticeSpec(0.0, self.domain, 0.0, self.domain, self.truth_nx, self.truth_ny)


@dataclass
class SyntheticScene:
    data: Dataset
    truth_sites: np.ndarray
    truth_surface: np.ndarray
    psi_x: np.ndarray
    psi_y: np.ndarray
    config: SyntheticConfig

    def truth_parameters(self) -> dict:
        c = self.config
        return {"mu": c.mu, "lambda_y": c.lambda_y, "lambda_z": c.lambda_z,
                "tau_z": c.tau_z, "tau_psi": c.tau_psi, "area": c.area,
                "stationary": c.stationary, "seed": c.seed}


def _channel_geometry(points, radius):
    r = np.hypot(points[:, 0], points[:, 1])
    r = np.where(r == 0, 1e-12, r)
    tangent = np.column_stack([-points[:, 1], points[:, 0]]) / r[:, None]
    return r - radius, tangent


def make_synthetic(config: SyntheticConfig | None = None) -> SyntheticScene:
    """Generate observations and the surface they were drawn from."""
    c = config or SyntheticConfig()
    site_seed, psi_seed, z_seed, noise_seed = spawn_seeds(c.seed, 4)
    sites = np.random.default_rng(site_seed).uniform(0.0, c.domain, size=(c.n, 2))
    grid = c.truth_lattice.sites()
    pts = np.vstack([sites, grid])

    offset, tangent = _channel_geometry(pts, c.channel_radius)
    band = np.exp(-0.5 * (offset / c.channel_width) ** 2)
    if c.stationary:
        px = py = np.zeros(len(pts))
        mean = np.full(len(pts), c.mu)
    else:
        noise = np.zeros((2, len(pts)))
        if c.psi_noise_sd > 0:
            psi_corr = cov.build_psi_correlation_matrix(pts, c.tau_psi)
            noise = c.psi_noise_sd * (psi_corr.chol @
                                      np.random.default_rng(psi_seed).standard_normal((len(pts), 2))).T
        px = c.psi_magnitude * band * tangent[:, 0] + noise[0]
        py = c.psi_magnitude * band * tangent[:, 1] + noise[1]
        mean = c.mu + c.channel_amplitude * band

    kernels = foci_to_covariance_array(px, py, c.tau_z, c.area)
    corr = cov.build_correlation_matrix(pts, kernels)
    z = corr.chol @ np.random.default_rng(z_seed).standard_normal(len(pts)) / np.sqrt(c.lambda_z)
    surface = mean + z
    eps = np.random.default_rng(noise_seed).standard_normal(c.n) / np.sqrt(c.lambda_y)
    data = Dataset(sites, surface[:c.n] + eps)
    return SyntheticScene(data, grid, surface[c.n:], px[:c.n], py[:c.n], c)


def config_dict(config: SyntheticConfig) -> dict:
    return asdict(config)
