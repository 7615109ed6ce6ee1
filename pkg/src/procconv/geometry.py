"""Focus points, one standard deviation ellipses and 2x2 kernel covariances.

A local smoothing kernel is a bivariate normal density whose one-sd ellipse
has a fixed area ``A`` and foci at ``(psi_x, psi_y)`` and ``(-psi_x, -psi_y)``.
Scaling by ``tau_z`` stretches the ellipse isotropically, so its area becomes
``A * tau_z**2``.

With ``r2 = psi_x**2 + psi_y**2`` the squared semi-axes of the unscaled
ellipse are::

    d1 = sqrt(4 A^2 + r2^2 pi^2) / (2 pi) + r2 / 2
    d2 = sqrt(4 A^2 + r2^2 pi^2) / (2 pi) - r2 / 2

and the kernel covariance is ``tau_z**2 * R(alpha).T @ diag(d1, d2) @ R(alpha)``
with ``alpha = atan2(psi_y, psi_x)``.  Because ``d1 - d2 = r2`` this reduces
to ``tau_z**2 * (d2 * I + psi psi^T)``, which is what the vectorised code
evaluates: it needs no trigonometry and is exactly even in ``psi``.

Many functions accept kernels in *packed* form, an ``(n, 3)`` float array
whose columns are ``(s11, s12, s22)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError

DEFAULT_AREA = 3.5


@dataclass(frozen=True)
class FocusPair:
    """One focus ``(psi_x, psi_y)`` of an origin-centred ellipse."""

    psi_x: float
    psi_y: float

    def __post_init__(self):
        if not (math.isfinite(self.psi_x) and math.isfinite(self.psi_y)):
            raise DomainError("focus coordinates must be finite")

    @property
    def norm2(self) -> float:
        return self.psi_x * self.psi_x + self.psi_y * self.psi_y

    @property
    def norm(self) -> float:
        return math.hypot(self.psi_x, self.psi_y)

    @property
    def angle(self) -> float:
        return math.atan2(self.psi_y, self.psi_x)

    def __neg__(self) -> "FocusPair":
        return FocusPair(-self.psi_x, -self.psi_y)


@dataclass(frozen=True)
class KernelSpec:
    focus: FocusPair
    tau_z: float = 1.0
    area: float = DEFAULT_AREA

    def __post_init__(self):
        _check_positive(tau_z=self.tau_z, area=self.area)

    def covariance(self) -> "Covariance2x2":
        return foci_to_covariance(self.focus, self.tau_z, self.area)


@dataclass(frozen=True)
class Covariance2x2:
    """Symmetric positive-definite 2x2 matrix ``[[s11, s12], [s12, s22]]``."""

    s11: float
    s12: float
    s22: float

    def __post_init__(self):
        if not (self.s11 > 0 and self.s22 > 0 and self.det > 0):
            raise DomainError(
                f"covariance ({self.s11}, {self.s12}, {self.s22}) is not positive definite"
            )

    @property
    def det(self) -> float:
        return self.s11 * self.s22 - self.s12 * self.s12

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.s11, self.s12], [self.s12, self.s22]])

    @property
    def packed(self) -> np.ndarray:
        return np.array([self.s11, self.s12, self.s22])

    @classmethod
    def from_matrix(cls, m) -> "Covariance2x2":
        m = np.asarray(m, dtype=float)
        if m.shape != (2, 2) or m[0, 1] != m[1, 0]:
            raise DomainError("expected a symmetric 2x2 matrix")
        return cls(float(m[0, 0]), float(m[0, 1]), float(m[1, 1]))


@dataclass(frozen=True)
class Ellipse:
    """Ellipse with semi-axes, orientation of the major axis and a centre."""

    semi_major: float
    semi_minor: float
    angle: float = 0.0
    center: tuple = field(default=(0.0, 0.0))

    def __post_init__(self):
        if not (self.semi_major >= self.semi_minor > 0):
            raise DomainError("need semi_major >= semi_minor > 0")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def area(self) -> float:
        return math.pi * self.semi_major * self.semi_minor

    def shrunk(self, factor: float) -> "Ellipse":
        """Return the ellipse with both semi-axes divided by ``factor``."""
        if factor <= 0:
            raise DomainError("shrink factor must be positive")
        return Ellipse(self.semi_major / factor, self.semi_minor / factor,
                       self.angle, self.center)

    def covariance(self) -> Covariance2x2:
        c, s = math.cos(self.angle), math.sin(self.angle)
        a2, b2 = self.semi_major ** 2, self.semi_minor ** 2
        return Covariance2x2(c * c * a2 + s * s * b2, c * s * (a2 - b2),
                             s * s * a2 + c * c * b2)


def _check_positive(**values):
    for name, v in values.items():
        if not (np.all(np.isfinite(v)) and np.all(np.asarray(v) > 0)):
            raise DomainError(f"{name} must be positive and finite, got {v!r}")


def kernel_axes(norm2, area=DEFAULT_AREA):
    """Squared semi-axes ``(d1, d2)`` of the unit-scale kernel ellipse.

    ``d2`` is evaluated as ``(area / pi)**2 / d1`` which equals the
    difference form but avoids cancellation for distant foci.
    """
    _check_positive(area=area)
    norm2 = np.asarray(norm2, dtype=float)
    half = np.sqrt(4.0 * area * area + (norm2 * math.pi) ** 2) / (2.0 * math.pi)
    d1 = half + 0.5 * norm2
    d2 = (area / math.pi) ** 2 / d1
    return d1, d2


def foci_to_covariance(focus: FocusPair, tau_z: float = 1.0,
                       area: float = DEFAULT_AREA) -> Covariance2x2:
    """Kernel covariance of the fixed-area ellipse with the given focus.

    Parameters
    ----------
    focus : FocusPair
    tau_z : float
        Scale of the kernel; the one-sd ellipse has area ``area * tau_z**2``.
    area : float
        Area of the unscaled ellipse.

    Returns
    -------
    Covariance2x2

    Raises
    ------
    DomainError
        If ``tau_z`` or ``area`` is not positive.
    """
    _check_positive(tau_z=tau_z, area=area)
    packed = foci_to_covariance_array([focus.psi_x], [focus.psi_y], tau_z, area)[0]
    return Covariance2x2(*map(float, packed))


def foci_to_covariance_array(psi_x, psi_y, tau_z=1.0, area=DEFAULT_AREA) -> np.ndarray:
    """Vectorised :func:`foci_to_covariance` returning packed ``(n, 3)`` kernels."""
    _check_positive(tau_z=tau_z, area=area)
    return _foci_packed(np.atleast_1d(np.asarray(psi_x, dtype=float)),
                        np.atleast_1d(np.asarray(psi_y, dtype=float)), tau_z, area)


def _foci_packed(px, py, tau_z, area):
    # unchecked core of foci_to_covariance_array for the sampler's inner loop
    r2 = px * px + py * py
    d1 = np.sqrt(4.0 * area * area + (r2 * math.pi) ** 2) / (2.0 * math.pi) + 0.5 * r2
    d2 = (area / math.pi) ** 2 / d1
    t2 = tau_z * tau_z
    out = np.empty((px.size, 3))
    out[:, 0] = t2 * (d2 + px * px)
    out[:, 1] = t2 * (px * py)
    out[:, 2] = t2 * (d2 + py * py)
    return out


def pack(kernels) -> np.ndarray:
    """Convert a sequence of :class:`Covariance2x2` (or a packed array) to packed form."""
    if isinstance(kernels, np.ndarray):
        arr = np.asarray(kernels, dtype=float)
        if arr.ndim == 3 and arr.shape[1:] == (2, 2):
            arr = np.stack([arr[:, 0, 0], arr[:, 0, 1], arr[:, 1, 1]], axis=1)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise DomainError(f"packed kernels must have shape (n, 3), got {arr.shape}")
        return arr
    if isinstance(kernels, Covariance2x2):
        return kernels.packed[None, :]
    return np.array([k.packed for k in kernels], dtype=float).reshape(-1, 3)


def check_positive_definite(packed: np.ndarray) -> None:
    det = packed[:, 0] * packed[:, 2] - packed[:, 1] ** 2
    if not (np.all(packed[:, 0] > 0) and np.all(packed[:, 2] > 0) and np.all(det > 0)):
        raise DomainError("kernel covariance is not positive definite")


def principal_axes(packed: np.ndarray):
    """Eigenvalues ``(major, minor)`` and major-axis angle of packed kernels."""
    s11, s12, s22 = packed[:, 0], packed[:, 1], packed[:, 2]
    mean = 0.5 * (s11 + s22)
    spread = np.hypot(0.5 * (s11 - s22), s12)
    major = mean + spread
    minor = (s11 * s22 - s12 * s12) / major
    angle = 0.5 * np.arctan2(2.0 * s12, s11 - s22)
    return major, minor, angle


def covariance_to_ellipse(sigma: Covariance2x2, center=(0.0, 0.0)) -> Ellipse:
    """One standard deviation ellipse of a bivariate normal with covariance ``sigma``.

    The angle is the orientation of the principal eigenvector, reduced to
    ``(-pi/2, pi/2]``; it is 0 for a circle.
    """
    if not isinstance(sigma, Covariance2x2):
        sigma = Covariance2x2.from_matrix(sigma)
    major, minor, angle = principal_axes(sigma.packed[None, :])
    a, b = math.sqrt(major[0]), math.sqrt(minor[0])
    # guards the a >= b invariant against a last-ulp inversion for circles
    b = min(a, b)
    return Ellipse(a, b, float(angle[0]), center)


def one_sd_radius(packed: np.ndarray, angles) -> np.ndarray:
    """Distance from the centre to the one-sd ellipse along each polar angle.

    Returns an array of shape ``(n_kernels, n_angles)``.
    """
    packed = np.atleast_2d(packed)
    angles = np.asarray(angles, dtype=float)
    c, s = np.cos(angles)[None, :], np.sin(angles)[None, :]
    s11, s12, s22 = (packed[:, i:i + 1] for i in range(3))
    det = s11 * s22 - s12 * s12
    # u^T Sigma^{-1} u with u = (cos, sin)
    q = (s22 * c * c - 2.0 * s12 * c * s + s11 * s * s) / det
    return 1.0 / np.sqrt(q)


def ellipse_boundary(e: Ellipse, n_points: int) -> np.ndarray:
    """Boundary points at ``n_points`` equally spaced polar angles about the centre.

    The first point is not repeated at the end; close the polyline in the
    consumer if needed.
    """
    if int(n_points) != n_points or n_points < 3:
        raise DomainError("n_points must be an integer >= 3")
    theta = 2.0 * math.pi * np.arange(n_points) / n_points
    phi = theta - e.angle
    a, b = e.semi_major, e.semi_minor
    r = a * b / np.sqrt((b * np.cos(phi)) ** 2 + (a * np.sin(phi)) ** 2)
    cx, cy = e.center
    return np.column_stack([cx + r * np.cos(theta), cy + r * np.sin(theta)])
