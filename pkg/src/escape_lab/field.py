"""Hopf normal-form drift, its Moebius-transformed version and local expansions.

All complex arithmetic is carried out on pairs of real arrays so every
function broadcasts over numpy inputs and can be mirrored in numba kernels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

DOMAIN_TOL = 1e-9


class DomainError(ValueError):
    """Raised when a point lies outside the closed unit disk."""


class PlanePoint(NamedTuple):
    """Cartesian point (or vector) in the plane; entries may be arrays."""

    x: np.ndarray | float
    y: np.ndarray | float


class PolarComponents(NamedTuple):
    """Drift near the unit circle: radial part is ``-rho * b_normal_coeff``."""

    b_normal_coeff: np.ndarray | float
    b_tangent: np.ndarray | float


@dataclass(frozen=True)
class FieldParams:
    """Parameters of the transformed Hopf system.

    Parameters
    ----------
    alpha : float
        Offset of the focus, which sits at ``(-alpha, 0)``. Must lie in [0, 1).
    omega : float
        Rotation frequency at the focus.
    lam : float
        Decay rate of the linearisation; most closed forms need ``lam == 1``.
    eps : float
        Noise intensity; the SDE diffusion is ``sqrt(2 * eps)``.
    """

    alpha: float
    omega: float
    lam: float = 1.0
    eps: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "omega", "lam", "eps"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.omega <= 0.0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if self.lam <= 0.0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.eps < 0.0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")

    @property
    def focus(self) -> PlanePoint:
        return PlanePoint(-self.alpha, 0.0)

    def require_unit_lambda(self):
        if self.lam != 1.0:
            raise ValueError("this closed form is only valid for lam == 1")


def _check_disk(x, y, what):
    r2 = np.asarray(x, dtype=float) ** 2 + np.asarray(y, dtype=float) ** 2
    if np.any(r2 > (1.0 + DOMAIN_TOL) ** 2):
        raise DomainError(f"{what} lies outside the unit disk")


def hopf_drift(x, y, params: FieldParams) -> PlanePoint:
    """Evaluate ``lam * z * (-1 + |z|^2 + i*omega)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    q = x * x + y * y - 1.0
    lam, om = params.lam, params.omega
    return PlanePoint(lam * (x * q - y * om), lam * (x * om + y * q))


def mobius_map(x, y, alpha: float) -> PlanePoint:
    """Disk automorphism ``(z - alpha) / (1 - alpha z)`` sending 0 to -alpha."""
    _check_disk(x, y, "z")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = x - alpha, y
    dx, dy = 1.0 - alpha * x, -alpha * y
    d2 = dx * dx + dy * dy
    return PlanePoint((nx * dx + ny * dy) / d2, (ny * dx - nx * dy) / d2)


def mobius_inverse(x, y, alpha: float) -> PlanePoint:
    """Inverse map ``(zeta + alpha) / (1 + alpha zeta)``."""
    _check_disk(x, y, "zeta")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = x + alpha, y
    dx, dy = 1.0 + alpha * x, alpha * y
    d2 = dx * dx + dy * dy
    return PlanePoint((nx * dx + ny * dy) / d2, (ny * dx - nx * dy) / d2)


def mobius_derivative(x, y, alpha: float) -> PlanePoint:
    """Complex derivative of ``mobius_map`` at ``z``: ``(1 - alpha^2) / (1 - alpha z)^2``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx, dy = 1.0 - alpha * x, -alpha * y
    sx, sy = dx * dx - dy * dy, 2.0 * dx * dy
    s2 = sx * sx + sy * sy
    c = 1.0 - alpha * alpha
    return PlanePoint(c * sx / s2, -c * sy / s2)


def drift_alpha(x, y, params: FieldParams) -> PlanePoint:
    """Transformed drift in closed rational form.

    ``lam (zeta + a)(1 + a zeta) / (1 - a^2) * (-1 + |zeta + a|^2 / |1 + a zeta|^2 + i omega)``
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a, om = params.alpha, params.omega
    ux, uy = x + a, y
    vx, vy = 1.0 + a * x, a * y
    px = ux * vx - uy * vy
    py = ux * vy + uy * vx
    q = (ux * ux + uy * uy) / (vx * vx + vy * vy) - 1.0
    s = params.lam / (1.0 - a * a)
    return PlanePoint(s * (px * q - py * om), s * (px * om + py * q))


def drift_alpha_jacobian(x, y, params: FieldParams) -> np.ndarray:
    """Analytic Jacobian of ``drift_alpha``; shape ``(2, 2) + shape(x)``.

    Rows are the drift components, columns the derivatives in x and y.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a, om = params.alpha, params.omega
    c = params.lam / (1.0 - a * a)
    # P = (zeta + a)(1 + a zeta) and its complex derivative
    ux, uy = x + a, y
    vx, vy = 1.0 + a * x, a * y
    px = ux * vx - uy * vy
    py = ux * vy + uy * vx
    dpx = 1.0 + 2.0 * a * x + a * a
    dpy = 2.0 * a * y
    num = ux * ux + uy * uy
    den = vx * vx + vy * vy
    q = num / den - 1.0
    qx = (2.0 * ux * den - 2.0 * a * num * vx) / den**2
    qy = (2.0 * y * den - 2.0 * a * a * y * num) / den**2
    # d/dx b = c [P' (q + i om) + P q_x];  d/dy b = c [i P' (q + i om) + P q_y]
    ex = dpx * q - dpy * om
    ey = dpx * om + dpy * q
    bxx = c * (ex + px * qx)
    byx = c * (ey + py * qx)
    bxy = c * (-ey + px * qy)
    byy = c * (ex + py * qy)
    return np.array([[bxx, bxy], [byx, byy]])


def polar_components(theta, params: FieldParams) -> PolarComponents:
    """Leading-order drift near the unit circle at polar angle ``theta``."""
    theta = np.asarray(theta, dtype=float)
    a, om = params.alpha, params.omega
    c = 1.0 - a * a
    normal = 2.0 * (c - om * a * np.sin(theta)) / c
    tangent = om * (1.0 + 2.0 * a * np.cos(theta) + a * a) / c
    return PolarComponents(params.lam * normal, params.lam * tangent)


def focus_jacobian(params: FieldParams) -> np.ndarray:
    """Linearisation of the drift at the focus."""
    om = params.omega
    return params.lam * np.array([[-1.0, -om], [om, -1.0]])


def linear_flow(t: float, params: FieldParams) -> np.ndarray:
    """Matrix exponential of ``t * focus_jacobian``: a decaying rotation."""
    lt = params.lam * t
    c, s = np.cos(params.omega * lt), np.sin(params.omega * lt)
    return np.exp(-lt) * np.array([[c, -s], [s, c]])
