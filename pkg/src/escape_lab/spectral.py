"""Semi-analytic escape rates: the periodic Bernoulli profile, the complex
second eigenvalue and asymptotic mean first passage times.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
from scipy.integrate import simpson

from .field import FieldParams

DEFAULT_GRID = 4096

# decay rates quoted for the oscillatory regime; kept for reports only
REFERENCE_LAMBDA0 = {"tau_alpha": 1.57, "af": 1.66}


class NonPositiveZ(ArithmeticError):
    """The periodic linearised profile lost positivity."""


class MfptVariant(str, Enum):
    TAU_ALPHA = "TauAlpha"
    AF = "AF"


class Regime(str, Enum):
    CLASSICAL = "Classical"
    OSCILLATORY = "Oscillatory"
    LARGE_NOISE = "LargeNoise"


@dataclass(frozen=True)
class RegimeThresholds:
    classical_below: float = 0.02
    large_noise_from: float = 0.2


@dataclass
class PeriodicSolution:
    """Periodic Bernoulli profile ``xi`` and its linearisation ``z = xi^-2``."""

    theta_grid: np.ndarray
    xi: np.ndarray
    z: np.ndarray
    c_alpha: float

    def to_csv(self, path):
        from .sde import FORMAT_VERSION

        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# format_version={FORMAT_VERSION}\n")
            fh.write("theta,xi,z\n")
            for t, x, z in zip(self.theta_grid, self.xi, self.z):
                fh.write(f"{t!r},{x!r},{z!r}\n")


def boundary_weight(s, alpha: float):
    """``|1 - alpha e^{is}|^4 / (1 - alpha^2)^2``: the noise weight along the cycle after the map."""
    s = np.asarray(s, dtype=float)
    m2 = 1.0 - 2.0 * alpha * np.cos(s) + alpha * alpha
    return m2 * m2 / (1.0 - alpha * alpha) ** 2


def _weight_coefficients(alpha: float) -> dict[int, complex]:
    """Exact Fourier coefficients of ``boundary_weight``; it is a degree-2 trigonometric polynomial."""
    a2 = alpha * alpha
    # (1 + a^2 - a(e^{is} + e^{-is}))^2
    c0 = (1.0 + a2) ** 2 + 2.0 * a2
    c1 = -2.0 * alpha * (1.0 + a2)
    c2 = a2
    k = 1.0 / (1.0 - a2) ** 2
    return {0: c0 * k, 1: c1 * k, -1: c1 * k, 2: c2 * k, -2: c2 * k}


def _check_grid(grid_size: int):
    if grid_size < 64 or grid_size & (grid_size - 1):
        raise ValueError("grid_size must be a power of two and at least 64")


def bernoulli_xi(p: FieldParams, grid_size: int = DEFAULT_GRID) -> PeriodicSolution:
    """Periodic solution of ``lam * omega * xi' = sigma * xi^3 - 2 lam xi``.

    With ``z = xi^-2`` the equation is linear,
    ``z' = (4/omega) z - 2 sigma / (lam omega)``, and its periodic solution is
    ``z(s) = C e^{4s/omega} - 2/(lam omega) int_0^s sigma(u) e^{4(s-u)/omega} du``
    with ``C`` fixed by ``z(2 pi) = z(0)``. The weight is a trigonometric
    polynomial, so the integral is evaluated term by term in closed form.
    """
    _check_grid(grid_size)
    s = 2.0 * np.pi * np.arange(grid_size) / grid_size
    om, lam = p.omega, p.lam
    g = 4.0 / om
    k = 2.0 / (lam * om)
    growth = np.exp(g * s)
    # int_0^s e^{inu} e^{g(s-u)} du = (e^{ins} - e^{gs}) / (in - g)
    inner = np.zeros(grid_size, dtype=complex)
    period = 0.0 + 0.0j
    for n, c in _weight_coefficients(p.alpha).items():
        inner += c * (np.exp(1j * n * s) - growth) / (1j * n - g)
        period += c * (1.0 - np.exp(2.0 * np.pi * g)) / (1j * n - g)
    # periodicity: C e^{2 pi g} - k * period = C
    c_alpha = float((k * period / (np.exp(2.0 * np.pi * g) - 1.0)).real)
    z = c_alpha * growth - k * inner.real
    if np.any(z <= 0.0) or not np.all(np.isfinite(z)):
        raise NonPositiveZ("periodic profile is not positive")
    return PeriodicSolution(s, z ** -0.5, z, c_alpha)


def spectral_derivative(values: np.ndarray) -> np.ndarray:
    """Derivative of a periodic sample on a uniform grid of [0, 2 pi)."""
    n = len(values)
    k = np.fft.rfftfreq(n, d=1.0 / n)
    c = np.fft.rfft(values) * 1j * k
    if n % 2 == 0:
        c[-1] = 0.0
    return np.fft.irfft(c, n=n)


def bernoulli_residual(sol: PeriodicSolution, p: FieldParams) -> np.ndarray:
    """Pointwise residual ``-sigma xi^3 + 2 lam xi + lam omega xi'`` of the nonlinear equation."""
    sig = boundary_weight(sol.theta_grid, p.alpha)
    dxi = spectral_derivative(sol.xi)
    return -sig * sol.xi**3 + 2.0 * p.lam * sol.xi + p.lam * p.omega * dxi


def _periodic_simpson(values: np.ndarray) -> float:
    n = len(values)
    closed = np.append(values, values[0])
    return float(simpson(closed, dx=2.0 * np.pi / n))


def omega1(p: FieldParams, grid_size: int = DEFAULT_GRID) -> float:
    """Decay rate of the oscillating mode: ``(omega/pi) int sigma xi^2 / omega ds``."""
    sol = bernoulli_xi(p, grid_size)
    sig = boundary_weight(sol.theta_grid, p.alpha)
    omega2 = p.omega
    return omega2 / np.pi * _periodic_simpson(sig * sol.xi**2 / p.omega)


def omega1_telescoped(p: FieldParams) -> float:
    """Same rate from the logarithmic antiderivative of the integrand.

    With ``I(s) = int_0^s f(u) e^{-4u/omega} du`` and
    ``E = e^{8 pi/omega} / (e^{8 pi/omega} - 1)`` the integrand equals
    ``-(omega/2) d/ds log(E I(2 pi) - I(s))``, so only the endpoint values of
    ``I`` enter.
    """
    g = 4.0 / p.omega

    def primitive(s):
        tot = 0.0 + 0.0j
        for n, c in _weight_coefficients(p.alpha).items():
            tot += c * (np.exp((1j * n - g) * s) - 1.0) / (1j * n - g)
        return float(tot.real)

    e = np.exp(2.0 * np.pi * g) / (np.exp(2.0 * np.pi * g) - 1.0)
    full = primitive(2.0 * np.pi)
    drop = np.log(e * full - full) - np.log(e * full)
    return p.lam / np.pi * (-(p.omega / 2.0) * drop)


def second_eigenvalue(p: FieldParams, grid_size: int = DEFAULT_GRID) -> tuple[float, float]:
    """``(decay, frequency)`` of the first non-real eigenvalue."""
    return omega1(p, grid_size), p.omega


def c_of_omega(omega: float) -> float:
    if omega <= 0:
        raise ValueError("omega must be positive")
    r = 4.0 / omega
    return 3.0 * omega / 8.0 - (8.0 / omega) / (1.0 + r * r) + r / (4.0 + r * r)


def psi_hat_closed_form(alpha: float) -> float:
    """Boundary value of the local quadratic eikonal, ``(1 - alpha)^2 / 2``."""
    return 0.5 * (1.0 - alpha) ** 2


def psi_hat_caption_form(alpha: float) -> float:
    """Alternative closed form ``(1 - alpha^2) / 2``, reported next to the other one."""
    return 0.5 * (1.0 - alpha * alpha)


def mfpt_asymptotic(p: FieldParams, variant: MfptVariant = MfptVariant.TAU_ALPHA,
                    psi_hat: float | None = None) -> float:
    """Small-noise mean first passage time from the focus to the cycle.

    ``psi_hat`` overrides the closed-form boundary value of the eikonal
    in the ``TauAlpha`` variant (e.g. with a value obtained by shooting).
    """
    a, eps = p.alpha, p.eps
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 0.0 < a < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    pre = c_of_omega(p.omega) * np.sqrt(2.0 * np.pi * eps)
    variant = MfptVariant(variant)
    if variant is MfptVariant.AF:
        return pre / 6.0 * np.exp(psi_hat_closed_form(a) / eps)
    ph = psi_hat_closed_form(a) if psi_hat is None else psi_hat
    return pre * (1.0 + a) ** 2 / (4.0 * (1.0 + 4.0 * a * a + a**4)) * np.exp(ph / eps)


def eta(p: FieldParams) -> float:
    return p.eps / (1.0 - p.alpha**2) ** 2


def regime(p: FieldParams, thresholds: RegimeThresholds = RegimeThresholds()) -> tuple[float, Regime]:
    e = eta(p)
    if e < thresholds.classical_below:
        return e, Regime.CLASSICAL
    if e < thresholds.large_noise_from:
        return e, Regime.OSCILLATORY
    return e, Regime.LARGE_NOISE


@dataclass
class SpectralReport:
    omega1: float
    omega2: float
    lambda2: tuple[float, float]
    lambda0_estimate: float | None
    mfpt_taualpha: float | None
    mfpt_AF: float | None
    eta: float
    regime: Regime

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda2"] = {"decay": self.lambda2[0], "frequency": self.lambda2[1]}
        d["regime"] = self.regime.value
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def spectral_report(p: FieldParams, psi_hat: float | None = None,
                    thresholds: RegimeThresholds = RegimeThresholds(),
                    grid_size: int = DEFAULT_GRID) -> SpectralReport:
    w1, w2 = second_eigenvalue(p, grid_size)
    e, label = regime(p, thresholds)
    # the escape-time asymptotics need noise and a displaced focus
    if p.eps > 0 and 0.0 < p.alpha < 1.0:
        tau = mfpt_asymptotic(p, MfptVariant.TAU_ALPHA, psi_hat)
        af = mfpt_asymptotic(p, MfptVariant.AF)
        return SpectralReport(w1, w2, (w1, w2), 1.0 / tau, tau, af, e, label)
    return SpectralReport(w1, w2, (w1, w2), None, None, None, e, label)
