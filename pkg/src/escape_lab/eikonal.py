"""Boundary value of the WKB eikonal by shooting characteristics from the focus.

Characteristics of ``|grad psi|^2 + b . grad psi = 0`` solve

    zeta' = 2 p + b(zeta),   p' = -(grad b)^T p,   psi' = |p|^2,

and start on a small circle of radius ``delta`` around the focus, where
``psi ~ |zeta - focus|^2 / 2``. The unstable manifold of the focus meets the
stable manifold of the cycle along isolated characteristics; a shot that is
not exactly on one either crosses the circle with a small momentum or turns
back towards the focus after skimming it. Both cases give ``psi`` at the
closest approach, which converges to the boundary value as the shot
approaches a connecting characteristic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from .field import FieldParams, PlanePoint, drift_alpha, drift_alpha_jacobian, mobius_inverse
from .sde import FORMAT_VERSION


class NoEscape(RuntimeError):
    """A characteristic neither reached nor approached the boundary within the horizon."""


class ShotKind(str, Enum):
    CROSSED = "crossed"
    TURNED_BACK = "turned-back"
    ASYMPTOTIC = "asymptotic"


@dataclass
class CharacteristicState:
    zeta: PlanePoint
    momentum: np.ndarray
    psi: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.zeta.x, self.zeta.y, self.momentum[0], self.momentum[1], self.psi], dtype=float)

    @classmethod
    def from_vector(cls, s) -> CharacteristicState:
        return cls(PlanePoint(float(s[0]), float(s[1])), np.array([s[2], s[3]], dtype=float), float(s[4]))


@dataclass(frozen=True)
class ShotConfig:
    """Integration controls.

    A shot that has come within ``near_radius`` of the boundary (measured in
    the undistorted pre-image disk) and then falls back inside
    ``retreat_radius`` is declared to have turned back. ``horizon`` overrides
    the default escape horizon.
    """

    rtol: float = 1e-10
    atol: float = 1e-14
    near_radius: float = 0.9
    retreat_radius: float = 0.5
    converged_gap: float = 1e-6
    horizon: float | None = None


@dataclass
class ShotResult:
    t_arrival: float
    psi_hat: float
    winding_count: int
    hit_angle: float
    kind: ShotKind
    theta0: float
    delta: float
    alpha: float
    psi_raw: float
    radius: float
    hamiltonian_drift: float


def _rhs(t, s, params: FieldParams):
    bx, by = drift_alpha(s[0], s[1], params)
    jac = drift_alpha_jacobian(s[0], s[1], params)
    px, py = s[2], s[3]
    return np.array([
        2.0 * px + bx,
        2.0 * py + by,
        -(jac[0, 0] * px + jac[1, 0] * py),
        -(jac[0, 1] * px + jac[1, 1] * py),
        px * px + py * py,
    ])


def characteristic_rhs(state: CharacteristicState, params: FieldParams) -> CharacteristicState:
    """Time derivative of a characteristic state."""
    return CharacteristicState.from_vector(_rhs(0.0, state.as_vector(), params))


def hamiltonian(zeta, momentum, params: FieldParams):
    """``|p|^2 + b . p``; zero along characteristics of the eikonal."""
    bx, by = drift_alpha(zeta[0], zeta[1], params)
    px, py = momentum[0], momentum[1]
    return px * px + py * py + bx * px + by * py


def finite_difference_jacobian(x: float, y: float, params: FieldParams, h: float = 1e-7) -> np.ndarray:
    """Central-difference Jacobian of the transformed drift."""
    bxp = np.array(drift_alpha(x + h, y, params))
    bxm = np.array(drift_alpha(x - h, y, params))
    byp = np.array(drift_alpha(x, y + h, params))
    bym = np.array(drift_alpha(x, y - h, params))
    return np.column_stack([(bxp - bxm) / (2 * h), (byp - bym) / (2 * h)])


def initial_state(params: FieldParams, delta: float, theta0: float) -> CharacteristicState:
    """Start on the circle of radius ``delta`` with radial momentum on the zero level of the Hamiltonian.

    The momentum is ``-(b . e) e`` with ``e`` the outward unit vector, which
    equals ``lam * delta * e`` to leading order and makes the Hamiltonian
    vanish exactly.
    """
    e = np.array([np.cos(theta0), np.sin(theta0)])
    fx, fy = params.focus
    x, y = fx + delta * e[0], fy + delta * e[1]
    b = np.array(drift_alpha(x, y, params))
    p = -(b @ e) * e
    return CharacteristicState(PlanePoint(x, y), p, params.lam * delta * delta / 2.0)


def default_horizon(params: FieldParams, delta: float) -> float:
    """Ten times the time needed to spiral out, rounded up to whole turns."""
    period = 2.0 * np.pi / (params.omega * params.lam)
    spiral_out = np.log(max((1.0 - params.alpha) / delta, np.e)) / params.lam
    turns = spiral_out / period
    return 10.0 * (turns + 1.0) * period


def _winding(sol, t_end: float, params: FieldParams) -> int:
    n = int(np.ceil(t_end * params.omega * params.lam / (2.0 * np.pi) * 64)) + 2
    tt = np.linspace(0.0, t_end, n)
    y = sol.sol(tt)
    fx, fy = params.focus
    ang = np.unwrap(np.arctan2(y[1] - fy, y[0] - fx))
    return int(abs(ang[-1] - ang[0]) // (2.0 * np.pi))


def shoot(params: FieldParams, delta: float = 1e-3, theta0: float = np.pi,
          cfg: ShotConfig = ShotConfig()) -> ShotResult:
    """Integrate one characteristic from the circle of radius ``delta`` to the boundary.

    Returns the eikonal at the crossing, or at the closest approach for shots
    that turn back, with the first-order correction ``(1 - r) p_r / 2`` that
    accounts for the remaining distance to the unit circle.
    """
    if not 0.0 < delta < 1.0 - params.alpha:
        raise ValueError("delta must lie in (0, 1 - alpha)")
    s0 = initial_state(params, delta, theta0).as_vector()
    horizon = cfg.horizon if cfg.horizon is not None else default_horizon(params, delta)
    a = params.alpha

    def cross(t, s, prm):
        return s[0] * s[0] + s[1] * s[1] - 1.0

    cross.terminal = True
    cross.direction = 1

    seen = {"near": False}

    def retreat(t, s, prm):
        r2 = s[0] * s[0] + s[1] * s[1]
        if r2 >= 1.0:
            return -1.0
        ux, uy = mobius_inverse(s[0], s[1], a)
        rz = float(np.hypot(ux, uy))
        if rz > cfg.near_radius:
            seen["near"] = True
        return cfg.retreat_radius - rz if seen["near"] else -1.0

    retreat.terminal = True
    retreat.direction = 1

    sol = solve_ivp(_rhs, (0.0, horizon), s0, args=(params,), method="DOP853", rtol=cfg.rtol,
                    atol=cfg.atol, events=[cross, retreat], dense_output=True)
    if sol.status < 0:
        raise RuntimeError(f"characteristic integration failed: {sol.message}")
    drift = float(np.max(np.abs(hamiltonian(sol.y[0:2], sol.y[2:4], params))))

    if sol.t_events[0].size:
        t_end = float(sol.t_events[0][0])
        s = sol.y_events[0][0]
        kind = ShotKind.CROSSED
        psi = psi_raw = float(s[4])
        radius = 1.0
    else:
        r2 = sol.y[0] ** 2 + sol.y[1] ** 2
        k = int(np.argmax(r2))
        lo = sol.t[max(k - 1, 0)]
        hi = sol.t[min(k + 1, len(sol.t) - 1)]
        if hi > lo:
            res = minimize_scalar(lambda t: -float(np.sum(sol.sol(t)[0:2] ** 2)), bounds=(lo, hi),
                                  method="bounded", options={"xatol": 1e-12})
            t_end = float(res.x)
        else:
            t_end = float(sol.t[k])
        s = sol.sol(t_end)
        radius = float(np.hypot(s[0], s[1]))
        if sol.t_events[1].size:
            kind = ShotKind.TURNED_BACK
        elif 1.0 - radius < cfg.converged_gap:
            kind = ShotKind.ASYMPTOTIC
        else:
            raise NoEscape(f"no approach to the boundary within t={horizon:.3g} "
                           f"(closest radius {radius:.6f})")
        p_radial = (s[0] * s[2] + s[1] * s[3]) / radius
        psi_raw = float(s[4])
        psi = psi_raw + 0.5 * (1.0 - radius) * p_radial
    return ShotResult(t_end, psi, _winding(sol, t_end, params), float(np.arctan2(s[1], s[0])), kind,
                      float(theta0), float(delta), float(a), psi_raw, radius, drift)


@dataclass
class Connection:
    """A connecting characteristic bracketed between a crossing and a turning-back shot."""

    theta0: float
    psi_hat: float
    bracket: tuple[ShotResult, ShotResult]


@dataclass
class BoundaryValue:
    psi_hat: float
    connections: list[Connection]


def boundary_value(params: FieldParams, delta: float = 1e-3, n_directions: int = 16,
                   iterations: int = 24, cfg: ShotConfig = ShotConfig()) -> BoundaryValue:
    """Minimum eikonal over the connecting characteristics found by bisection in the start angle.

    Start angles on a coarse ring are classified as crossing or turning back;
    each change of class brackets a connecting characteristic, which is then
    narrowed by bisection. When no change of class occurs (every shot converges
    onto the boundary, as in the rotationally symmetric case) the smallest
    single-shot value is returned.
    """
    thetas = np.pi + 2.0 * np.pi * np.arange(n_directions) / n_directions
    shots = [shoot(params, delta, th, cfg) for th in thetas]
    crossed = [s.kind is ShotKind.CROSSED for s in shots]
    conns = []
    for i in range(n_directions):
        j = (i + 1) % n_directions
        if crossed[i] == crossed[j]:
            continue
        lo, hi = thetas[i], thetas[i] + 2.0 * np.pi / n_directions
        s_lo, s_hi = shots[i], shots[j]
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            s_mid = shoot(params, delta, mid, cfg)
            if (s_mid.kind is ShotKind.CROSSED) == crossed[i]:
                lo, s_lo = mid, s_mid
            else:
                hi, s_hi = mid, s_mid
        conns.append(Connection(0.5 * (lo + hi), 0.5 * (s_lo.psi_hat + s_hi.psi_hat), (s_lo, s_hi)))
    if conns:
        return BoundaryValue(min(c.psi_hat for c in conns), conns)
    return BoundaryValue(min(s.psi_hat for s in shots), [])


def psi_hat_scan(alpha_grid, template: FieldParams, delta: float = 1e-3, theta0: float = np.pi,
                 cfg: ShotConfig = ShotConfig()) -> list[ShotResult]:
    """One shot per ``alpha`` starting on the real axis behind the focus."""
    out = []
    for a in alpha_grid:
        if not 0.0 <= a < 1.0:
            raise ValueError("alpha grid must lie in [0, 1)")
        p = FieldParams(float(a), template.omega, template.lam, template.eps)
        out.append(shoot(p, delta, theta0, cfg))
    return out


def caustic_detected(params: FieldParams, delta: float = 1e-3, n_directions: int = 64,
                     cfg: ShotConfig = ShotConfig()) -> bool:
    """Flag characteristics that cross each other before reaching the boundary.

    All shots are evaluated at a common time (the earliest arrival). Without a
    caustic the images of the start ring keep their cyclic order around the
    focus, so the unwrapped polar angle along the ring stays monotone.
    """
    thetas = 2.0 * np.pi * np.arange(n_directions) / n_directions
    fx, fy = params.focus
    horizon = cfg.horizon if cfg.horizon is not None else default_horizon(params, delta)
    sols = []
    t_common = np.inf
    for th in thetas:
        s0 = initial_state(params, delta, th).as_vector()

        def cross(t, s, prm):
            return s[0] * s[0] + s[1] * s[1] - 1.0

        cross.terminal = True
        cross.direction = 1
        sol = solve_ivp(_rhs, (0.0, horizon), s0, args=(params,), method="DOP853", rtol=cfg.rtol,
                        atol=cfg.atol, events=cross, dense_output=True)
        sols.append(sol)
        t_common = min(t_common, sol.t[-1])
    pts = np.array([sol.sol(t_common)[0:2] for sol in sols])
    ang = np.unwrap(np.append(np.arctan2(pts[:, 1] - fy, pts[:, 0] - fx),
                              np.arctan2(pts[0, 1] - fy, pts[0, 0] - fx)))
    step = np.diff(ang)
    return not (np.all(step > 0) or np.all(step < 0))


def write_scan_csv(results: list[ShotResult], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# format_version={FORMAT_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "theta0", "t_arrival", "psi_hat", "winding", "hit_angle"])
        for r in results:
            w.writerow([repr(r.alpha), repr(r.theta0), repr(r.t_arrival), repr(r.psi_hat),
                        r.winding_count, repr(r.hit_angle)])
