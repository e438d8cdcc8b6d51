"""Mean-field network with synaptic depression: drift, critical points,
unstable limit cycle and Up-state duration ensembles.

State is ``(V, mu)``: population voltage in mV and the fraction of available
synaptic resources. The voltage relaxes with time constant ``tau`` and is
driven through the threshold-linear rate ``R(V) = gain (V - T)_+``;
``mu`` recovers with time ``t_r`` and is depleted at rate ``U R(V)``
(optionally ``U R(V) mu``). Noise acts on ``V`` only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from . import _kernels
from .sde import ExitRecords, InitOutsideDomain, SimConfig, _Problem, _run

# initial point and noise level of the reference Up-state experiment
REFERENCE_INIT = (20.0, 0.21)
REFERENCE_SIGMA = 0.0015
CYCLE_VERTICES = 720


class DegenerateRegime(ValueError):
    """Fewer than three critical points: connectivity below the minimal value."""

    def __init__(self, message, points=()):
        super().__init__(message)
        self.points = list(points)


class NoCycleFound(RuntimeError):
    """The reversed-time orbit did not close within the horizon."""


class Classification(str, Enum):
    STABLE_NODE = "StableNode"
    STABLE_FOCUS = "StableFocus"
    SADDLE = "Saddle"
    UNSTABLE_NODE = "UnstableNode"
    UNSTABLE_FOCUS = "UnstableFocus"


@dataclass(frozen=True)
class NeuroParams:
    """Network parameters; see :func:`demo_params` for the shipped defaults.

    ``depression_scales_with_mu`` selects ``U R mu`` instead of ``U R`` as
    the depletion term.
    """

    tau: float
    J: float
    U: float
    t_r: float
    T: float
    gain: float = 1.0
    sigma: float = REFERENCE_SIGMA
    depression_scales_with_mu: bool = False
    not_from_paper: bool = False

    def __post_init__(self):
        for name in ("tau", "t_r", "T", "gain"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.U <= 1.0:
            raise ValueError("U must lie in (0, 1]")
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")

    def kernel_params(self) -> np.ndarray:
        return np.array([self.tau, self.J, self.U, self.t_r, self.T, self.gain,
                         1.0 if self.depression_scales_with_mu else 0.0])

    @property
    def voltage_noise(self) -> float:
        """Amplitude of the voltage noise per unit square-root time."""
        return self.sigma / np.sqrt(self.tau)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NeuroState:
    V: float
    mu: float

    def as_tuple(self) -> tuple[float, float]:
        return (self.V, self.mu)


@dataclass(frozen=True)
class DemoDesign:
    """Dimensionless design of the demo parameter set.

    The focus sits at ``mu = focus_mu`` and at a voltage whose distance to
    threshold is ``1 / init_offset`` of that of the initial point, so the
    reference initial point is displaced from the focus along ``V``.
    ``damping`` sets the focus damping through ``tau / t_r`` and
    ``noise`` is the voltage noise measured in units of the focus-threshold
    distance per square-root focus time.
    """

    init_V: float = REFERENCE_INIT[0]
    focus_mu: float = REFERENCE_INIT[1]
    init_offset: float = 1.2
    damping: float = 0.05
    noise: float = 0.05
    U: float = 0.5
    t_r: float = 1.0
    sigma: float = REFERENCE_SIGMA


def demo_params(design: DemoDesign = DemoDesign()) -> NeuroParams:
    """Shipped parameter set, flagged as not taken from the literature.

    With ``u`` the focus-threshold distance, ``beta = T / u`` and
    ``s = beta t / tau`` the voltage equation becomes
    ``dx/ds = ((1 + beta) x y - x - beta) / beta`` with ``x = (V - T) / u``
    and ``y = mu / mu_focus``, and the voltage noise in these units is
    ``sigma / sqrt(u T)``. Visible noise-driven spikes at the reference
    noise level therefore need ``u T = (sigma / noise)^2``, i.e. a focus a
    few 1e-5 mV above threshold.
    """
    d = design
    q = (d.sigma / d.noise) ** 2
    # small root of init_offset u^2 - init_V u + q = 0
    u = 2.0 * q / (d.init_V + np.sqrt(d.init_V**2 - 4.0 * d.init_offset * q))
    T = d.init_V - d.init_offset * u
    beta = T / u
    tau = beta * d.t_r / (1.0 - d.damping)
    gain = (1.0 - d.focus_mu) / (d.t_r * d.U * u)
    J = (T + u) / (gain * d.focus_mu * u)
    return NeuroParams(tau=tau, J=J, U=d.U, t_r=d.t_r, T=T, gain=gain, sigma=d.sigma,
                       not_from_paper=True)


def rate_R(V, p: NeuroParams):
    V = np.asarray(V, dtype=float)
    out = np.where(V > p.T, p.gain * (V - p.T), 0.0)
    return float(out) if out.ndim == 0 else out


def neuro_drift(s: NeuroState, p: NeuroParams) -> NeuroState:
    """Deterministic part of ``(dV/dt, dmu/dt)``."""
    dv, dmu = _drift(s.V, s.mu, p)
    return NeuroState(dv, dmu)


def _drift(V, mu, p: NeuroParams):
    r = p.gain * (V - p.T) if V > p.T else 0.0
    dep = p.U * r * mu if p.depression_scales_with_mu else p.U * r
    return (-V + p.J * mu * r) / p.tau, (1.0 - mu) / p.t_r - dep


def _drift_about(base: NeuroState, dv, dm, p: NeuroParams):
    """Drift at ``base + (dv, dm)`` expanded exactly about ``base``.

    Near threshold the voltage drift is a small difference of terms of size
    ``V``; expanding about a nearby point keeps the variable part free of
    that cancellation, which adaptive integrators and finite differences
    need.
    """
    uf = base.V - p.T
    u = uf + dv
    m = base.mu
    if u > 0.0:
        jg = p.J * p.gain
        rv = (-base.V + jg * m * uf if uf > 0.0 else -base.V) / p.tau
        dV = rv + (-dv + jg * (m * u - (m * uf if uf > 0.0 else 0.0) + dm * u)) / p.tau
        ug = p.U * p.gain
        rf = max(uf, 0.0)
        if p.depression_scales_with_mu:
            rm = (1.0 - m) / p.t_r - ug * rf * m
            dM = rm - dm / p.t_r - ug * (u * (m + dm) - rf * m)
        else:
            rm = (1.0 - m) / p.t_r - ug * rf
            dM = rm - dm / p.t_r - ug * (u - rf)
        return dV, dM
    return (-base.V - dv) / p.tau, (1.0 - m - dm) / p.t_r


def jacobian(s: NeuroState, p: NeuroParams) -> np.ndarray:
    """Analytic Jacobian (one-sided from above at ``V = T``)."""
    if s.V >= p.T:
        r = p.gain * (s.V - p.T)
        dvv = (-1.0 + p.J * s.mu * p.gain) / p.tau
        dvm = p.J * r / p.tau
        if p.depression_scales_with_mu:
            return np.array([[dvv, dvm], [-p.U * p.gain * s.mu, -1.0 / p.t_r - p.U * r]])
        return np.array([[dvv, dvm], [-p.U * p.gain, -1.0 / p.t_r]])
    return np.array([[-1.0 / p.tau, 0.0], [0.0, -1.0 / p.t_r]])


def classify(jac: np.ndarray) -> tuple[Classification, np.ndarray]:
    ev = np.linalg.eigvals(jac)
    re = ev.real
    if re[0] * re[1] < 0:
        return Classification.SADDLE, ev
    focus = abs(ev[0].imag) > 0
    if np.all(re < 0):
        return (Classification.STABLE_FOCUS if focus else Classification.STABLE_NODE), ev
    return (Classification.UNSTABLE_FOCUS if focus else Classification.UNSTABLE_NODE), ev


@dataclass
class CriticalPoint:
    state: NeuroState
    classification: Classification
    eigenvalues: np.ndarray


@dataclass
class CriticalSet:
    points: list[CriticalPoint]
    focus_eigen: tuple[complex, complex] | None

    @property
    def focus(self) -> NeuroState:
        for c in self.points:
            if c.classification is Classification.STABLE_FOCUS:
                return c.state
        raise DegenerateRegime("no stable focus among the critical points", self.points)

    @property
    def focus_period(self) -> float:
        return 2.0 * np.pi / abs(self.focus_eigen[0].imag)

    def to_dict(self) -> dict:
        return {
            "points": [{"V": c.state.V, "mu": c.state.mu, "classification": c.classification.value,
                        "eigenvalues": [[e.real, e.imag] for e in c.eigenvalues]} for c in self.points],
            "focus_eigen": None if self.focus_eigen is None
            else [[e.real, e.imag] for e in self.focus_eigen],
        }


def _mu_on_nullcline(u, p: NeuroParams):
    # dmu/dt = 0 on the branch V = T + u, u > 0
    k = p.t_r * p.U * p.gain * u
    return 1.0 / (1.0 + k) if p.depression_scales_with_mu else 1.0 - k


def _reduced(u, p: NeuroParams):
    """Voltage drift (times tau) along the mu-nullcline, as a function of ``V - T``."""
    return -(p.T + u) + p.J * _mu_on_nullcline(u, p) * p.gain * u


def critical_points(p: NeuroParams, n_scan: int = 20001) -> CriticalSet:
    """All equilibria: the quiescent point ``(0, 1)`` plus roots above threshold.

    Roots above threshold are bracketed by sign changes of the voltage drift
    along the ``mu``-nullcline on a grid that is dense both near threshold
    (geometric) and far from it (linear), then refined with Brent's method.
    """
    if p.depression_scales_with_mu:
        u_max = 2.0 * p.J / (p.t_r * p.U) + p.T
    else:
        # beyond this mu < 0 and the drift is strictly negative
        u_max = 1.0 / (p.t_r * p.U * p.gain)
    grid = np.unique(np.concatenate([
        np.geomspace(u_max * 1e-14, u_max, n_scan),
        np.linspace(0.0, u_max, n_scan)[1:],
    ]))
    f = np.array([_reduced(u, p) for u in grid])
    roots = []
    for a, b, fa, fb in zip(grid[:-1], grid[1:], f[:-1], f[1:]):
        if fa == 0.0:
            roots.append(a)
        elif fa * fb < 0.0:
            roots.append(brentq(_reduced, a, b, args=(p,), xtol=1e-300, rtol=1e-15, maxiter=500))
    states = [NeuroState(0.0, 1.0)]
    for u in roots:
        v = p.T + u
        # nullcline evaluated at the stored voltage, not at the unrounded root
        states.append(NeuroState(v, _mu_on_nullcline(v - p.T, p)))
    pts = []
    for s in states:
        kind, ev = classify(jacobian(s, p))
        pts.append(CriticalPoint(s, kind, ev))
    if len(pts) < 3:
        raise DegenerateRegime(f"found {len(pts)} critical point(s); connectivity below the minimal value", pts)
    foci = [c for c in pts if c.classification is Classification.STABLE_FOCUS]
    eig = None
    if foci:
        e = foci[0].eigenvalues
        eig = (complex(e[0]), complex(e[1]))
    return CriticalSet(pts, eig)


def finite_difference_jacobian(s: NeuroState, p: NeuroParams, rel: float = 1e-6) -> np.ndarray:
    """Central differences of the drift, taken in the expanded form about ``s``."""
    hv = rel * max(abs(s.V - p.T), 1e-300)
    hm = rel * max(abs(s.mu), 1e-300)
    cols = []
    for dv, dm, h in ((hv, 0.0, hv), (0.0, hm, hm)):
        fp = np.array(_drift_about(s, dv, dm, p))
        fm = np.array(_drift_about(s, -dv, -dm, p))
        cols.append((fp - fm) / (2.0 * h))
    return np.column_stack(cols)


@dataclass
class LimitCycle:
    """Closed polyline of the unstable cycle around the focus.

    ``scale`` holds the voltage and ``mu`` units in which the polyline is
    well conditioned; the star-shaped resampling used by the simulation
    kernel lives in those units.
    """

    points: np.ndarray  # (n, 2) columns V, mu; last point equals the first up to closure
    center: NeuroState
    scale: tuple[float, float]
    period: float
    closure: float

    def _scaled(self, V, mu):
        return ((np.asarray(V, dtype=float) - self.center.V) / self.scale[0],
                (np.asarray(mu, dtype=float) - self.center.mu) / self.scale[1])

    def contains(self, V, mu):
        """Winding-number membership test; vectorised over the inputs."""
        u, w = self._scaled(V, mu)
        pu, pw = self._scaled(self.points[:, 0], self.points[:, 1])
        u = np.atleast_1d(u)[:, None]
        w = np.atleast_1d(w)[:, None]
        ax, ay = pu[:-1][None, :] - u, pw[:-1][None, :] - w
        bx, by = pu[1:][None, :] - u, pw[1:][None, :] - w
        turn = np.arctan2(ax * by - ay * bx, ax * bx + ay * by).sum(axis=1)
        inside = np.abs(turn) > np.pi
        return bool(inside[0]) if np.ndim(V) == 0 and np.ndim(mu) == 0 else inside

    def polar_profile(self, n: int = CYCLE_VERTICES) -> np.ndarray:
        """Scaled vertices at ``n`` uniform polar angles from ``-pi``."""
        u, w = self._scaled(self.points[:-1, 0], self.points[:-1, 1])
        ang = np.unwrap(np.arctan2(w, u))
        if np.any(np.diff(ang) <= 0) and np.any(np.diff(ang) >= 0):
            raise NoCycleFound("cycle is not star-shaped about the focus")
        order = np.argsort(np.mod(ang + np.pi, 2.0 * np.pi) - np.pi)
        a = (np.mod(ang + np.pi, 2.0 * np.pi) - np.pi)[order]
        rad = np.hypot(u, w)[order]
        a = np.concatenate([a[-1:] - 2.0 * np.pi, a, a[:1] + 2.0 * np.pi])
        rad = np.concatenate([rad[-1:], rad, rad[:1]])
        theta = -np.pi + 2.0 * np.pi * np.arange(n) / n
        r = np.interp(theta, a, rad)
        return np.column_stack([r * np.cos(theta), r * np.sin(theta)])

    def kernel_params(self, n: int = CYCLE_VERTICES) -> np.ndarray:
        verts = self.polar_profile(n)
        return np.concatenate([[self.center.V, self.center.mu, self.scale[0], self.scale[1], n],
                               verts.ravel()])

    def to_dict(self) -> dict:
        return {"V": self.points[:, 0].tolist(), "mu": self.points[:, 1].tolist(),
                "center": [self.center.V, self.center.mu], "period": self.period,
                "closure": self.closure}


def _cycle_scale(focus: NeuroState, p: NeuroParams) -> tuple[float, float]:
    dv = focus.V - p.T
    return (dv if dv > 0 else 1.0, focus.mu if focus.mu > 0 else 1.0)


def limit_cycle(p: NeuroParams, crit: CriticalSet | None = None, rtol: float = 1e-12,
                r_min: float = 1e-3, r_max: float = 1e3) -> LimitCycle:
    """Unstable cycle around the focus by reversed-time integration.

    Reversing time turns the focus into a source and the cycle into an
    attractor. The first-return map on the ray from the focus along
    positive ``V`` (in scaled units) is scanned on a geometric grid of
    radii until ``return - start`` changes sign; the fixed point is then
    located with Brent's method and its orbit is the polyline.
    """
    crit = critical_points(p) if crit is None else crit
    focus = crit.focus
    su, sw = _cycle_scale(focus, p)
    period_guess = crit.focus_period
    direction = -1.0 if _orientation(crit, p) > 0 else 1.0

    def rhs(_t, z):
        dv, dm = _drift_about(focus, su * z[0], sw * z[1], p)
        return [-dv / su, -dm / sw]

    def section(_t, z):
        return z[1] if z[0] > 0 else direction
    section.direction = direction
    section.terminal = True

    def far(_t, z):
        return z[0] * z[0] + z[1] * z[1] - (10.0 * r_max) ** 2
    far.terminal = True

    horizon = 20.0 * period_guess
    opts = dict(method="DOP853", rtol=rtol, atol=rtol * 1e-3)

    def orbit(r0, dense=False):
        # leave the section before watching for the return
        lead = solve_ivp(rhs, (0.0, 0.25 * period_guess), [r0, 0.0], dense_output=dense, **opts)
        sol = solve_ivp(rhs, (lead.t[-1], horizon), lead.y[:, -1], events=(section, far),
                        dense_output=dense, **opts)
        if len(sol.t_events[0]) == 0:
            return None, None, (lead, sol)
        return float(sol.y_events[0][0][0]), float(sol.t_events[0][0]), (lead, sol)

    def gap(r0):
        r1, _, _ = orbit(r0)
        if r1 is None:
            raise NoCycleFound("reversed orbit did not return to the section")
        return r1 - r0

    radii = np.geomspace(r_min, r_max, 61)
    g_prev = gap(radii[0])
    if g_prev <= 0:
        raise NoCycleFound("focus is not a source in reversed time")
    for r_prev, r_next in zip(radii[:-1], radii[1:]):
        try:
            g_next = gap(r_next)
        except NoCycleFound:
            # no return from this radius: the cycle lies inside it
            g_next = -np.inf
        if g_next <= 0:
            break
        g_prev = g_next
    else:
        raise NoCycleFound("return map did not bracket a cycle")
    r_star = brentq(gap, r_prev, r_next, xtol=1e-14, rtol=1e-15, maxiter=200)
    r_end, t_ret, (lead, sol) = orbit(r_star, dense=True)
    ts = np.linspace(0.0, t_ret, 4001)
    z = np.where(ts <= lead.t[-1], lead.sol(np.minimum(ts, lead.t[-1])),
                 sol.sol(np.maximum(ts, lead.t[-1])))
    z[:, -1] = [r_end, 0.0]
    closure = float(abs(r_end - r_star))
    if closure >= 1e-8:
        raise NoCycleFound(f"orbit closure {closure:.3g} above tolerance")
    pts = np.column_stack([focus.V + su * z[0], focus.mu + sw * z[1]])
    return LimitCycle(pts, focus, (su, sw), float(t_ret), closure)


def _orientation(crit: CriticalSet, p: NeuroParams) -> float:
    """Sign of the forward rotation about the focus in scaled coordinates."""
    focus = crit.focus
    su, sw = _cycle_scale(focus, p)
    jac = jacobian(focus, p)
    # rotation of the scaled field at a point on the positive u-axis
    return jac[1, 0] * su / sw


def mu_excursions(mu) -> int:
    """Number of states with ``mu`` outside ``[0, 1]``; ``mu`` is never clamped."""
    mu = np.asarray(mu, dtype=float)
    return int(np.count_nonzero((mu < 0.0) | (mu > 1.0)))


@dataclass
class UpStateEnsemble:
    records: ExitRecords
    cycle: LimitCycle
    critical: CriticalSet
    exit_V: np.ndarray = field(repr=False, default=None)
    exit_mu: np.ndarray = field(repr=False, default=None)

    @property
    def mu_excursion_count(self) -> int:
        return mu_excursions(self.exit_mu[np.isfinite(self.exit_mu)])


def _neuro_problem(p: NeuroParams, init: NeuroState, cycle: LimitCycle) -> _Problem:
    if not cycle.contains(init.V, init.mu):
        raise InitOutsideDomain(f"initial point {init} is not inside the limit cycle")
    lprm = cycle.kernel_params()
    level = _kernels.star_polygon_level.py_func(init.V, init.mu, lprm)
    if not level < 0.0:
        raise InitOutsideDomain(f"initial point {init} is not inside the sampled cycle")
    v0, m0 = init.V, init.mu

    def sampler(state):
        return np.full(len(state), v0), np.full(len(state), m0)

    c = cycle.center

    def exit_angle(V, mu):
        return np.arctan2((mu - c.mu) / cycle.scale[1], (V - c.V) / cycle.scale[0])

    return _Problem(_kernels.neuro_kernel, p.kernel_params(), lprm, p.voltage_noise, 0.0,
                    (c.V, c.mu), sampler, exit_angle)


def simulate_upstate_ensemble(p: NeuroParams, init: NeuroState, n: int, seed: int,
                              dt: float = 1e-3, t_max: float = 200.0, workers: int | None = None,
                              cycle: LimitCycle | None = None) -> UpStateEnsemble:
    """Euler-Maruyama Up-state durations until the cycle is crossed.

    Exit angles are polar angles about the focus in the cycle's scaled
    units; windings are counted about the focus. Seeding follows the
    per-trajectory stream contract of the Hopf ensembles.
    """
    crit = critical_points(p)
    cycle = limit_cycle(p, crit) if cycle is None else cycle
    problem = _neuro_problem(p, init, cycle)
    cfg = SimConfig(dt=dt, t_max=t_max, init=init.as_tuple(), seed=seed, n_traj=n)
    rec = _run(problem, cfg, workers)
    c = cycle.center
    ang = rec.exit_angle
    # exit point recovered on the sampled cycle from the exit angle
    verts = cycle.polar_profile()
    theta = np.arctan2(verts[:, 1], verts[:, 0])
    rad = np.hypot(verts[:, 0], verts[:, 1])
    r = np.interp(np.nan_to_num(ang), theta, rad, period=2.0 * np.pi)
    ev = np.where(np.isfinite(ang), c.V + cycle.scale[0] * r * np.cos(ang), np.nan)
    em = np.where(np.isfinite(ang), c.mu + cycle.scale[1] * r * np.sin(ang), np.nan)
    return UpStateEnsemble(rec, cycle, crit, ev, em)


def write_neuro_json(path, p: NeuroParams, crit: CriticalSet, cycle: LimitCycle):
    from .sde import FORMAT_VERSION

    doc = {"format_version": FORMAT_VERSION, "params": p.to_dict(), "critical_set": crit.to_dict(),
           "cycle": cycle.to_dict()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


__all__ = [
    "Classification", "CriticalPoint", "CriticalSet", "DegenerateRegime", "DemoDesign", "LimitCycle",
    "NeuroParams", "NeuroState", "NoCycleFound", "UpStateEnsemble", "classify", "critical_points",
    "demo_params", "finite_difference_jacobian", "jacobian", "limit_cycle", "mu_excursions",
    "neuro_drift", "rate_R", "simulate_upstate_ensemble",
]
