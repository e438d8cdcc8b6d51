"""Two-term fit of exit-time densities and comparison with the theoretical rates.

The model is

    y(t) = k1 exp(-k2 t) + k3 exp(-k4 t) cos(k5 (t - k6)),

a slowly decaying principal mode plus the damped oscillation of the first
complex mode. The least-squares problem is solved with a hand-written
Levenberg-Marquardt iteration that only ever accepts steps lowering the cost.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exit_stats import Histogram, Normalization, peak_period
from .field import FieldParams
from .spectral import MfptVariant, mfpt_asymptotic, omega1

N_PHASES = 8
RATE_INDICES = (1, 3, 4)


class InsufficientData(ValueError):
    """Too few bins or counts to constrain six parameters."""


class NotConverged(RuntimeError):
    """Raised only on request; normally a non-converged fit is returned flagged."""


def two_term_model(t, k):
    t = np.asarray(t, dtype=float)
    return k[0] * np.exp(-k[1] * t) + k[2] * np.exp(-k[3] * t) * np.cos(k[4] * (t - k[5]))


def two_term_jacobian(t, k) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    e1 = np.exp(-k[1] * t)
    e2 = np.exp(-k[3] * t)
    arg = k[4] * (t - k[5])
    c, s = np.cos(arg), np.sin(arg)
    return np.column_stack([
        e1,
        -k[0] * t * e1,
        e2 * c,
        -k[2] * t * e2 * c,
        -k[2] * e2 * s * (t - k[5]),
        k[2] * e2 * s * k[4],
    ])


@dataclass
class SolverResult:
    x: np.ndarray
    cost: float
    converged: bool
    iterations: int
    cost_history: list[float]


def levenberg_marquardt(residual, jacobian, x0, max_iter: int = 500, gtol: float = 1e-10,
                        xtol: float = 1e-12, feasible=None) -> SolverResult:
    """Damped Gauss-Newton iteration with Marquardt scaling.

    The damping is adapted from the ratio of actual to predicted decrease;
    rejected steps (including infeasible ones) only raise the damping, so the
    accepted cost sequence is non-increasing. Scaling by the diagonal of
    ``J^T J`` makes the iteration invariant to rescaling of the parameters.
    """
    x = np.array(x0, dtype=float)
    r = residual(x)
    cost = 0.5 * float(r @ r)
    history = [cost]
    jac = jacobian(x)
    a = jac.T @ jac
    g = jac.T @ r
    d = np.maximum(np.diag(a), 1e-300)
    mu = 1e-3 * float(np.max(d / d.max())) if d.max() > 0 else 1e-3
    nu = 2.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g) / np.sqrt(d)) <= gtol * max(np.sqrt(2.0 * cost), 1e-300):
            converged = True
            break
        try:
            h = np.linalg.solve(a + mu * np.diag(d), -g)
        except np.linalg.LinAlgError:
            mu *= nu
            nu *= 2.0
            continue
        x_new = x + h
        ok = np.all(np.isfinite(x_new)) and (feasible is None or feasible(x_new))
        if ok:
            r_new = residual(x_new)
            cost_new = 0.5 * float(r_new @ r_new)
            predicted = 0.5 * float(h @ (mu * d * h - g))
            rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
        else:
            rho = -1.0
        if rho > 0 and cost_new <= cost:
            small = np.linalg.norm(h * np.sqrt(d)) <= xtol * (np.linalg.norm(x * np.sqrt(d)) + xtol)
            x, r, cost = x_new, r_new, cost_new
            history.append(cost)
            jac = jacobian(x)
            a = jac.T @ jac
            g = jac.T @ r
            d = np.maximum(d, np.diag(a))
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            if small:
                converged = True
                break
        else:
            mu *= nu
            nu *= 2.0
            if mu > 1e16:
                # no descent direction left at machine precision
                converged = True
                break
    return SolverResult(x, cost, converged, it, history)


@dataclass
class FitResult:
    k1: float
    k2: float
    k3: float
    k4: float
    k5: float
    k6: float
    residual_norm: float
    converged: bool
    iterations: int = 0
    start_index: int = 0
    cost_history: list[float] = field(default_factory=list)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3, self.k4, self.k5, self.k6])

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("cost_history")
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


@dataclass(frozen=True)
class FitInit:
    """Initial guesses; ``None`` entries are estimated from the data."""

    k2: float | None = None
    k4: float = 4.0
    k5: float | None = None
    n_phases: int = N_PHASES
    skip_rise: bool = True


def _canonical(k: np.ndarray) -> np.ndarray:
    k = k.copy()
    if k[2] < 0:
        k[2] = -k[2]
        k[5] += np.pi / k[4]
    period = 2.0 * np.pi / k[4]
    k[5] = float(np.mod(k[5], period))
    return k


def _amplitudes(t, y, sigma, k):
    """Linear least-squares amplitudes for fixed rates, frequency and phase."""
    basis = np.column_stack([np.exp(-k[1] * t), np.exp(-k[3] * t) * np.cos(k[4] * (t - k[5]))])
    coef, *_ = np.linalg.lstsq(basis / sigma[:, None], y / sigma, rcond=None)
    return coef


def fit_curve(t, y, sigma, k2: float, k4: float, k5: float, n_phases: int = N_PHASES,
              max_iter: int = 500, gtol: float = 1e-10) -> FitResult:
    """Weighted two-term fit with a multi-start over the phase ``k6``.

    Winner is the smallest cost, ties broken by the lower start index.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)

    def residual(k):
        return (two_term_model(t, k) - y) / sigma

    def jacobian(k):
        return two_term_jacobian(t, k) / sigma[:, None]

    def feasible(k):
        return k[1] > 0 and k[3] > 0 and k[4] > 0

    best = None
    period = 2.0 * np.pi / k5
    for i in range(n_phases):
        k = np.array([0.0, k2, 0.0, k4, k5, i * period / n_phases])
        k[0], k[2] = _amplitudes(t, y, sigma, k)
        res = levenberg_marquardt(residual, jacobian, k, max_iter=max_iter, gtol=gtol, feasible=feasible)
        if best is None or res.cost < best[1].cost:
            best = (i, res)
    i, res = best
    k = _canonical(res.x)
    ok = bool(res.converged and np.isfinite(res.cost) and feasible(k))
    return FitResult(*map(float, k), residual_norm=float(np.sqrt(2.0 * res.cost)), converged=ok,
                     iterations=res.iterations, start_index=i, cost_history=res.cost_history)


def fit_arrays(h: Histogram, skip_rise: bool = True):
    """Bin centres, values and Poisson standard deviations used as fit target.

    The standard deviation of a bin is ``sqrt(max(count, 1))`` in count units,
    converted to the histogram's normalisation. With ``skip_rise`` the bins
    before the histogram maximum are dropped: the initial rise of the density
    is not part of the two-term model.
    """
    y = h.values
    if h.normalization is Normalization.DENSITY:
        scale = 1.0 / (max(h.n_samples, 1) * h.widths)
    else:
        scale = np.ones_like(y)
    sigma = np.sqrt(np.maximum(h.counts, 1)) * scale
    start = int(np.argmax(h.counts)) if skip_rise else 0
    return h.centers[start:], y[start:], sigma[start:]


def fit_two_term(h: Histogram, init: FitInit = FitInit(), raise_on_failure: bool = False) -> FitResult:
    """Fit the two-term model to a histogram's values at the bin centres."""
    if len(h.counts) < 20 or h.total < 1000:
        raise InsufficientData("need at least 20 bins and 1000 counts")
    t, y, sigma = fit_arrays(h, init.skip_rise)
    if len(t) < 7:
        raise InsufficientData("fewer than seven bins after the initial rise")
    if init.k2 is not None:
        k2 = init.k2
    else:
        mean_t = float(np.sum(h.centers * h.counts) / max(h.total, 1))
        k2 = 1.0 / mean_t
    if init.k5 is not None:
        k5 = init.k5
    else:
        pp = peak_period(h)
        # without a detectable line start from a period of ten bins
        k5 = 2.0 * np.pi / (pp.period if pp is not None else 10.0 * float(np.mean(h.widths)))
    out = fit_curve(t, y, sigma, k2, init.k4, k5, init.n_phases)
    if raise_on_failure and not out.converged:
        raise NotConverged("two-term fit did not converge")
    return out


@dataclass
class ComparisonRow:
    name: str
    theory: float
    fit: float

    @property
    def relative_error(self) -> float:
        return abs(self.fit - self.theory) / abs(self.theory)


def compare_rates(fit_rates, theory_rates) -> list[ComparisonRow]:
    """Rows for (principal rate, frequency, oscillation decay)."""
    names = ("lambda0", "frequency", "decay")
    return [ComparisonRow(n, float(t), float(f)) for n, t, f in zip(names, theory_rates, fit_rates)]


def theory_report(f: FitResult, p: FieldParams, psi_hat: float | None = None) -> list[ComparisonRow]:
    """Fitted ``(k2, k5, k4)`` against ``(1/mfpt, omega, omega1)``."""
    lam0 = 1.0 / mfpt_asymptotic(p, MfptVariant.TAU_ALPHA, psi_hat)
    return compare_rates((f.k2, f.k5, f.k4), (lam0, p.omega, omega1(p)))


def format_report(rows: list[ComparisonRow]) -> str:
    lines = [f"{'quantity':<10} {'theory':>12} {'fit':>12} {'rel.err':>9}"]
    for r in rows:
        lines.append(f"{r.name:<10} {r.theory:>12.6g} {r.fit:>12.6g} {100 * r.relative_error:>8.2f}%")
    return "\n".join(lines)
