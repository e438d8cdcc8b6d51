"""Exit-time histograms, exit-angle densities and the oscillation period of exit times."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy import integrate
from scipy.optimize import least_squares
from scipy.signal import find_peaks

from .sde import FORMAT_VERSION, ExitRecords, check_format_line

ANGLE_GRID = 4096


class EmptyInput(ValueError):
    """Raised when there is nothing to aggregate."""


class GridMismatch(ValueError):
    """Raised when two densities live on different grids."""


class Normalization(str, Enum):
    COUNTS = "Counts"
    DENSITY = "Density"


@dataclass(frozen=True)
class Binning:
    """Equal-width binning rule.

    The range is ``[lower, upper]`` when ``upper`` is given, otherwise
    ``[lower, quantile(upper_quantile)]`` of the finite samples.
    """

    bins: int = 200
    upper_quantile: float = 0.999
    lower: float = 0.0
    upper: float | None = None

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError("bins must be positive")
        if not 0.0 < self.upper_quantile <= 1.0:
            raise ValueError("upper_quantile must lie in (0, 1]")

    def edges(self, samples: np.ndarray) -> np.ndarray:
        hi = self.upper if self.upper is not None else float(np.quantile(samples, self.upper_quantile))
        lo = self.lower
        e = np.linspace(lo, hi, self.bins + 1)
        if not np.all(np.diff(e) > 0):
            # degenerate sample (all equal, or a range too narrow to split): one unit-wide window around it
            e = np.linspace(min(lo, hi) - 0.5, max(lo, hi) + 0.5, self.bins + 1)
        return e


# 1000 bins resolve periods down to ~0.2 at the usual exit-time scales
PERIOD_BINNING = Binning(bins=1000)


@dataclass
class Histogram:
    """Binned exit times.

    ``n_censored`` and ``n_outside`` count samples that are not in ``counts``
    (never exited, or exited outside the binning range). In Density mode the
    values integrate to the fraction of all samples that landed in a bin,
    which is the exited fraction whenever the range covers every exit.
    """

    edges: np.ndarray
    counts: np.ndarray
    total: int
    normalization: Normalization = Normalization.DENSITY
    n_censored: int = 0
    n_outside: int = 0

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.edges.ndim != 1 or len(self.edges) != len(self.counts) + 1:
            raise ValueError("edges must have one more entry than counts")
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("edges must be strictly increasing")
        if np.any(self.counts < 0) or int(self.counts.sum()) != self.total:
            raise ValueError("counts must be non-negative and sum to total")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def n_samples(self) -> int:
        return self.total + self.n_censored + self.n_outside

    @property
    def values(self) -> np.ndarray:
        if self.normalization is Normalization.COUNTS:
            return self.counts.astype(float)
        return self.counts / (max(self.n_samples, 1) * self.widths)

    def as_mode(self, normalization: Normalization) -> Histogram:
        return replace(self, normalization=Normalization(normalization))

    def to_csv(self, path):
        dens = self.as_mode(Normalization.DENSITY).values
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# format_version={FORMAT_VERSION}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_left", "bin_right", "count", "density"])
            for k in range(len(self.counts)):
                w.writerow([repr(float(self.edges[k])), repr(float(self.edges[k + 1])),
                            int(self.counts[k]), repr(float(dens[k]))])

    @classmethod
    def from_csv(cls, path) -> Histogram:
        with open(path, newline="", encoding="utf-8") as fh:
            check_format_line(fh.readline(), path)
            rows = list(csv.DictReader(fh))
        if not rows:
            raise EmptyInput(f"{path}: no bins")
        edges = [float(r["bin_left"]) for r in rows] + [float(rows[-1]["bin_right"])]
        counts = np.array([int(r["count"]) for r in rows], dtype=np.int64)
        return cls(np.array(edges), counts, int(counts.sum()))


def build_histogram(times, binning: Binning = Binning(), n_censored: int = 0,
                    normalization: Normalization = Normalization.DENSITY,
                    edges: np.ndarray | None = None) -> Histogram:
    """Bin exit times.

    Non-finite entries are treated as censored and added to ``n_censored``.
    Explicit ``edges`` override the binning rule.
    """
    t = np.asarray(times, dtype=float).ravel()
    finite = np.isfinite(t)
    t = t[finite]
    if t.size == 0:
        raise EmptyInput("no finite exit times to bin")
    n_censored += int(np.count_nonzero(~finite))
    e = np.asarray(edges, dtype=float) if edges is not None else binning.edges(t)
    counts, _ = np.histogram(t, bins=e)
    total = int(counts.sum())
    return Histogram(e, counts, total, Normalization(normalization), n_censored, int(t.size) - total)


def histogram_from_records(records: ExitRecords, binning: Binning = Binning(),
                           edges: np.ndarray | None = None) -> Histogram:
    return build_histogram(records.exit_times(), binning, records.n_censored, edges=edges)


# ---------------------------------------------------------------- exit angles

@dataclass
class AngularDensity:
    """Density sampled at the centres of equal cells partitioning (-pi, pi]."""

    theta_grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.theta_grid = np.asarray(self.theta_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.theta_grid.shape != self.values.shape or self.theta_grid.ndim != 1:
            raise ValueError("theta_grid and values must be 1-D of equal length")
        if np.any(self.values < 0):
            raise ValueError("density values must be non-negative")

    @property
    def cell(self) -> float:
        return 2.0 * np.pi / len(self.theta_grid)

    def integral(self) -> float:
        # periodic trapezoid rule on a uniform grid
        return float(self.values.sum() * self.cell)

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.values) * self.cell


def angle_grid(m: int = ANGLE_GRID) -> np.ndarray:
    """Centres of ``m`` equal cells partitioning (-pi, pi]."""
    return -np.pi + (np.arange(m) + 0.5) * (2.0 * np.pi / m)


def _exit_density_base(theta, alpha):
    return (1.0 + 2.0 * alpha * np.cos(theta) + alpha * alpha) ** -3


def exit_density_normalizer(alpha: float) -> float:
    """Integral of the unnormalised exit density over one period, by adaptive quadrature."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    # even integrand peaked at pi: integrate over [0, pi] and double
    val, _ = integrate.quad(_exit_density_base, 0.0, np.pi, args=(alpha,),
                            epsabs=0.0, epsrel=1e-13, limit=400)
    return 2.0 * val


def analytic_exit_density(theta, alpha: float):
    """Leading-order exit-point density ``(1 + 2 alpha cos theta + alpha^2)^-3``, normalised."""
    return _exit_density_base(np.asarray(theta, dtype=float), alpha) / exit_density_normalizer(alpha)


def analytic_angular_density(alpha: float, m: int = ANGLE_GRID) -> AngularDensity:
    g = angle_grid(m)
    return AngularDensity(g, analytic_exit_density(g, alpha))


def analytic_cell_density(alpha: float, m: int = 64) -> AngularDensity:
    """Exit density averaged over each of ``m`` equal cells of (-pi, pi].

    This is the exact expectation of an empirical histogram density, so it is
    the right reference when a cell is wider than the density's spread.
    """
    g = angle_grid(m)
    h = 0.5 * (2.0 * np.pi / m)
    vals = [integrate.quad(_exit_density_base, c - h, c + h, args=(alpha,), epsabs=0.0, epsrel=1e-12,
                           limit=200)[0] for c in g]
    return AngularDensity(g, np.array(vals) / (2.0 * h * exit_density_normalizer(alpha)))


def empirical_angular_density(angles, m: int = 64) -> AngularDensity:
    """Histogram density of exit angles on ``m`` equal cells of (-pi, pi]."""
    a = np.asarray(angles, dtype=float)
    a = a[np.isfinite(a)]
    if a.size == 0:
        raise EmptyInput("no exit angles")
    # map onto (-pi, pi] then bin so that the cell containing pi is the last one
    a = np.where(a <= -np.pi, a + 2.0 * np.pi, a)
    k = np.ceil((a + np.pi) / (2.0 * np.pi) * m).astype(np.int64) - 1
    k = np.clip(k, 0, m - 1)
    counts = np.bincount(k, minlength=m)
    return AngularDensity(angle_grid(m), counts / (a.size * 2.0 * np.pi / m))


class ExitDensityMoments(NamedTuple):
    variance: float
    std: float
    asymptotic_std: float


def exit_density_moments(alpha: float) -> ExitDensityMoments:
    """Spread of the exit density around pi, measured with the wrapped angle distance."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    z = exit_density_normalizer(alpha)
    # for theta in [0, pi] the wrapped distance to pi is pi - theta
    val, _ = integrate.quad(lambda t: (np.pi - t) ** 2 * _exit_density_base(t, alpha),
                            0.0, np.pi, epsabs=0.0, epsrel=1e-12, limit=400)
    var = 2.0 * val / z
    return ExitDensityMoments(var, float(np.sqrt(var)), 0.06 * (1.0 - alpha * alpha) ** 2.5)


class DensityDistance(NamedTuple):
    l1: float
    ks: float


def density_distance(empirical: AngularDensity, analytic: AngularDensity) -> DensityDistance:
    """L1 distance of two densities and sup distance of their CDFs."""
    if empirical.theta_grid.shape != analytic.theta_grid.shape or not np.allclose(
            empirical.theta_grid, analytic.theta_grid, rtol=0.0, atol=1e-12):
        raise GridMismatch("densities are sampled on different grids")
    l1 = float(np.abs(empirical.values - analytic.values).sum() * empirical.cell)
    ks = float(np.max(np.abs(empirical.cdf() - analytic.cdf())))
    return DensityDistance(l1, ks)


def write_angular_csv(path, empirical: AngularDensity, analytic: AngularDensity):
    density_distance(empirical, analytic)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# format_version={FORMAT_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "density_empirical", "density_analytic"])
        for t, e, a in zip(empirical.theta_grid, empirical.values, analytic.values):
            w.writerow([repr(float(t)), repr(float(e)), repr(float(a))])


# ------------------------------------------------------------- peak analysis

@dataclass(frozen=True)
class SpectralConfig:
    """Knobs for the oscillation analysis of an exit-time histogram.

    ``floor_factor`` sets the detection threshold as a multiple of the median
    residual spectrum magnitude; ``padding`` is the zero-padding factor of
    the DFT; spectral lines closer than ``guard_cells`` resolution cells to
    zero frequency are ignored because they only reflect trend misfit.
    With ``refine`` the line position is refined by a least-squares fit of a
    damped cosine plus exponential background; the bare DFT maximum of a
    strongly damped line is pulled by its negative-frequency image.
    """

    floor_factor: float = 4.0
    padding: int = 8
    guard_cells: int = 2
    refine: bool = True


class PeakPeriod(NamedTuple):
    period: float
    confidence: float  # peak magnitude over the median spectrum magnitude


@dataclass
class ResidualSpectrum:
    frequencies: np.ndarray
    magnitude: np.ndarray
    median: float
    lines: np.ndarray = field(default_factory=lambda: np.empty(0, np.intp))


def detrend_exponential(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Residual of ``y`` after a weighted log-linear single-exponential fit.

    Weights ``sqrt(y)`` make the fit invariant to rescaling of ``y`` and damp
    the noisy tail. Zero bins do not enter the fit.
    """
    pos = y > 0
    if np.count_nonzero(pos) < 2:
        return y - y.mean()
    w = np.sqrt(y[pos])
    a = np.column_stack([np.ones(np.count_nonzero(pos)), t[pos]])
    coef, *_ = np.linalg.lstsq(a * w[:, None], np.log(y[pos]) * w, rcond=None)
    return y - np.exp(coef[0] + coef[1] * t)


def residual_spectrum(h: Histogram, cfg: SpectralConfig = SpectralConfig()) -> ResidualSpectrum:
    """Amplitude spectrum of the detrended histogram from its maximum onwards.

    Bins before the maximum hold the initial rise of the density, which no
    single exponential describes.
    """
    y = h.values
    k0 = int(np.argmax(y))
    t = h.centers[k0:]
    res = detrend_exponential(t, y[k0:])
    width = float(np.mean(h.widths))
    n = cfg.padding * len(res)
    mag = np.abs(np.fft.rfft(res, n=n))
    freq = np.fft.rfftfreq(n, d=width)
    lo = cfg.guard_cells * cfg.padding
    body = mag[lo:]
    med = float(np.median(body)) if body.size else 0.0
    # residual at round-off level carries no oscillation
    if body.size == 0 or np.max(np.abs(res)) <= 1e-9 * np.max(np.abs(y)):
        return ResidualSpectrum(freq, mag, med)
    pk, _ = find_peaks(mag)
    pk = pk[(pk >= lo) & (mag[pk] > cfg.floor_factor * med)]
    return ResidualSpectrum(freq, mag, med, pk)


def peak_period(h: Histogram, cfg: SpectralConfig = SpectralConfig()) -> PeakPeriod | None:
    """Dominant oscillation period of an exit-time histogram, or None if no line clears the floor."""
    if len(h.counts) < 4:
        return None
    s = residual_spectrum(h, cfg)
    if s.lines.size == 0:
        return None
    k = int(s.lines[np.argmax(s.magnitude[s.lines])])
    f = s.frequencies[k]
    # parabolic refinement of the line position
    if 0 < k < len(s.magnitude) - 1:
        a, b, c = s.magnitude[k - 1], s.magnitude[k], s.magnitude[k + 1]
        den = a - 2.0 * b + c
        if den < 0:
            f += 0.5 * (a - c) / den * (s.frequencies[1] - s.frequencies[0])
    if cfg.refine:
        f = _refine_frequency(h, f)
    return PeakPeriod(1.0 / f, float(s.magnitude[k] / s.median))


def _refine_frequency(h: Histogram, f0: float, max_shift: float = 0.2) -> float:
    """Frequency of ``A e^{-l t} + e^{-g t} (a cos wt + b sin wt)`` fitted from the histogram maximum on.

    The amplitudes are projected out, so only ``(l, g, w)`` are searched.
    Weights ``1 / sqrt(y)`` keep the result invariant to rescaling of ``y``.
    Returns ``f0`` when the fit fails or leaves the detected line.
    """
    y = h.values
    k0 = int(np.argmax(y))
    t = h.centers[k0:] - h.centers[k0]
    y = y[k0:]
    pos = y > 0
    if np.count_nonzero(pos) < 8:
        return f0
    sig = np.sqrt(np.maximum(y, np.min(y[pos])))
    w = np.sqrt(y[pos])
    a = np.column_stack([np.ones(np.count_nonzero(pos)), t[pos]])
    coef, *_ = np.linalg.lstsq(a * w[:, None], np.log(y[pos]) * w, rcond=None)
    lam0 = max(-coef[1], 1e-3 / max(t[-1], 1e-300))
    om0 = 2.0 * np.pi * f0

    def resid(q):
        e = np.exp(-q[1] * t)
        basis = np.column_stack([np.exp(-q[0] * t), e * np.cos(q[2] * t), e * np.sin(q[2] * t)]) / sig[:, None]
        c, *_ = np.linalg.lstsq(basis, y / sig, rcond=None)
        return basis @ c - y / sig

    lo = [0.0, 0.0, (1.0 - max_shift) * om0]
    hi = [np.inf, np.inf, (1.0 + max_shift) * om0]
    best = None
    for g0 in (lam0, 4.0 * lam0, om0 / 10.0, om0 / 3.0):
        try:
            r = least_squares(resid, [lam0, g0, om0], bounds=(lo, hi), x_scale=[lam0, max(g0, lam0), om0],
                              xtol=1e-12, ftol=1e-12)
        except (ValueError, np.linalg.LinAlgError):
            continue
        if r.success and np.all(np.isfinite(r.x)) and (best is None or r.cost < best.cost):
            best = r
    if best is None or abs(best.x[2] / om0 - 1.0) >= max_shift * (1.0 - 1e-9):
        return f0
    return float(best.x[2] / (2.0 * np.pi))


def spectral_line_count(h: Histogram, cfg: SpectralConfig = SpectralConfig()) -> int:
    """Number of separated spectral lines above the floor.

    Neighbouring maxima on one broad line are merged by requiring a
    prominence of at least half the floor.
    """
    s = residual_spectrum(h, cfg)
    if s.lines.size == 0:
        return 0
    pk, props = find_peaks(s.magnitude, prominence=0.5 * cfg.floor_factor * s.median)
    return int(np.count_nonzero(np.isin(pk, s.lines)))


def significant_peak_count(h: Histogram, n_sigma: float = 4.0) -> int:
    """Number of histogram maxima standing out from their surroundings.

    A local maximum counts when its prominence exceeds ``n_sigma`` Poisson
    standard deviations of its bin count.
    """
    c = h.counts.astype(float)
    pk, props = find_peaks(np.concatenate([[0.0], c, [0.0]]), prominence=0.0)
    pk = pk - 1
    sig = props["prominences"] > n_sigma * np.sqrt(np.maximum(c[pk], 1.0))
    return int(np.count_nonzero(sig))


def first_peak_mass(records: ExitRecords) -> float:
    """Fraction of exited trajectories that left before completing a turn around the focus."""
    ex = records.exited
    n = int(np.count_nonzero(ex))
    if n == 0:
        raise EmptyInput("no exited trajectories")
    return float(np.count_nonzero(records.winding_count[ex] == 0)) / n


def winding_fractions(records: ExitRecords) -> dict[int, float]:
    ex = records.exited
    w = records.winding_count[ex]
    if w.size == 0:
        raise EmptyInput("no exited trajectories")
    ks, n = np.unique(w, return_counts=True)
    return {int(k): float(c) / w.size for k, c in zip(ks, n)}


def winding_conditioned(records: ExitRecords, binning: Binning = Binning()) -> dict[int, Histogram]:
    """One histogram per winding class on the grid of the unconditioned histogram.

    Each class histogram is normalised by the full sample size, so the class
    histograms add up bin by bin to the unconditioned one.
    """
    if len(records) == 0 or not np.any(records.exited):
        raise EmptyInput("no exited trajectories")
    base = histogram_from_records(records, binning)
    ex = records.exited
    out = {}
    for k in np.unique(records.winding_count[ex]):
        t = records.exit_time[ex & (records.winding_count == k)]
        counts, _ = np.histogram(t, bins=base.edges)
        total = int(counts.sum())
        out[int(k)] = Histogram(base.edges, counts, total, base.normalization,
                                n_outside=base.n_samples - total)
    return out


def class_mean_times(records: ExitRecords) -> dict[int, float]:
    ex = records.exited
    return {int(k): float(records.exit_time[ex & (records.winding_count == k)].mean())
            for k in np.unique(records.winding_count[ex])}
