"""Euler-Maruyama ensembles with exit detection and winding counts.

Every trajectory owns a xoshiro256++ stream seeded from
``SeedSequence(seed, spawn_key=(traj_index,))``, so an ensemble is a pure
function of its configuration: splitting the work over threads or chunks
cannot change a single bit of the output.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import _kernels
from .field import FieldParams, drift_alpha

FORMAT_VERSION = 1
DEFAULT_SEED = 0xC0FFEE
CHUNK = 1024
BLOCK = 32
UNIFORM_DISK = "uniform-disk"


class InitOutsideDomain(ValueError):
    """The initial point is not strictly inside the escape domain."""


class FormatVersionError(ValueError):
    """A data file carries an unknown or missing format version."""


class ExitStatus(IntEnum):
    EXITED = 1
    CENSORED = 2


@dataclass(frozen=True)
class SimConfig:
    """Simulation controls.

    ``init`` is either an ``(x, y)`` point or the tag ``"uniform-disk"``.
    """

    dt: float = 1e-4
    t_max: float = 100.0
    init: tuple[float, float] | str = (-0.8, 0.0)
    seed: int = DEFAULT_SEED
    n_traj: int = 1

    def __post_init__(self):
        if not (self.dt > 0.0 and np.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not self.dt <= self.t_max:
            raise ValueError("t_max must be at least dt")
        if int(self.n_traj) != self.n_traj or self.n_traj < 1:
            raise ValueError("n_traj must be a positive integer")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if isinstance(self.init, str):
            if self.init != UNIFORM_DISK:
                raise ValueError(f"unknown init tag {self.init!r}")
        else:
            object.__setattr__(self, "init", (float(self.init[0]), float(self.init[1])))

    @property
    def max_steps(self) -> int:
        # steps never overshoot the horizon, so exit_time <= t_max always holds
        return int(np.floor(self.t_max / self.dt * (1.0 + 1e-12)))


@dataclass(frozen=True)
class ExitRecord:
    traj_index: int
    exit_time: float
    exit_angle: float
    winding_count: int
    status: ExitStatus


@dataclass
class ExitRecords:
    """Column store of per-trajectory outcomes.

    Censored rows carry the horizon as ``exit_time`` and ``nan`` as angle.
    """

    traj_index: np.ndarray
    exit_time: np.ndarray
    exit_angle: np.ndarray
    winding_count: np.ndarray
    status: np.ndarray

    def __len__(self):
        return len(self.traj_index)

    def __getitem__(self, k) -> ExitRecord:
        return ExitRecord(int(self.traj_index[k]), float(self.exit_time[k]),
                          float(self.exit_angle[k]), int(self.winding_count[k]),
                          ExitStatus(int(self.status[k])))

    @property
    def exited(self) -> np.ndarray:
        return self.status == ExitStatus.EXITED

    @property
    def n_censored(self) -> int:
        return int(np.count_nonzero(self.status == ExitStatus.CENSORED))

    def exit_times(self) -> np.ndarray:
        return self.exit_time[self.exited]

    def select(self, mask) -> ExitRecords:
        return ExitRecords(self.traj_index[mask], self.exit_time[mask], self.exit_angle[mask],
                           self.winding_count[mask], self.status[mask])

    def equals(self, other: ExitRecords) -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f), equal_nan=f in ("exit_time", "exit_angle"))
                   for f in ("traj_index", "exit_time", "exit_angle", "winding_count", "status"))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# format_version={FORMAT_VERSION}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["traj_index", "exit_time", "exit_angle", "winding_count", "status"])
            for k in range(len(self)):
                w.writerow([int(self.traj_index[k]), _fmt(self.exit_time[k]), _fmt(self.exit_angle[k]),
                            int(self.winding_count[k]), ExitStatus(int(self.status[k])).name.capitalize()])

    @classmethod
    def from_csv(cls, path) -> ExitRecords:
        with open(path, newline="", encoding="utf-8") as fh:
            check_format_line(fh.readline(), path)
            rows = list(csv.DictReader(fh))
        names = {s.name.capitalize(): int(s) for s in ExitStatus}
        return cls(
            traj_index=np.array([int(r["traj_index"]) for r in rows], dtype=np.int64),
            exit_time=np.array([float(r["exit_time"]) for r in rows]),
            exit_angle=np.array([float(r["exit_angle"]) for r in rows]),
            winding_count=np.array([int(r["winding_count"]) for r in rows], dtype=np.int64),
            status=np.array([names[r["status"]] for r in rows], dtype=np.int8),
        )


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else repr(float(v))


def check_format_line(line: str, path="input"):
    line = line.strip()
    if not line.startswith("# format_version="):
        raise FormatVersionError(f"{path}: missing format_version line")
    version = line.split("=", 1)[1].strip()
    if version != str(FORMAT_VERSION):
        raise FormatVersionError(f"{path}: unsupported format_version {version}")


def default_workers() -> int:
    env = os.environ.get("ESCAPE_LAB_THREADS", "").strip()
    if env:
        n = int(env)
        if n > 0:
            return n
    return os.cpu_count() or 1


def stream_states(seed: int, indices) -> np.ndarray:
    """Initial xoshiro256++ states, one row per trajectory index."""
    out = np.empty((len(indices), 4), dtype=np.uint64)
    for k, j in enumerate(indices):
        s = np.random.SeedSequence(int(seed), spawn_key=(int(j),)).generate_state(4, np.uint64)
        if not s.any():
            s[0] = 1
        out[k] = s
    return out


def em_step(x, y, dt: float, noise, params: FieldParams):
    """One Euler-Maruyama step of the transformed Hopf SDE."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    bx, by = drift_alpha(x, y, params)
    amp = np.sqrt(2.0 * params.eps * dt)
    return x + bx * dt + amp * noise[0], y + by * dt + amp * noise[1]


@dataclass(frozen=True)
class _Problem:
    """Everything a compiled kernel needs besides the per-trajectory arrays."""

    kernel: object
    dprm: np.ndarray
    lprm: np.ndarray
    noise_x: float
    noise_y: float
    focus: tuple[float, float]
    start_sampler: object  # callable(states) -> (x0, y0); advances the states
    exit_angle: object = None  # callable(x, y) -> polar angle of an exit point


def _run_chunk(problem: _Problem, cfg: SimConfig, lo: int, hi: int, dt: float, combine: int):
    idx = np.arange(lo, hi, dtype=np.int64)
    state = stream_states(cfg.seed, idx)
    x, y = problem.start_sampler(state)
    x = np.array(x, dtype=float)
    y = np.array(y, dtype=float)
    fx, fy = problem.focus
    dx, dy = x - fx, y - fy
    norm = np.hypot(dx, dy)
    safe = norm > 0.0
    dirx = np.where(safe, dx / np.where(safe, norm, 1.0), 1.0)
    diry = np.where(safe, dy / np.where(safe, norm, 1.0), 0.0)
    m = hi - lo
    steps = np.zeros(m, np.int64)
    turns = np.zeros(m, np.int64)
    status = np.zeros(m, np.int8)
    exit_t = np.full(m, np.nan)
    exit_x = np.full(m, np.nan)
    exit_y = np.full(m, np.nan)
    max_steps = int(np.floor(cfg.t_max / dt * (1.0 + 1e-12)))
    problem.kernel(x, y, steps, turns, status, exit_t, exit_x, exit_y, state, dt, max_steps,
                   problem.dprm, problem.lprm, problem.noise_x * np.sqrt(dt), problem.noise_y * np.sqrt(dt),
                   fx, fy, dirx, diry, BLOCK, combine)
    done = status == ExitStatus.EXITED
    ex = np.where(done, exit_x, x)
    ey = np.where(done, exit_y, y)
    # total angle swept around the focus: full cut crossings plus the final offset
    rx, ry = ex - fx, ey - fy
    final = np.arctan2(dirx * ry - diry * rx, dirx * rx + diry * ry)
    swept = 2.0 * np.pi * turns + final
    winding = np.floor(np.abs(swept) / (2.0 * np.pi)).astype(np.int64)
    angle = problem.exit_angle(ex, ey) if problem.exit_angle else np.arctan2(ey, ex)
    return ExitRecords(
        traj_index=idx,
        exit_time=np.where(done, exit_t, steps * dt),
        exit_angle=np.where(done, angle, np.nan),
        winding_count=winding,
        status=status,
    )


def _run(problem: _Problem, cfg: SimConfig, workers: int | None = None, dt: float | None = None,
         combine: int = 1, chunk: int = CHUNK) -> ExitRecords:
    dt = cfg.dt if dt is None else dt
    n = int(cfg.n_traj)
    bounds = [(lo, min(n, lo + chunk)) for lo in range(0, n, chunk)]
    workers = default_workers() if workers is None or workers <= 0 else workers
    if workers == 1 or len(bounds) == 1:
        parts = [_run_chunk(problem, cfg, lo, hi, dt, combine) for lo, hi in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _run_chunk(problem, cfg, b[0], b[1], dt, combine), bounds))
    return concat_records(parts)


def concat_records(parts) -> ExitRecords:
    return ExitRecords(*(np.concatenate([getattr(p, f) for p in parts])
                         for f in ("traj_index", "exit_time", "exit_angle", "winding_count", "status")))


@_kernels.nb.njit
def _uniform_disk(state):
    n = state.shape[0]
    x = np.empty(n)
    y = np.empty(n)
    for j in range(n):
        s0, s1, s2, s3 = state[j, 0], state[j, 1], state[j, 2], state[j, 3]
        while True:
            u, s0, s1, s2, s3 = _kernels.xoshiro_next(s0, s1, s2, s3)
            v, s0, s1, s2, s3 = _kernels.xoshiro_next(s0, s1, s2, s3)
            a = 2.0 * _kernels._unit(u) - 1.0
            b = 2.0 * _kernels._unit(v) - 1.0
            if a * a + b * b < 1.0:
                break
        x[j] = a
        y[j] = b
        state[j, 0], state[j, 1], state[j, 2], state[j, 3] = s0, s1, s2, s3
    return x, y


def _hopf_problem(cfg: SimConfig, params: FieldParams) -> _Problem:
    if isinstance(cfg.init, str):
        sampler = _uniform_disk
    else:
        x0, y0 = cfg.init
        if not x0 * x0 + y0 * y0 < 1.0:
            raise InitOutsideDomain(f"initial point {cfg.init} is not inside the unit disk")

        def sampler(state):
            return np.full(len(state), x0), np.full(len(state), y0)

    amp = np.sqrt(2.0 * params.eps)
    return _Problem(_kernels.hopf_kernel, np.array([params.alpha, params.omega, params.lam]),
                    np.zeros(1), amp, amp, (-params.alpha, 0.0), sampler)


def run_ensemble(cfg: SimConfig, params: FieldParams, workers: int | None = None) -> ExitRecords:
    """Simulate ``cfg.n_traj`` independent exits of the transformed Hopf SDE.

    Exit is detected on ``|zeta|^2 >= 1``; time and angle of the crossing are
    linearly interpolated in ``|zeta|^2`` between the last two states.
    """
    return _run(_hopf_problem(cfg, params), cfg, workers)


def simulate_to_exit(cfg: SimConfig, params: FieldParams, traj_index: int = 0) -> ExitRecord:
    """Single trajectory ``traj_index`` of the ensemble defined by ``cfg``."""
    problem = _hopf_problem(cfg, params)
    return _run_chunk(problem, cfg, traj_index, traj_index + 1, cfg.dt, 1)[0]


def step_audit(cfg: SimConfig, params: FieldParams, workers: int | None = None):
    """Run at ``dt`` and ``dt / 2`` on the same Brownian paths.

    Returns ``(coarse, fine)`` record collections with matching indices.
    """
    problem = _hopf_problem(cfg, params)
    coarse = _run(problem, cfg, workers, dt=cfg.dt, combine=2)
    fine = _run(problem, cfg, workers, dt=cfg.dt / 2.0, combine=1)
    return coarse, fine


def write_records(records: ExitRecords, path) -> Path:
    path = Path(path)
    records.to_csv(path)
    return path
