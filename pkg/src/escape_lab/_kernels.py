"""Compiled hot loops: xoshiro256++ streams, ziggurat normals, Euler-Maruyama blocks.

Generator state is threaded through scalar tuples rather than arrays; numba then
keeps it in registers, which is several times faster than mutating a state
array in a non-inlined call.
"""

from __future__ import annotations

import numba as nb
import numpy as np

U64 = nb.uint64
INV_2_53 = 1.0 / 9007199254740992.0
ZIG_R = 3.6541528853610088
ZIG_V = 0.00492867323399
ZIG_LAYERS = 256


def ziggurat_tables(n: int = ZIG_LAYERS):
    """Layer abscissae (decreasing, ``x[n] = 0``) and ``exp(-x^2/2)`` at them."""
    x = np.zeros(n + 1)
    x[0] = ZIG_V / np.exp(-0.5 * ZIG_R * ZIG_R)
    x[1] = ZIG_R
    for i in range(2, n):
        x[i] = np.sqrt(-2.0 * np.log(ZIG_V / x[i - 1] + np.exp(-0.5 * x[i - 1] ** 2)))
    return x, np.exp(-0.5 * x * x)


ZIG_X, ZIG_F = ziggurat_tables()


@nb.njit(inline="always")
def xoshiro_next(s0, s1, s2, s3):
    """One xoshiro256++ output; returns ``(value, s0, s1, s2, s3)``."""
    w = s0 + s3
    r = ((w << U64(23)) | (w >> U64(41))) + s0
    t = s1 << U64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = (s3 << U64(45)) | (s3 >> U64(19))
    return r, s0, s1, s2, s3


@nb.njit(inline="always")
def _unit(u):
    return np.int64(u >> U64(11)) * INV_2_53


@nb.njit(inline="always")
def std_normal(s0, s1, s2, s3):
    """Standard normal by the 256-layer ziggurat with Marsaglia's tail."""
    while True:
        u, s0, s1, s2, s3 = xoshiro_next(s0, s1, s2, s3)
        i = np.intp(u & U64(0xFF))
        neg = (u & U64(0x100)) != U64(0)
        x = _unit(u) * ZIG_X[i]
        if x < ZIG_X[i + 1]:
            return (-x if neg else x), s0, s1, s2, s3
        if i == 0:
            while True:
                v, s0, s1, s2, s3 = xoshiro_next(s0, s1, s2, s3)
                a = -np.log(1.0 - _unit(v)) / ZIG_R
                v, s0, s1, s2, s3 = xoshiro_next(s0, s1, s2, s3)
                b = -np.log(1.0 - _unit(v))
                if b + b > a * a:
                    break
            x = ZIG_R + a
            return (-x if neg else x), s0, s1, s2, s3
        v, s0, s1, s2, s3 = xoshiro_next(s0, s1, s2, s3)
        h = ZIG_F[i] + _unit(v) * (ZIG_F[i + 1] - ZIG_F[i])
        if h < np.exp(-0.5 * x * x):
            return (-x if neg else x), s0, s1, s2, s3


@nb.njit
def raw_stream(state, n):
    """``n`` raw 64-bit outputs; ``state`` (uint64[4]) is advanced in place."""
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    out = np.empty(n, dtype=np.uint64)
    for k in range(n):
        out[k], s0, s1, s2, s3 = xoshiro_next(s0, s1, s2, s3)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return out


@nb.njit
def normal_stream(state, n):
    """``n`` standard normals; ``state`` (uint64[4]) is advanced in place."""
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    out = np.empty(n)
    for k in range(n):
        out[k], s0, s1, s2, s3 = std_normal(s0, s1, s2, s3)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return out


@nb.njit(inline="always")
def hopf_alpha_drift(x, y, prm):
    # prm = (alpha, omega, lam)
    a = prm[0]
    ux = x + a
    vx = 1.0 + a * x
    vy = a * y
    px = ux * vx - y * vy
    py = ux * vy + y * vx
    q = (ux * ux + y * y) / (vx * vx + vy * vy) - 1.0
    s = prm[2] / (1.0 - a * a)
    return s * (px * q - py * prm[1]), s * (px * prm[1] + py * q)


@nb.njit(inline="always")
def unit_disk_level(x, y, prm):
    return x * x + y * y - 1.0


@nb.njit(inline="always")
def neuro_drift(v, mu, prm):
    # prm = (tau, J, U, t_r, T, gain, depression_scales_with_mu)
    r = prm[5] * (v - prm[4]) if v > prm[4] else 0.0
    dep = prm[2] * r * mu if prm[6] != 0.0 else prm[2] * r
    return (-v + prm[1] * mu * r) / prm[0], (1.0 - mu) / prm[3] - dep


@nb.njit(inline="always")
def star_polygon_level(v, mu, prm):
    """Signed distance (scaled units) outside a star-shaped polygon.

    prm = (cv, cmu, sv, smu, n, then n vertex pairs in scaled coordinates at
    uniformly spaced polar angles starting at -pi).
    """
    u = (v - prm[0]) / prm[2]
    w = (mu - prm[1]) / prm[3]
    n = np.intp(prm[4])
    ang = np.arctan2(w, u)
    k = np.intp((ang + np.pi) * n / (2.0 * np.pi))
    if k >= n:
        k = n - 1
    k1 = k + 1 if k + 1 < n else 0
    ax = prm[5 + 2 * k]
    ay = prm[6 + 2 * k]
    ex = prm[5 + 2 * k1] - ax
    ey = prm[6 + 2 * k1] - ay
    return -(ex * (w - ay) - ey * (u - ax)) / np.sqrt(ex * ex + ey * ey)


def make_block_kernel(drift, level):
    """Build an ensemble kernel for a 2-D additive-noise SDE.

    Each live trajectory pre-draws the normals for ``block`` steps from its
    own stream, then all live trajectories advance ``block`` Euler-Maruyama
    steps in lockstep. Every trajectory consumes its stream in the same order
    whatever the batch composition, so results do not depend on how work is
    split. With ``combine = m`` each step uses the normalised sum of ``m``
    consecutive draws per component, which reproduces the Brownian path of a
    run with step ``dt / m`` on the same stream.
    """

    @nb.njit(nogil=True)
    def kernel(x, y, steps, turns, status, exit_t, exit_x, exit_y, state,
               dt, max_steps, dprm, lprm, sx, sy, fx, fy, dirx, diry, block, combine):
        nb_traj = x.shape[0]
        width = 2 * combine * block
        z = np.empty((nb_traj, width))
        scale = 1.0 / np.sqrt(combine)
        live = np.empty(nb_traj, np.intp)
        m = 0
        for j in range(nb_traj):
            if status[j] == 0:
                live[m] = j
                m += 1
        while m > 0:
            for k in range(m):
                j = live[k]
                s0, s1, s2, s3 = state[j, 0], state[j, 1], state[j, 2], state[j, 3]
                for q in range(width):
                    g, s0, s1, s2, s3 = std_normal(s0, s1, s2, s3)
                    z[k, q] = g
                state[j, 0] = s0
                state[j, 1] = s1
                state[j, 2] = s2
                state[j, 3] = s3
            for q in range(block):
                for k in range(m):
                    j = live[k]
                    if status[j] != 0:
                        continue
                    xo = x[j]
                    yo = y[j]
                    bx, by = drift(xo, yo, dprm)
                    if combine == 1:
                        gx = z[k, 2 * q]
                        gy = z[k, 2 * q + 1]
                    else:
                        gx = 0.0
                        gy = 0.0
                        for i in range(combine):
                            gx += z[k, 2 * (combine * q + i)]
                            gy += z[k, 2 * (combine * q + i) + 1]
                        gx *= scale
                        gy *= scale
                    xn = xo + bx * dt + sx * gx
                    yn = yo + by * dt + sy * gy
                    # signed crossings of the cut ray behind the focus
                    cx = dirx[j]
                    cy = diry[j]
                    vo = cx * (yo - fy) - cy * (xo - fx)
                    vn = cx * (yn - fy) - cy * (xn - fx)
                    if (vo >= 0.0) != (vn >= 0.0):
                        f = vo / (vo - vn)
                        ux = xo + f * (xn - xo) - fx
                        uy = yo + f * (yn - yo) - fy
                        if cx * ux + cy * uy < 0.0:
                            turns[j] += 1 if vn < 0.0 else -1
                    ln = level(xn, yn, lprm)
                    if ln >= 0.0:
                        lo = level(xo, yo, lprm)
                        f = lo / (lo - ln)
                        exit_t[j] = (steps[j] + f) * dt
                        exit_x[j] = xo + f * (xn - xo)
                        exit_y[j] = yo + f * (yn - yo)
                        x[j] = xn
                        y[j] = yn
                        steps[j] += 1
                        status[j] = 1
                        continue
                    x[j] = xn
                    y[j] = yn
                    steps[j] += 1
                    if steps[j] >= max_steps:
                        status[j] = 2
            keep = 0
            for k in range(m):
                j = live[k]
                if status[j] == 0:
                    live[keep] = j
                    keep += 1
            m = keep
        return 0

    return kernel


hopf_kernel = make_block_kernel(hopf_alpha_drift, unit_disk_level)
neuro_kernel = make_block_kernel(neuro_drift, star_polygon_level)
