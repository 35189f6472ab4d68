"""
RTBP propagation with a Runge-Kutta-Fehlberg 7(8) integrator.

Besides plain propagation this module integrates the first variational
equations, detects crossings with the section ``g(Z) = x - mu + 1 = 0`` and
stops trajectories that come close to the Moon.

The stepper works on a generic right-hand side ``rhs(y, args, out)`` compiled
with numba, so the same code drives the RTBP field, its variational system
and the reduced field of a parameterization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .dynamics import MU_EARTH_MOON, field_inplace, jacobian_inplace

# Fehlberg 7(8) tableau
_C = np.array([0.0, 2 / 27, 1 / 9, 1 / 6, 5 / 12, 1 / 2, 5 / 6, 1 / 6, 2 / 3, 1 / 3, 1.0, 0.0, 1.0])
_A = np.zeros((13, 12))
_A[1, :1] = [2 / 27]
_A[2, :2] = [1 / 36, 1 / 12]
_A[3, :3] = [1 / 24, 0, 1 / 8]
_A[4, :4] = [5 / 12, 0, -25 / 16, 25 / 16]
_A[5, :5] = [1 / 20, 0, 0, 1 / 4, 1 / 5]
_A[6, :6] = [-25 / 108, 0, 0, 125 / 108, -65 / 27, 125 / 54]
_A[7, :7] = [31 / 300, 0, 0, 0, 61 / 225, -2 / 9, 13 / 900]
_A[8, :8] = [2, 0, 0, -53 / 6, 704 / 45, -107 / 9, 67 / 90, 3]
_A[9, :9] = [-91 / 108, 0, 0, 23 / 108, -976 / 135, 311 / 54, -19 / 60, 17 / 6, -1 / 12]
_A[10, :10] = [2383 / 4100, 0, 0, -341 / 164, 4496 / 1025, -301 / 82, 2133 / 4100,
               45 / 82, 45 / 164, 18 / 41]
_A[11, :11] = [3 / 205, 0, 0, 0, 0, -6 / 41, -3 / 205, -3 / 41, 3 / 41, 6 / 41, 0]
_A[12, :12] = [-1777 / 4100, 0, 0, -341 / 164, 4496 / 1025, -289 / 82, 2193 / 4100,
               51 / 82, 33 / 164, 12 / 41, 0, 1]
_B8 = np.array([0, 0, 0, 0, 0, 34 / 105, 9 / 35, 9 / 35, 9 / 280, 9 / 280, 0, 41 / 840, 41 / 840])
_B7 = np.array([41 / 840, 0, 0, 0, 0, 34 / 105, 9 / 35, 9 / 35, 9 / 280, 9 / 280, 41 / 840, 0, 0])

# status codes
OK = 0
MAX_TIME = 1
MOON_STOP = 2
STEP_UNDERFLOW = 3
STATUS_NAMES = {OK: "ok", MAX_TIME: "max-time", MOON_STOP: "moon-stop",
                STEP_UNDERFLOW: "step-underflow"}

DEFAULT_RHO_MOON = 2 * 1737.4 / 384400.0
DEFAULT_TMAX = 50.0
_H_MIN = 1e-13


class IntegrationError(RuntimeError):
    """Step-size underflow or another failure of the integrator."""


class SectionNotReached(RuntimeError):
    """The requested number of crossings was not found."""

    def __init__(self, reason, state, time, crossings):
        self.reason = reason
        self.state = state
        self.time = time
        self.crossings = crossings
        super().__init__(f"{reason} after {crossings} crossings at t={time:.6g}")


@dataclass(frozen=True)
class SectionSpec:
    """Section ``g(Z) = x - mu + 1 = 0`` and the crossing bookkeeping.

    ``direction`` is "any", "increasing" or "decreasing" (sign of dg/dt in
    physical time, whatever the integration direction).
    """

    crossings: int = 1
    time_direction: int = 1
    direction: str = "any"
    mu: float = MU_EARTH_MOON

    def g(self, s):
        return s[0] - self.mu + 1.0

    @property
    def direction_code(self):
        return {"any": 0, "increasing": 1, "decreasing": -1}[self.direction]


@dataclass(frozen=True)
class StopPolicy:
    rho_moon: float = DEFAULT_RHO_MOON
    max_time: float = DEFAULT_TMAX

    def __post_init__(self):
        if not self.rho_moon > 0:
            raise ValueError("rho_moon must be positive")
        if not self.max_time > 0:
            raise ValueError("max_time must be positive")


# ------------------------------------------------------------------ kernels

@njit(cache=True)
def _rhs_field(y, args, out):
    field_inplace(y, args[0], out)


@njit(cache=True)
def _rhs_variational(y, args, out):
    mu = args[0]
    field_inplace(y[:6], mu, out[:6])
    jac = np.empty((6, 6))
    jacobian_inplace(y[:6], mu, jac)
    for i in range(6):
        for j in range(6):
            acc = 0.0
            for l in range(6):
                acc += jac[i, l] * y[6 + 6 * l + j]
            out[6 + 6 * i + j] = acc


# kernels taking a jitted rhs are not disk-cached: numba cannot always pickle
# dispatcher-typed signatures, and the save fails with ReferenceError
@njit
def _step(rhs, args, y, h, k, tmp, y8):
    # one Fehlberg step; returns the scaled-free error vector norm (max abs)
    n = y.shape[0]
    for st in range(13):
        for i in range(n):
            acc = y[i]
            for j in range(st):
                a = _A[st, j]
                if a != 0.0:
                    acc += h * a * k[j, i]
            tmp[i] = acc
        rhs(tmp, args, k[st])
    err = 0.0
    for i in range(n):
        acc = y[i]
        for st in range(13):
            b = _B8[st]
            if b != 0.0:
                acc += h * b * k[st, i]
        y8[i] = acc
        e = abs(h * 41.0 / 840.0 * (k[0, i] + k[10, i] - k[11, i] - k[12, i]))
        sc = 1.0 + abs(y[i])
        if e / sc > err:
            err = e / sc
    return err


@njit
def _advance(rhs, args, y, h):
    # single step without error control, used to reach an exact time inside a step
    n = y.shape[0]
    k = np.empty((13, n))
    tmp = np.empty(n)
    out = np.empty(n)
    _step(rhs, args, y, h, k, tmp, out)
    return out


@njit(cache=True)
def _next_h(h, err, tol):
    if err == 0.0:
        fac = 4.0
    else:
        fac = 0.9 * (tol / err) ** 0.125
        fac = min(4.0, max(0.1, fac))
    return h * fac


@njit(cache=True)
def _moon_dist(y, mu):
    dx = y[0] - mu + 1.0
    return math.sqrt(dx * dx + y[1] * y[1] + y[2] * y[2])


@njit
def _integrate(rhs, args, y0, t_end, tol, h0, moon_r, mu, max_steps):
    """Integrate from t=0 to t_end (either sign). Returns (y, t, status, nsteps)."""
    n = y0.shape[0]
    y = y0.copy()
    t = 0.0
    if t_end == 0.0:
        return y, t, 0, 0
    sgn = 1.0 if t_end > 0 else -1.0
    k = np.empty((13, n))
    tmp = np.empty(n)
    ynew = np.empty(n)
    h = min(abs(h0), abs(t_end))
    steps = 0
    while True:
        remaining = abs(t_end - t)
        if remaining <= 0.0:
            return y, t, 0, steps
        last = h >= remaining
        hh = remaining if last else h
        err = _step(rhs, args, y, sgn * hh, k, tmp, ynew)
        if err <= tol:
            y[:] = ynew
            t = t_end if last else t + sgn * hh
            steps += 1
            if moon_r > 0.0 and _moon_dist(y, mu) < moon_r:
                return y, t, 2, steps
            if last:
                return y, t, 0, steps
            h = _next_h(hh, err, tol)
        else:
            h = _next_h(hh, err, tol)
        if h < 1e-13 or steps > max_steps:
            return y, t, 3, steps


@njit
def _refine_root(rhs, args, y_a, t_a, h_step, g_a, g_b, mu):
    # find tau in [0, h_step] (signed) with g(y(t_a + tau)) = 0
    lo = 0.0
    hi = h_step
    glo = g_a
    tau = h_step * g_a / (g_a - g_b)
    der = np.empty(y_a.shape[0])
    y = y_a.copy()
    for _ in range(60):
        y = _advance(rhs, args, y_a, tau)
        g = y[0] - mu + 1.0
        if abs(g) < 1e-14:
            break
        if (g > 0) == (glo > 0):
            lo = tau
            glo = g
        else:
            hi = tau
        rhs(y, args, der)
        cand = tau - g / der[0] if der[0] != 0.0 else 0.5 * (lo + hi)
        # keep Newton inside the bracket
        if (cand - lo) * (cand - hi) > 0.0:
            cand = 0.5 * (lo + hi)
        tau = cand
    return y, t_a + tau


@njit
def _extremum_time(rhs, args, y_a, h_step, mu):
    # time in the step where xdot vanishes (bisection on the velocity sign)
    der = np.empty(y_a.shape[0])
    rhs(y_a, args, der)
    s_lo = der[0] > 0
    lo = 0.0
    hi = h_step
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        y = _advance(rhs, args, y_a, mid)
        rhs(y, args, der)
        if (der[0] > 0) == s_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@njit
def _poincare(rhs, args, y0, sgn, tmax, need, dir_code, tol, h0, moon_r, mu, max_steps,
              skip_first):
    """Integrate until the ``need``-th crossing of x = mu - 1.

    Returns (y, t, status, count). Crossing directions are measured in
    physical time: +1 when x increases.
    """
    n = y0.shape[0]
    y = y0.copy()
    t = 0.0
    k = np.empty((13, n))
    tmp = np.empty(n)
    ynew = np.empty(n)
    der = np.empty(n)
    h = h0
    count = 0
    steps = 0
    g_prev = y[0] - mu + 1.0
    ignore_start = skip_first and abs(g_prev) <= 1e-10
    while True:
        remaining = tmax - abs(t)
        if remaining <= 0.0:
            return y, t, 1, count
        hh = min(h, remaining)
        err = _step(rhs, args, y, sgn * hh, k, tmp, ynew)
        if err > tol:
            h = _next_h(hh, err, tol)
            if h < 1e-13:
                return y, t, 3, count
            continue
        g_new = ynew[0] - mu + 1.0
        # candidate crossings inside [t, t + sgn*hh], in order
        ncross = 0
        c_t0 = 0.0
        c_t1 = 0.0
        yc0 = y
        yc1 = y
        if ignore_start:
            ignore_start = False
        elif (g_prev > 0) != (g_new > 0):
            yc0, c_t0 = _refine_root(rhs, args, y, t, sgn * hh, g_prev, g_new, mu)
            ncross = 1
        else:
            # a pair of crossings can hide inside one step when xdot changes sign
            rhs(y, args, der)
            v0 = der[0]
            rhs(ynew, args, der)
            v1 = der[0]
            if (v0 > 0) != (v1 > 0):
                tau = _extremum_time(rhs, args, y, sgn * hh, mu)
                ye = _advance(rhs, args, y, tau)
                ge = ye[0] - mu + 1.0
                if (ge > 0) != (g_prev > 0):
                    yc0, c_t0 = _refine_root(rhs, args, y, t, tau, g_prev, ge, mu)
                    yc1, c_t1 = _refine_root(rhs, args, ye, t + tau, sgn * hh - tau, ge, g_new, mu)
                    ncross = 2
        for c in range(ncross):
            yc = yc0 if c == 0 else yc1
            tc = c_t0 if c == 0 else c_t1
            rhs(yc, args, der)
            ok = dir_code == 0 or (dir_code > 0 and der[0] > 0) or (dir_code < 0 and der[0] < 0)
            if ok:
                count += 1
                if count == need:
                    return yc.copy(), tc, 0, count
        y[:] = ynew
        t += sgn * hh
        g_prev = g_new
        steps += 1
        if moon_r > 0.0 and _moon_dist(y, mu) < moon_r:
            return y, t, 2, count
        if steps > max_steps:
            return y, t, 3, count
        h = _next_h(hh, err, tol)


@njit
def _sample(rhs, args, y0, times, tol, mu):
    # states at the given monotone times (times[0] = 0)
    out = np.empty((times.shape[0], y0.shape[0]))
    out[0] = y0
    y = y0.copy()
    h = 1e-2
    for i in range(1, times.shape[0]):
        y, _, status, _ = _integrate(rhs, args, y, times[i] - times[i - 1], tol, h, 0.0, mu,
                                     10_000_000)
        if status != 0:
            for j in range(i, times.shape[0]):
                out[j] = np.nan
            return out
        out[i] = y
    return out


# ------------------------------------------------------------------ public API

def _as_state(s0):
    y = np.array(s0, dtype=float)
    if y.shape != (6,) or not np.all(np.isfinite(y)):
        raise ValueError("state must be a finite 6-vector")
    return y


def integrate(s0, t_span, rel_tol=1e-14, mu=MU_EARTH_MOON, stop=None, return_status=False):
    """Propagate ``s0`` over time ``t_span`` (negative means backward).

    With a :class:`StopPolicy` the integration halts when the Moon distance
    drops below ``rho_moon``; the status (and time reached) is returned when
    ``return_status`` is set, otherwise only the final state.

    Raises
    ------
    IntegrationError
        On step-size underflow.
    """
    y0 = _as_state(s0)
    moon_r = stop.rho_moon if stop is not None else 0.0
    y, t, status, _ = _integrate(_rhs_field, (mu,), y0, float(t_span), rel_tol, 1e-2, moon_r,
                                 mu, 50_000_000)
    if status == STEP_UNDERFLOW:
        raise IntegrationError(f"step-size underflow at t={t:.6g}")
    if return_status:
        return y, t, STATUS_NAMES[status]
    return y


def integrate_with_stm(s0, t_span, rel_tol=1e-14, mu=MU_EARTH_MOON):
    """Final state and the 6x6 state transition matrix."""
    y0 = np.concatenate([_as_state(s0), np.eye(6).ravel()])
    y, t, status, _ = _integrate(_rhs_variational, (mu,), y0, float(t_span), rel_tol, 1e-2,
                                 0.0, mu, 50_000_000)
    if status != OK:
        raise IntegrationError(f"variational integration failed at t={t:.6g}")
    return y[:6].copy(), y[6:].reshape(6, 6).copy()


def poincare_map(s0, section=None, stop=None, rel_tol=1e-14, mu=None):
    """Flow ``s0`` to the ``section.crossings``-th crossing of x = mu - 1.

    Returns
    -------
    state : ndarray (6,)
    elapsed : float
        Signed time.
    crossings : int

    Raises
    ------
    SectionNotReached
        With ``reason`` "max-time" or "moon-stop".
    IntegrationError
    """
    section = section or SectionSpec()
    stop = stop or StopPolicy()
    mu = section.mu if mu is None else mu
    y0 = _as_state(s0)
    y, t, status, count = _poincare(_rhs_field, (mu,), y0, float(np.sign(section.time_direction)),
                                    stop.max_time, section.crossings,
                                    section.direction_code,
                                    rel_tol, 1e-2, stop.rho_moon, mu, 50_000_000, True)
    if status == STEP_UNDERFLOW:
        raise IntegrationError(f"step-size underflow at t={t:.6g}")
    if status != OK:
        raise SectionNotReached(STATUS_NAMES[status], y, t, count)
    return y, t, count


def sample_trajectory(s0, t_end, dt, rel_tol=1e-14, mu=MU_EARTH_MOON):
    """States on the grid ``0, dt, 2 dt, ..., t_end`` (``t_end`` included).

    Returns ``(times, states)``.
    """
    y0 = _as_state(s0)
    n = max(1, int(math.ceil(abs(t_end) / dt - 1e-9)))
    times = np.linspace(0.0, t_end, n + 1)
    return times, _sample(_rhs_field, (mu,), y0, times, rel_tol, mu)


def moon_distance(s, mu=MU_EARTH_MOON):
    """Distance to the second primary, located at (mu - 1, 0, 0)."""
    s = np.asarray(s, dtype=float)
    return float(np.sqrt((s[0] - mu + 1.0) ** 2 + s[1] ** 2 + s[2] ** 2))


def rkf78_python(fun, y0, t0, t1, rel_tol=1e-13, h0=1e-2, max_steps=1_000_000):
    """RKF7(8) for a Python right-hand side ``fun(y)`` (autonomous)."""
    y = np.array(y0, dtype=float)
    t = float(t0)
    if t1 == t0:
        return y
    sgn = 1.0 if t1 > t0 else -1.0
    h = min(h0, abs(t1 - t0))
    k = np.empty((13, y.size))
    steps = 0
    while True:
        remaining = abs(t1 - t)
        last = h >= remaining
        hh = remaining if last else h
        for st in range(13):
            k[st] = fun(y + sgn * hh * (_A[st, :st] @ k[:st]))
        err = float(np.max(np.abs(sgn * hh * 41 / 840 * (k[0] + k[10] - k[11] - k[12]))
                           / (1.0 + np.abs(y))))
        if err <= rel_tol:
            y = y + sgn * hh * (_B8 @ k)
            t = t1 if last else t + sgn * hh
            steps += 1
            if last:
                return y
        h = hh * (4.0 if err == 0 else min(4.0, max(0.1, 0.9 * (rel_tol / err) ** 0.125)))
        if h < _H_MIN or steps > max_steps:
            raise IntegrationError(f"step-size underflow at t={t:.6g}")
