"""
Iso-energetic slices of the center manifold and validity of the expansions.

A slice ``S_j^h`` is the set of ``s_hat = (s1, s2, s3, s4)`` with
``H(W~(s_hat, 0)) = h``. We mesh ``(s1, s2, s4)`` on a grid and solve for
``s3``. To leading order the slice projects onto a solid ellipsoid, which
gives the bounding box ``I_eps x I_eps x J_eps``.

Four meshing strategies are available, each one adding an optimization to
the previous:

1. full grid, bracketing with the full-order series;
2. bracketing with the series truncated at order 4;
3. as 2, skipping every monomial that contains ``s5``;
4. as 3, sweeping the grid from the center outwards and abandoning a
   direction at the first column without solution (assumes convexity).
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dynamics import rtbp_hamiltonian
from .polyalg import _eval_many
from .propagate import _rhs_field, _sample

N_INITIAL = 30
MAX_DEPTH = 10
BISECT_TOL = 1e-12
ENERGY_TOL = 1e-11


@dataclass
class SliceMesh:
    """Points ``(s1, s2, s3, s4)`` of an iso-energetic slice.

    ``mult[i]`` is the number of ``s3`` roots found in the column of point ``i``.
    """

    h: float
    j: int
    points: np.ndarray
    mult: np.ndarray
    n_per_axis: int | None = None
    spacing: float | None = None
    eps: float = 0.05
    strategy: int = 4
    bracket_order: int = 4
    order: int = 0
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["s1", "s2", "s3", "s4", "h", "mult"])
            for p, m in zip(self.points, self.mult):
                w.writerow([f"{v:.17g}" for v in p] + [f"{self.h:.17g}", int(m)])

    @classmethod
    def read_csv(cls, path, j=0):
        rows = np.loadtxt(path, delimiter=",", comments="#", skiprows=_header_rows(path),
                          ndmin=2)
        if rows.size == 0:
            return cls(h=float("nan"), j=j, points=np.zeros((0, 4)), mult=np.zeros(0, int))
        return cls(h=float(rows[0, 4]), j=j, points=rows[:, :4].copy(),
                   mult=rows[:, 5].astype(int))


def _header_rows(path):
    n = 0
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                n += 1
                continue
            return n + 1
    return n


# ------------------------------------------------------------------ quadratic model

def quadratic_energy(s_hat, ctx):
    """Energy of ``W~(s_hat, 0)`` to second order."""
    s1, s2, s3, s4 = np.asarray(s_hat, dtype=float)
    return ctx.h0 + 2 * ctx.omega_p * (s1 * s1 + s2 * s2) + 2 * ctx.omega_v * (s3 * s3 + s4 * s4)


def bounding_intervals(h, eps, ctx):
    """``I_eps`` (for s1, s2) and ``J_eps`` (for s3, s4) as ``(lo, hi)`` pairs."""
    if not h > ctx.h0:
        raise ValueError(f"energy {h} is not above h0 = {ctx.h0}")
    a = math.sqrt((h - ctx.h0) / (2 * ctx.omega_p)) + eps
    b = math.sqrt((h - ctx.h0) / (2 * ctx.omega_v)) + eps
    return (-a, a), (-b, b)


# ------------------------------------------------------------------ compiled energy

@njit(cache=True)
def _hamiltonian(Z, mu):
    x, y, z, px, py, pz = Z[0], Z[1], Z[2], Z[3], Z[4], Z[5]
    r1 = math.sqrt((x - mu) ** 2 + y * y + z * z)
    r2 = math.sqrt((x - mu + 1.0) ** 2 + y * y + z * z)
    return 0.5 * (px * px + py * py + pz * pz) - x * py + y * px - (1.0 - mu) / r1 - mu / r2


@njit(cache=True)
def _grad_h(Z, mu, out):
    x, y, z, px, py, pz = Z[0], Z[1], Z[2], Z[3], Z[4], Z[5]
    d1 = x - mu
    d2 = x - mu + 1.0
    r1 = math.sqrt(d1 * d1 + y * y + z * z)
    r2 = math.sqrt(d2 * d2 + y * y + z * z)
    c1 = (1.0 - mu) / r1 ** 3
    c2 = mu / r2 ** 3
    out[0] = -py + c1 * d1 + c2 * d2
    out[1] = px + (c1 + c2) * y
    out[2] = (c1 + c2) * z
    out[3] = px + y
    out[4] = py - x
    out[5] = pz


@njit(cache=True)
def _state(coeffs, pos, parent, pvar, P, point, s1, s2, s3, s4, mono, ncomp_state):
    z = np.empty(5, dtype=np.complex128)
    z[0] = complex(s1, s2)
    z[1] = complex(s1, -s2)
    z[2] = complex(s3, s4)
    z[3] = complex(s3, -s4)
    z[4] = 0.0
    w = _eval_many(coeffs, pos, parent, pvar, z, mono)
    Z = np.empty(6)
    for i in range(6):
        acc = 0j
        for l in range(6):
            acc += P[i, l] * w[l]
        Z[i] = point[i] + acc.real
    D = np.zeros(6)
    if ncomp_state > 6:
        for i in range(6):
            acc = 0j
            for l in range(6):
                acc += P[i, l] * w[6 + l]
            D[i] = acc.real
    return Z, D


@njit(cache=True)
def _g(bc, bpos, parent, pvar, P, point, mu, h, s1, s2, s3, s4, mono):
    Z, _ = _state(bc, bpos, parent, pvar, P, point, s1, s2, s3, s4, mono, 6)
    return _hamiltonian(Z, mu) - h


@njit(cache=True)
def _solve_column(s1, s2, s4, lo, hi, h, mu, P, point, parent, pvar,
                  bc, bpos, fc, fpos, mono, n_init, max_depth, roots):
    """Roots in s3 of H(W~(s1, s2, s3, s4, 0)) = h inside [lo, hi].

    ``bc/bpos``: series and positions used for bracketing; ``fc/fpos``: full
    order series with the s3-derivative stacked after W. Returns the number
    of roots written into ``roots`` and the number of bracketing evaluations.

    ``roots[0]`` carries the half-width of ``I_eps`` on entry. Only points of
    the solid ellipsoid with semi-axes ``|I_eps|/2`` and ``|J_eps|/2`` are
    accepted: the slice lies inside it, and far outside it the truncated
    series can produce spurious roots.
    """
    a2 = roots[0] * roots[0]
    b2 = hi * hi
    base = (s1 * s1 + s2 * s2) / a2 + s4 * s4 / b2
    nodes = np.empty(n_init + 1)
    vals = np.empty(n_init + 1)
    nevals = 0
    for i in range(n_init + 1):
        nodes[i] = lo + (hi - lo) * i / n_init
        vals[i] = _g(bc, bpos, parent, pvar, P, point, mu, h, s1, s2, nodes[i], s4, mono)
        nevals += 1
    brackets = np.empty((4, 2))
    nb = 0
    for i in range(n_init):
        if (vals[i] > 0) != (vals[i + 1] > 0) and nb < 4:
            brackets[nb, 0] = nodes[i]
            brackets[nb, 1] = nodes[i + 1]
            nb += 1
    if nb == 0:
        # dyadic refinement around the smallest residual
        k = 0
        for i in range(1, n_init + 1):
            if vals[i] < vals[k]:
                k = i
        c = nodes[k]
        gc = vals[k]
        width = (hi - lo) / n_init
        if gc <= 0.0:
            max_depth = 0
        for depth in range(max_depth):
            width *= 0.5
            found = False
            for sgn in (-1.0, 1.0):
                x = c + sgn * width
                if x < lo or x > hi:
                    continue
                gx = _g(bc, bpos, parent, pvar, P, point, mu, h, s1, s2, x, s4, mono)
                nevals += 1
                if (gx > 0) != (gc > 0):
                    found = True
                    # roots lie on both sides of x when g is negative there
                    left = lo
                    right = hi
                    for i in range(n_init + 1):
                        if nodes[i] <= x:
                            left = nodes[i]
                    for i in range(n_init, -1, -1):
                        if nodes[i] >= x:
                            right = nodes[i]
                    gl = _g(bc, bpos, parent, pvar, P, point, mu, h, s1, s2, left, s4, mono)
                    gr = _g(bc, bpos, parent, pvar, P, point, mu, h, s1, s2, right, s4, mono)
                    nevals += 2
                    if (gl > 0) != (gx > 0):
                        brackets[nb, 0] = left
                        brackets[nb, 1] = x
                        nb += 1
                    if (gr > 0) != (gx > 0):
                        brackets[nb, 0] = x
                        brackets[nb, 1] = right
                        nb += 1
                    break
                if gx < gc:
                    c = x
                    gc = gx
            if found:
                break
    nroots = 0
    for b in range(nb):
        a = brackets[b, 0]
        bb = brackets[b, 1]
        ga = _g(bc, bpos, parent, pvar, P, point, mu, h, s1, s2, a, s4, mono)
        while bb - a > BISECT_TOL:
            m = 0.5 * (a + bb)
            gm = _g(bc, bpos, parent, pvar, P, point, mu, h, s1, s2, m, s4, mono)
            if (gm > 0) == (ga > 0):
                a = m
                ga = gm
            else:
                bb = m
        x = 0.5 * (a + bb)
        # Newton polish with the full-order series
        grad = np.empty(6)
        ok = False
        for _ in range(12):
            Z, D = _state(fc, fpos, parent, pvar, P, point, s1, s2, x, s4, mono, 12)
            gx = _hamiltonian(Z, mu) - h
            _grad_h(Z, mu, grad)
            der = 0.0
            for i in range(6):
                der += grad[i] * D[i]
            if der == 0.0:
                break
            step = gx / der
            x -= step
            if abs(step) < 1e-15 and abs(gx) < 1e-13:
                ok = True
                break
        if not ok:
            Z, D = _state(fc, fpos, parent, pvar, P, point, s1, s2, x, s4, mono, 12)
            ok = abs(_hamiltonian(Z, mu) - h) < 1e-12
        if ok and lo - 1e-9 <= x <= hi + 1e-9 and base + x * x / b2 <= 1.0:
            dup = False
            for r in range(nroots):
                if abs(roots[r] - x) < 1e-9:
                    dup = True
            if not dup:
                roots[nroots] = x
                nroots += 1
    return nroots, nevals


@njit(cache=True)
def _mesh_full(g1, g2, g4, ia, lo, hi, h, mu, P, point, parent, pvar, bc, bpos, fc, fpos, mono,
               n_init, max_depth):
    n1, n2, n4 = g1.shape[0], g2.shape[0], g4.shape[0]
    out = np.empty((2 * n1 * n2 * n4, 5))
    npts = 0
    roots = np.empty(4)
    nsolves = 0
    for i1 in range(n1):
        for i2 in range(n2):
            for i4 in range(n4):
                roots[0] = ia
                nr, _ = _solve_column(g1[i1], g2[i2], g4[i4], lo, hi, h, mu, P, point, parent,
                                      pvar, bc, bpos, fc, fpos, mono, n_init, max_depth, roots)
                nsolves += 1
                for r in range(nr):
                    out[npts, 0] = g1[i1]
                    out[npts, 1] = g2[i2]
                    out[npts, 2] = roots[r]
                    out[npts, 3] = g4[i4]
                    out[npts, 4] = nr
                    npts += 1
    return out[:npts], nsolves


@njit(cache=True)
def _outward(n, c, d):
    # indices from the center outwards in direction d
    if d > 0:
        return np.arange(c, n)
    return np.arange(c - 1, -1, -1)


@njit(cache=True)
def _mesh_inside_out(g1, g2, g4, c1, c2, c4, ia, lo, hi, h, mu, P, point, parent, pvar,
                     bc, bpos, fc, fpos, mono, n_init, max_depth):
    n1, n2, n4 = g1.shape[0], g2.shape[0], g4.shape[0]
    out = np.empty((2 * n1 * n2 * n4, 5))
    npts = 0
    roots = np.empty(4)
    nsolves = 0
    for d4 in (1, -1):
        for i4 in _outward(n4, c4, d4):
            plane = False
            for d1 in (1, -1):
                for i1 in _outward(n1, c1, d1):
                    line = False
                    for d2 in (1, -1):
                        for i2 in _outward(n2, c2, d2):
                            roots[0] = ia
                            nr, _ = _solve_column(g1[i1], g2[i2], g4[i4], lo, hi, h, mu, P,
                                                  point, parent, pvar, bc, bpos, fc, fpos,
                                                  mono, n_init, max_depth, roots)
                            nsolves += 1
                            if nr == 0:
                                break
                            line = True
                            for r in range(nr):
                                out[npts, 0] = g1[i1]
                                out[npts, 1] = g2[i2]
                                out[npts, 2] = roots[r]
                                out[npts, 3] = g4[i4]
                                out[npts, 4] = nr
                                npts += 1
                    if not line:
                        break
                    plane = True
            if not plane:
                break
    return out[:npts], nsolves


# ------------------------------------------------------------------ solver front end

class _SliceSolver:
    """Precomputed series data for solving columns of one slice."""

    def __init__(self, p, bracket_order, skip_s5):
        self.p = p
        idx = p.index
        bracket_order = min(bracket_order, p.order)
        self.bracket_order = bracket_order
        self.skip = skip_s5
        self.bpos = idx.eval_set(bracket_order, skip_s5)
        self.bc = np.ascontiguousarray(p.W)
        ds3 = p.dW[2] + p.dW[3]
        self.fc = np.ascontiguousarray(np.vstack([p.W, ds3]))
        self.fpos = idx.eval_set(p.order, skip_s5)
        self.mono = np.empty(idx.size, dtype=np.complex128)
        self.parent = idx.parent
        self.pvar = idx.parent_var
        ctx = p.ctx
        self.P = np.ascontiguousarray(ctx.P)
        self.point = ctx.point
        self.mu = ctx.mu

    def column(self, s1, s2, s4, ia, lo, hi, h, n_init=N_INITIAL, max_depth=MAX_DEPTH):
        """Roots of one column; ``ia`` is the half-width of ``I_eps``."""
        roots = np.empty(4)
        roots[0] = ia
        nr, _ = _solve_column(s1, s2, s4, lo, hi, h, self.mu, self.P, self.point, self.parent,
                              self.pvar, self.bc, self.bpos, self.fc, self.fpos, self.mono,
                              n_init, max_depth, roots)
        return np.sort(roots[:nr])

    def energy(self, s_hat, order=None, skip=None):
        idx = self.p.index
        pos = idx.eval_set(self.p.order if order is None else order,
                           self.skip if skip is None else skip)
        s1, s2, s3, s4 = (float(v) for v in s_hat)
        Z, _ = _state(self.bc, pos, self.parent, self.pvar, self.P, self.point, s1, s2, s3, s4,
                      self.mono, 6)
        return _hamiltonian(Z, self.mu)


def slice_energy(p, s_hat, order=None):
    """``H(W~(s_hat, 0))`` with the series truncated at ``order``."""
    Z = p.eval_Wtilde(np.r_[np.asarray(s_hat, dtype=float), 0.0], max_degree=order)
    return rtbp_hamiltonian(Z, p.ctx.mu)


def solve_s3(s1, s2, s4, h, p, bracket_order=4, eps=0.05, skip_s5=True,
             n_init=N_INITIAL, max_depth=MAX_DEPTH):
    """All roots ``s3`` in ``J_eps`` of ``H(W~(s1, s2, s3, s4, 0)) = h``.

    Brackets are searched with the series truncated at ``bracket_order``,
    refined by bisection and polished by Newton with the full series.

    Returns
    -------
    ndarray
        Sorted roots; empty when ``(s1, s2, s4)`` lies outside the slice.
    """
    (_, ia), (lo, hi) = bounding_intervals(h, eps, p.ctx)
    return _SliceSolver(p, bracket_order, skip_s5).column(s1, s2, s4, ia, lo, hi, h,
                                                         n_init, max_depth)


def axis_grid(lo, hi, n_per_axis=None, spacing=None):
    """Grid over ``[lo, hi]``: ``n_per_axis`` equispaced points, or the
    multiples of ``spacing`` inside the interval (always containing 0)."""
    if (n_per_axis is None) == (spacing is None):
        raise ValueError("give exactly one of n_per_axis and spacing")
    if n_per_axis is not None:
        if n_per_axis < 1:
            raise ValueError("n_per_axis must be positive")
        return np.linspace(lo, hi, n_per_axis) if n_per_axis > 1 else np.array([0.5 * (lo + hi)])
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    m_lo = math.ceil(lo / spacing - 1e-12)
    m_hi = math.floor(hi / spacing + 1e-12)
    return np.arange(m_lo, m_hi + 1) * spacing


def _center_index(g):
    return int(np.argmin(np.abs(g)))


def mesh_slice(h, p, n_per_axis=None, eps=0.05, strategy=4, spacing=None,
               bracket_order=4, ranges=None):
    """Mesh the slice ``H(W~(s_hat, 0)) = h`` of the center manifold.

    Parameters
    ----------
    h : float
    p : Parameterization
    n_per_axis, spacing : grid definition (exactly one of them)
    eps : float
        Margin of the bounding box.
    strategy : {1, 2, 3, 4}
    bracket_order : int
        Order used when bracketing in strategies 2-4.
    ranges : optional dict
        Overrides of the ``s1``, ``s2``, ``s4`` grid ranges, as ``(lo, hi)``.

    Returns
    -------
    SliceMesh
    """
    if strategy not in (1, 2, 3, 4):
        raise ValueError(f"unknown strategy {strategy}")
    (i_lo, i_hi), (j_lo, j_hi) = bounding_intervals(h, eps, p.ctx)
    ranges = ranges or {}
    g1 = axis_grid(*ranges.get("s1", (i_lo, i_hi)), n_per_axis=n_per_axis, spacing=spacing)
    g2 = axis_grid(*ranges.get("s2", (i_lo, i_hi)), n_per_axis=n_per_axis, spacing=spacing)
    g4 = axis_grid(*ranges.get("s4", (j_lo, j_hi)), n_per_axis=n_per_axis, spacing=spacing)
    border = p.order if strategy == 1 else bracket_order
    solver = _SliceSolver(p, border, skip_s5=strategy >= 3)
    args = (i_hi, j_lo, j_hi, h, solver.mu, solver.P, solver.point, solver.parent, solver.pvar,
            solver.bc, solver.bpos, solver.fc, solver.fpos, solver.mono, N_INITIAL, MAX_DEPTH)
    t0 = time.perf_counter()
    if strategy < 4:
        rows, nsolves = _mesh_full(g1, g2, g4, *args)
    else:
        rows, nsolves = _mesh_inside_out(g1, g2, g4, _center_index(g1), _center_index(g2),
                                         _center_index(g4), *args)
    elapsed = time.perf_counter() - t0
    rows = _canonical(rows)
    return SliceMesh(h=h, j=p.ctx.j, points=rows[:, :4].copy(), mult=rows[:, 4].astype(int),
                     n_per_axis=n_per_axis, spacing=spacing, eps=eps, strategy=strategy,
                     bracket_order=border, order=p.order,
                     stats={"columns": int(nsolves), "seconds": elapsed})


def _canonical(rows):
    if len(rows) == 0:
        return rows.reshape(0, 5)
    order = np.lexsort((rows[:, 2], rows[:, 3], rows[:, 1], rows[:, 0]))
    return rows[order]


def mesh_region(h, p, g1, g2, g4, eps=0.05, bracket_order=4, mask=None):
    """Solve every column of an explicit grid (optionally masked) with strategy 3."""
    (_, i_hi), (j_lo, j_hi) = bounding_intervals(h, eps, p.ctx)
    solver = _SliceSolver(p, bracket_order, skip_s5=True)
    pts, mult = [], []
    for a in range(len(g1)):
        for b in range(len(g2)):
            for c in range(len(g4)):
                if mask is not None and not mask(g1[a], g2[b], g4[c]):
                    continue
                r = solver.column(g1[a], g2[b], g4[c], i_hi, j_lo, j_hi, h)
                for x in r:
                    pts.append((g1[a], g2[b], x, g4[c]))
                    mult.append(len(r))
    rows = _canonical(np.array([list(q) + [m] for q, m in zip(pts, mult)]).reshape(-1, 5))
    return SliceMesh(h=h, j=p.ctx.j, points=rows[:, :4].copy(), mult=rows[:, 4].astype(int),
                     eps=eps, strategy=3, bracket_order=bracket_order, order=p.order)


# ------------------------------------------------------------------ validity

def error_in_orbit(p, s0, T, tol=1e-13, n_times=100):
    """Sup over a time grid of ``|W~(phi_t(s0)) - Phi_t(W~(s0))|``.

    ``phi`` is the reduced flow and ``Phi`` the RTBP flow.
    """
    s0 = np.asarray(s0, dtype=float)
    if T == 0:
        return 0.0
    times = np.linspace(0.0, T, n_times)
    red = p.reduced_flow_samples(s0, times, tol)
    full = _sample(_rhs_field, (p.ctx.mu,), p.eval_Wtilde(s0), times, tol, p.ctx.mu)
    if not (np.all(np.isfinite(red)) and np.all(np.isfinite(full))):
        raise RuntimeError("integration failed while computing the error in the orbit")
    err = 0.0
    for k in range(n_times):
        err = max(err, float(np.linalg.norm(p.eval_Wtilde(red[k]) - full[k])))
    return err


def error_scan(p, energies, orders, delta=1e-3, T=3.0, n_per_axis=5, eps=0.05,
               mesh_strategy=4, max_points=None, rng=None):
    """Maximum error in the orbit over slice meshes, per energy and order.

    ``delta`` and ``T`` are magnitudes: signs follow the branch convention
    of ``p.ctx`` (``+delta``, ``T < 0`` for a center-unstable manifold; ``-delta``,
    ``T > 0`` for a center-stable one).

    Returns
    -------
    list of dict
        Rows with keys ``h``, ``order``, ``max_e_O``, ``points``.
    """
    ctx = p.ctx
    d = ctx.delta_sign * abs(delta)
    t_signed = abs(T) * (1.0 if ctx.manifold_kind == "center-stable" else -1.0)
    rows = []
    for h in energies:
        mesh = mesh_slice(h, p, n_per_axis=n_per_axis, eps=eps, strategy=mesh_strategy)
        pts = mesh.points
        if max_points is not None and len(pts) > max_points:
            rng = rng or np.random.default_rng(0)
            pts = pts[np.sort(rng.choice(len(pts), max_points, replace=False))]
        for N in orders:
            q = p if N == p.order else p.truncated(N)
            e = 0.0
            for s_hat in pts:
                e = max(e, error_in_orbit(q, np.r_[s_hat, d], t_signed))
            rows.append({"h": float(h), "order": int(N), "max_e_O": e, "points": len(pts)})
    return rows
