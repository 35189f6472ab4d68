"""
Heteroclinic connections from the center manifold of L2 to that of L1.

Points of the two slice meshes are lifted to the center-unstable (L2) and
center-stable (L1) manifolds, propagated to the section ``x = mu - 1`` and
matched there. Close pairs are refined with a multiple-shooting system solved
by minimum-norm Newton iterations; the connection set is two-dimensional in
each energy level, so the system has two more unknowns than equations.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.optimize import brentq, minimize_scalar
from scipy.spatial import cKDTree

from .dynamics import CENTER_STABLE, CENTER_UNSTABLE, hamiltonian_gradient, rtbp_field, \
    rtbp_hamiltonian
from .propagate import (
    IntegrationError,
    SectionNotReached,
    SectionSpec,
    StopPolicy,
    integrate,
    integrate_with_stm,
    moon_distance,
    poincare_map,
    sample_trajectory,
)
from .slicing import SliceMesh, mesh_region, slice_energy

log = logging.getLogger(__name__)

MAX_ARC_TIME = 1.5
DEDUP_TOL = 1e-6


class NewtonFailure(ArithmeticError):
    """Minimum-norm Newton did not converge."""

    def __init__(self, reason, x=None, residual=None):
        self.reason = reason
        self.x = x
        self.residual = residual
        super().__init__(reason)


# ------------------------------------------------------------------ clouds

@dataclass
class SectionCloud:
    """Images on the section of the points of one slice mesh.

    ``times`` are signed flight times (negative for the stable branch).
    """

    s_hat: np.ndarray
    states: np.ndarray
    times: np.ndarray
    crossings: int
    h: float
    delta: float
    kind: str
    dropped: list = field(default_factory=list)

    def __len__(self):
        return len(self.s_hat)

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(f"# kind={self.kind} h={self.h:.17g} delta={self.delta:.17g} "
                     f"crossings={self.crossings}\n")
            w = csv.writer(fh)
            w.writerow(["s1", "s2", "s3", "s4", "x", "y", "z", "px", "py", "pz", "t"])
            for a, b, t in zip(self.s_hat, self.states, self.times):
                w.writerow([f"{v:.17g}" for v in np.r_[a, b, t]])

    @classmethod
    def read_csv(cls, path):
        meta = {}
        nhead = 0
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    break
                nhead += 1
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
        rows = np.loadtxt(path, delimiter=",", skiprows=nhead + 1, ndmin=2).reshape(-1, 11)
        return cls(s_hat=rows[:, :4].copy(), states=rows[:, 4:10].copy(), times=rows[:, 10].copy(),
                   crossings=int(meta.get("crossings", 0)), h=float(meta.get("h", "nan")),
                   delta=float(meta.get("delta", "nan")), kind=meta.get("kind", "?"))


def branch_time_direction(p):
    """+1 for a center-unstable manifold (forward), -1 for a center-stable one."""
    return 1 if p.ctx.manifold_kind == CENTER_UNSTABLE else -1


def propagate_cloud(mesh, p, delta_signed, crossings, direction=None, stop=None,
                    section_direction="any", rel_tol=1e-14):
    """Lift every mesh point to ``(s_hat, delta)`` and flow it to the section.

    Parameters
    ----------
    mesh : SliceMesh or ndarray of shape (n, 4)
    p : Parameterization
    delta_signed : float
    crossings : int
    direction : {+1, -1}, optional
        Time direction; defaults to the one matching ``p.ctx.manifold_kind``.

    Returns
    -------
    SectionCloud
        Points stopped near the Moon or exceeding the maximum time are listed
        in ``dropped`` with the reason.
    """
    expected = branch_time_direction(p)
    direction = expected if direction is None else direction
    if direction != expected:
        raise ValueError("time direction does not match the manifold kind")
    pts = mesh.points if isinstance(mesh, SliceMesh) else np.asarray(mesh, dtype=float)
    h = mesh.h if isinstance(mesh, SliceMesh) else float("nan")
    section = SectionSpec(crossings=crossings, time_direction=direction,
                          direction=section_direction, mu=p.ctx.mu)
    stop = stop or StopPolicy()
    keep_s, keep_x, keep_t, dropped = [], [], [], []
    for s_hat in pts:
        z0 = p.eval_Wtilde(np.r_[s_hat, delta_signed])
        try:
            x, t, _ = poincare_map(z0, section, stop, rel_tol=rel_tol)
        except SectionNotReached as exc:
            dropped.append((tuple(s_hat), exc.reason))
            continue
        except IntegrationError:
            dropped.append((tuple(s_hat), "step-underflow"))
            continue
        keep_s.append(s_hat)
        keep_x.append(x)
        keep_t.append(t)
    kind = "u" if expected > 0 else "s"
    return SectionCloud(np.array(keep_s).reshape(-1, 4), np.array(keep_x).reshape(-1, 6),
                        np.array(keep_t), crossings, h, delta_signed, kind, dropped)


# ------------------------------------------------------------------ matching

@dataclass
class CandidatePair:
    s_hat_s: np.ndarray
    s_hat_u: np.ndarray
    d: float
    T_s: float
    T_u: float


def nearest_distances(cloud_s, cloud_u):
    """For each stable-cloud state, distance to and index of the nearest unstable state."""
    if len(cloud_s) == 0 or len(cloud_u) == 0:
        raise ValueError("empty section cloud")
    tree = cKDTree(cloud_u.states)
    d, idx = tree.query(cloud_s.states, k=1)
    return d, idx


def nearest_brute_force(cloud_s, cloud_u):
    """O(NM) reference for :func:`nearest_distances`."""
    diff = cloud_s.states[:, None, :] - cloud_u.states[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    idx = dist.argmin(axis=1)
    return dist[np.arange(len(idx)), idx], idx


def match_candidates(cloud_s, cloud_u, xi):
    """Candidate pairs with section distance ``d <= xi`` and the full distance field.

    Returns
    -------
    pairs : list of CandidatePair, sorted by distance
    field : ndarray (n_s, 5)
        Columns ``s1, s2, s3, s4, d`` for every stable-cloud point.
    """
    d, idx = nearest_distances(cloud_s, cloud_u)
    pairs = [CandidatePair(cloud_s.s_hat[i].copy(), cloud_u.s_hat[idx[i]].copy(), float(d[i]),
                           float(cloud_s.times[i]), float(cloud_u.times[idx[i]]))
             for i in np.flatnonzero(d <= xi)]
    pairs.sort(key=lambda c: (c.d, tuple(c.s_hat_s)))
    field_ = np.column_stack([cloud_s.s_hat, d])
    return pairs, field_


# ------------------------------------------------------------------ min-norm Newton

def minnorm_solve(A, b, kernel_dim=None, rank_tol=1e-10):
    """Minimum-norm solution of ``A x = b`` by QR with column pivoting of ``A^T``.

    The rank is the number of pivots ``|R_ii| > rank_tol |R_00|``. When
    ``kernel_dim`` is given the rank must equal ``ncols - kernel_dim``.

    Returns
    -------
    x : ndarray
    rank : int
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    Q, R, piv = qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rank_tol * diag[0])) if diag.size and diag[0] > 0 else 0
    if kernel_dim is not None and rank != n - kernel_dim:
        raise NewtonFailure(f"rank collapse: rank {rank}, expected {n - kernel_dim}")
    # A[piv] = R^T Q^T, so for the leading pivoted equations R11^T y = b[piv]
    y = solve_triangular(R[:rank, :rank].T, b[piv[:rank]], lower=True)
    return Q[:, :rank] @ y, rank


def newton_minnorm(fun, x0, tol=1e-10, max_iter=20, kernel_dim=2, max_step=1.0,
                   max_halvings=5):
    """Newton iterations with minimum-norm least-squares corrections.

    Parameters
    ----------
    fun : callable
        ``fun(x) -> (r, J)``.
    x0 : ndarray
    tol : float
        Stop when ``max |r| < tol``.
    kernel_dim : int
        Expected dimension of the kernel of ``J``.

    Returns
    -------
    x : ndarray
    residual : float
    iterations : int

    Raises
    ------
    NewtonFailure
    """
    x = np.array(x0, dtype=float)
    r, J = fun(x)
    rn = float(np.max(np.abs(r)))
    for it in range(max_iter + 1):
        if rn < tol:
            return x, rn, it
        if it == max_iter:
            break
        dx, _ = minnorm_solve(J, -r, kernel_dim)
        if not np.all(np.isfinite(dx)) or np.linalg.norm(dx) > max_step:
            raise NewtonFailure("step diverges", x, rn)
        lam = 1.0
        for _ in range(max_halvings + 1):
            try:
                r_new, J_new = fun(x + lam * dx)
                rn_new = float(np.max(np.abs(r_new)))
            except (IntegrationError, FloatingPointError, ArithmeticError):
                rn_new = math.inf
            if rn_new <= rn:
                break
            lam *= 0.5
        if not math.isfinite(rn_new):
            raise NewtonFailure("residual evaluation failed", x, rn)
        x = x + lam * dx
        r, J, rn = r_new, J_new, rn_new
    raise NewtonFailure("maximum number of iterations exceeded", x, rn)


def kernel_dimension(J, rel_tol=1e-10):
    """``ncols - rank`` with the rank from singular values above ``rel_tol * s_max``."""
    s = np.linalg.svd(J, compute_uv=False)
    rank = int(np.sum(s > rel_tol * s[0]))
    return J.shape[1] - rank


# ------------------------------------------------------------------ shooting system

UNKNOWN_NAMES_U = ("s1u", "s2u", "s3u", "s4u", "Tu")
UNKNOWN_NAMES_S = ("s1s", "s2s", "s3s", "s4s", "Ts")


class ShootingSystem:
    """Multiple-shooting equations for a connection at energy ``h``.

    Unknowns, in order: ``s_hat^u, T^u, x_0^u..x_mu^u, s_hat^s, T^s,
    x_0^s..x_ms^s``. Equations: the two endpoints on their manifolds, the
    sub-arc matchings, ``g(x_mu^u) = 0``, ``H(x_mu^u) = h`` and
    ``x_mu^u = x_ms^s``.

    ``pinned`` names unknowns (``s1u``...``s4u``, ``s1s``...``s4s``) held at
    their initial values.
    """

    def __init__(self, p_u, p_s, h, m_u, m_s, delta_u, delta_s, pinned=(), rel_tol=1e-14):
        if m_u < 1 or m_s < 1:
            raise ValueError("at least one sub-arc per branch is required")
        self.p_u, self.p_s = p_u, p_s
        self.h = h
        self.m_u, self.m_s = m_u, m_s
        self.delta_u, self.delta_s = delta_u, delta_s
        self.mu = p_u.ctx.mu
        self.rel_tol = rel_tol
        self.n_unknowns = 6 * (m_u + m_s + 2) + 10
        self.n_equations = 6 * (m_u + m_s + 3) + 2
        if self.n_unknowns - self.n_equations != 2:
            raise ValueError("dimension mismatch in the shooting system")
        self.ou_T = 4
        self.ou_x = 5
        self.os_s = 5 + 6 * (m_u + 1)
        self.os_T = self.os_s + 4
        self.os_x = self.os_s + 5
        names = {n: i for i, n in enumerate(UNKNOWN_NAMES_U)}
        names.update({n: self.os_s + i for i, n in enumerate(UNKNOWN_NAMES_S)})
        unknown = set(pinned) - set(names)
        if unknown:
            raise ValueError(f"unknown pinned variables {sorted(unknown)}")
        self.pinned = tuple(sorted(pinned, key=lambda n: names[n]))
        self.pinned_idx = np.array([names[n] for n in self.pinned], dtype=int)
        self.free_idx = np.setdiff1d(np.arange(self.n_unknowns), self.pinned_idx)

    # layout helpers
    def split(self, X):
        mu_, ms = self.m_u, self.m_s
        su = X[:4]
        Tu = X[4]
        xu = X[5:5 + 6 * (mu_ + 1)].reshape(mu_ + 1, 6)
        ss = X[self.os_s:self.os_s + 4]
        Ts = X[self.os_T]
        xs = X[self.os_x:self.os_x + 6 * (ms + 1)].reshape(ms + 1, 6)
        return su, Tu, xu, ss, Ts, xs

    def pack(self, su, Tu, xu, ss, Ts, xs):
        return np.concatenate([su, [Tu], np.ravel(xu), ss, [Ts], np.ravel(xs)])

    def residual(self, X, jacobian=True):
        """Residual vector and (optionally) its Jacobian with respect to all unknowns."""
        su, Tu, xu, ss, Ts, xs = self.split(X)
        R = np.zeros(self.n_equations)
        J = np.zeros((self.n_equations, self.n_unknowns)) if jacobian else None
        row = 0
        for (p, s_hat, delta, T, nodes, m, o_s, o_T, o_x) in (
                (self.p_u, su, self.delta_u, Tu, xu, self.m_u, 0, self.ou_T, self.ou_x),
                (self.p_s, ss, self.delta_s, Ts, xs, self.m_s, self.os_s, self.os_T, self.os_x)):
            s_full = np.r_[s_hat, delta]
            R[row:row + 6] = p.eval_Wtilde(s_full) - nodes[0]
            if jacobian:
                J[row:row + 6, o_s:o_s + 4] = p.eval_Wtilde_jacobian(s_full)[:, :4]
                J[row:row + 6, o_x:o_x + 6] = -np.eye(6)
            row += 6
            tau = T / m
            for i in range(m):
                if jacobian:
                    y, M = integrate_with_stm(nodes[i], tau, self.rel_tol, self.mu)
                    J[row:row + 6, o_x + 6 * i:o_x + 6 * i + 6] = M
                    J[row:row + 6, o_x + 6 * (i + 1):o_x + 6 * (i + 2)] = -np.eye(6)
                    J[row:row + 6, o_T] = rtbp_field(y, self.mu) / m
                else:
                    y = integrate(nodes[i], tau, self.rel_tol, self.mu)
                R[row:row + 6] = y - nodes[i + 1]
                row += 6
        end_u = xu[-1]
        end_u_col = self.ou_x + 6 * self.m_u
        end_s_col = self.os_x + 6 * self.m_s
        R[row] = end_u[0] - self.mu + 1.0
        if jacobian:
            J[row, end_u_col] = 1.0
        row += 1
        R[row] = rtbp_hamiltonian(end_u, self.mu) - self.h
        if jacobian:
            J[row, end_u_col:end_u_col + 6] = hamiltonian_gradient(end_u, self.mu)
        row += 1
        R[row:row + 6] = end_u - xs[-1]
        if jacobian:
            J[row:row + 6, end_u_col:end_u_col + 6] = np.eye(6)
            J[row:row + 6, end_s_col:end_s_col + 6] = -np.eye(6)
        return R, J

    def reduced(self, X_full):
        """``fun(x_free)`` for Newton, with pinned unknowns taken from ``X_full``."""
        base = np.array(X_full, dtype=float)

        def fun(x_free):
            X = base.copy()
            X[self.free_idx] = x_free
            R, J = self.residual(X)
            return R, J[:, self.free_idx]
        return fun

    def expected_kernel(self):
        k = 2 - len(self.pinned)
        if set(self.pinned) >= {"s3u", "s4u", "s3s", "s4s"}:
            # inside the invariant plane z = pz = 0 the z, pz matching rows are void
            k += 2
        return k


def arcs_for(T):
    return max(1, int(math.ceil(abs(T) / MAX_ARC_TIME - 1e-12)))


def initial_guess(system, s_hat_u, T_u, s_hat_s, T_s, rel_tol=1e-14):
    """Unknown vector with nodes sampled at equal times along the two arcs."""
    parts = []
    for p, s_hat, delta, T, m in ((system.p_u, s_hat_u, system.delta_u, T_u, system.m_u),
                                   (system.p_s, s_hat_s, system.delta_s, T_s, system.m_s)):
        x0 = p.eval_Wtilde(np.r_[s_hat, delta])
        nodes = [x0]
        for _ in range(m):
            nodes.append(integrate(nodes[-1], T / m, rel_tol, system.mu))
        parts.append((np.asarray(s_hat, dtype=float), float(T), np.array(nodes)))
    (su, Tu, xu), (ss, Ts, xs) = parts
    return system.pack(su, Tu, xu, ss, Ts, xs)


# ------------------------------------------------------------------ records

@dataclass
class ConnectionRecord:
    s_hat_u: np.ndarray
    s_hat_s: np.ndarray
    T_u: float
    T_s: float
    nodes_u: np.ndarray
    nodes_s: np.ndarray
    residual: float
    h: float
    delta_u: float
    delta_s: float
    dmin_moon: float = float("nan")
    zmax: float = float("nan")
    T_total: float = float("nan")
    kernel_dim: int | None = None

    @property
    def key(self):
        return np.r_[self.s_hat_u, self.s_hat_s]


CONNECTION_HEADER = ["s1s", "s2s", "s3s", "s4s", "s1u", "s2u", "s3u", "s4u", "d",
                     "Tu", "Ts", "resid", "dmin_moon", "zmax", "h"]


def write_connections(records, path, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(CONNECTION_HEADER)
        for r in records:
            d = float(np.linalg.norm(r.nodes_u[-1] - r.nodes_s[-1]))
            w.writerow([f"{v:.17g}" for v in np.r_[r.s_hat_s, r.s_hat_u, d, r.T_u, r.T_s,
                                                   r.residual, r.dmin_moon, r.zmax, r.h]])


def read_connection_table(path):
    """Rows of a connection CSV as a dict of columns."""
    skip = _count_header(path)
    with open(path) as fh:
        empty = sum(1 for _ in fh) <= skip
    rows = (np.zeros((0, len(CONNECTION_HEADER))) if empty else
            np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2))
    rows = rows.reshape(-1, len(CONNECTION_HEADER))
    return {name: rows[:, i] for i, name in enumerate(CONNECTION_HEADER)}


def _count_header(path):
    n = 0
    with open(path) as fh:
        for line in fh:
            n += 1
            if not line.startswith("#"):
                return n
    return n


def record_from_solution(system, X, residual):
    su, Tu, xu, ss, Ts, xs = system.split(X)
    return ConnectionRecord(su.copy(), ss.copy(), float(Tu), float(Ts), xu.copy(), xs.copy(),
                            float(residual), system.h, system.delta_u, system.delta_s)


def refine_candidate(pair, p_u, p_s, h, delta_u, delta_s, pinned=(), tol=1e-10, max_iter=20,
                     rel_tol=1e-14, m_u=None, m_s=None, fixed_values=None):
    """Refine a :class:`CandidatePair` into a :class:`ConnectionRecord`.

    ``pinned`` unknowns keep their initial values, possibly overridden by
    ``fixed_values`` (a name -> value mapping).

    Raises
    ------
    NewtonFailure
    """
    m_u = m_u or arcs_for(pair.T_u)
    m_s = m_s or arcs_for(pair.T_s)
    system = ShootingSystem(p_u, p_s, h, m_u, m_s, delta_u, delta_s, pinned, rel_tol)
    kdim = system.expected_kernel()
    if kdim < 0:
        raise ValueError(f"over-pinned system: expected kernel dimension {kdim}")
    X0 = initial_guess(system, pair.s_hat_u, pair.T_u, pair.s_hat_s, pair.T_s, rel_tol)
    if fixed_values:
        names = dict(zip(UNKNOWN_NAMES_U, range(5)))
        names.update({n: system.os_s + i for i, n in enumerate(UNKNOWN_NAMES_S)})
        for k, v in fixed_values.items():
            X0[names[k]] = v
    fun = system.reduced(X0)
    x, res, _ = newton_minnorm(fun, X0[system.free_idx], tol, max_iter, kdim)
    X = X0.copy()
    X[system.free_idx] = x
    rec = record_from_solution(system, X, res)
    return rec


def refine_with_fixed(pair, p_u, p_s, h, delta_u, delta_s, fixed, **kwargs):
    """:func:`refine_candidate` with the unknowns in ``fixed`` pinned."""
    return refine_candidate(pair, p_u, p_s, h, delta_u, delta_s, pinned=tuple(fixed), **kwargs)


def deduplicate(records, tol=DEDUP_TOL):
    """Merge records whose ``(s_hat_u, s_hat_s)`` are closer than ``tol``."""
    kept = []
    keys = []
    for r in sorted(records, key=lambda r: (r.residual, tuple(r.key))):
        k = r.key
        if any(np.linalg.norm(k - q) < tol for q in keys):
            continue
        kept.append(r)
        keys.append(k)
    kept.sort(key=lambda r: tuple(r.key))
    return kept


def refine_candidates(pairs, p_u, p_s, h, delta_u, delta_s, pinned=(), tol=1e-10,
                      skip_close=DEDUP_TOL, progress=None):
    """Refine many candidates and deduplicate; failures are counted, not raised."""
    records, failures = [], []
    for i, pair in enumerate(pairs):
        try:
            rec = refine_candidate(pair, p_u, p_s, h, delta_u, delta_s, pinned, tol)
        except (NewtonFailure, IntegrationError, ValueError) as exc:
            failures.append((i, str(exc)))
            continue
        records.append(rec)
        if progress:
            progress(i, len(pairs))
    return deduplicate(records, skip_close), failures


# ------------------------------------------------------------------ checks and diagnostics

def check_record(rec, p_u, p_s, tol=1e-10, rel_tol=1e-14):
    """Residuals of the defining equations of a record (max abs per group)."""
    m_u, m_s = len(rec.nodes_u) - 1, len(rec.nodes_s) - 1
    system = ShootingSystem(p_u, p_s, rec.h, m_u, m_s, rec.delta_u, rec.delta_s, rel_tol=rel_tol)
    X = system.pack(rec.s_hat_u, rec.T_u, rec.nodes_u, rec.s_hat_s, rec.T_s, rec.nodes_s)
    R, _ = system.residual(X, jacobian=False)
    mu = p_u.ctx.mu
    out = {
        "system": float(np.max(np.abs(R))),
        "endpoint_u": float(np.max(np.abs(p_u.eval_Wtilde(np.r_[rec.s_hat_u, rec.delta_u])
                                          - rec.nodes_u[0]))),
        "endpoint_s": float(np.max(np.abs(p_s.eval_Wtilde(np.r_[rec.s_hat_s, rec.delta_s])
                                          - rec.nodes_s[0]))),
        "section": abs(rec.nodes_u[-1][0] - mu + 1.0),
        "energy": abs(rtbp_hamiltonian(rec.nodes_u[-1], mu) - rec.h),
    }
    out["ok"] = all(v < tol for v in out.values())
    return out


def end_to_end_gap(rec, p_u, p_s, rel_tol=1e-14):
    """Distance at the section between the two arcs integrated without intermediate nodes."""
    mu = p_u.ctx.mu
    a = integrate(p_u.eval_Wtilde(np.r_[rec.s_hat_u, rec.delta_u]), rec.T_u, rel_tol, mu)
    b = integrate(p_s.eval_Wtilde(np.r_[rec.s_hat_s, rec.delta_s]), rec.T_s, rel_tol, mu)
    return float(np.linalg.norm(a - b))


def _refine_extremum(x0, t_grid, values, k, fun_at, maximize, mu, rel_tol):
    # polish a sampled extremum with a bounded scalar search
    lo = t_grid[max(k - 1, 0)]
    hi = t_grid[min(k + 1, len(t_grid) - 1)]
    if lo == hi:
        return values[k]
    sgn = -1.0 if maximize else 1.0

    def obj(t):
        return sgn * fun_at(integrate(x0, t, rel_tol, mu))
    a, b = (lo, hi) if lo < hi else (hi, lo)
    res = minimize_scalar(obj, bounds=(a, b), method="bounded", options={"xatol": 1e-10})
    return max(values[k], sgn * res.fun) if maximize else min(values[k], sgn * res.fun)


def diagnostics(rec, p_u, p_s, dt=1e-3, rel_tol=1e-14):
    """Minimum Moon distance, maximum ``|z|`` and total flight time of a connection.

    Both arcs are sampled every ``dt`` and the extrema are polished by a
    bounded one-dimensional search.
    """
    mu = p_u.ctx.mu
    dmin, zmax = math.inf, 0.0
    for x0, T in ((rec.nodes_u[0], rec.T_u), (rec.nodes_s[0], rec.T_s)):
        times, states = sample_trajectory(x0, T, dt, rel_tol, mu)
        r2 = np.sqrt((states[:, 0] - mu + 1) ** 2 + states[:, 1] ** 2 + states[:, 2] ** 2)
        az = np.abs(states[:, 2])
        k = int(np.argmin(r2))
        dmin = min(dmin, _refine_extremum(x0, times, r2, k, lambda s: moon_distance(s, mu),
                                          False, mu, rel_tol))
        k = int(np.argmax(az))
        zmax = max(zmax, _refine_extremum(x0, times, az, k, lambda s: abs(s[2]), True, mu,
                                          rel_tol))
    rec.dmin_moon = float(dmin)
    rec.zmax = float(zmax)
    rec.T_total = float(abs(rec.T_u) + abs(rec.T_s))
    return rec.dmin_moon, rec.zmax, rec.T_total


# ------------------------------------------------------------------ planar Lyapunov case

def lyapunov_radius(p, h, theta, r_max=None):
    """Radius ``r`` with ``H(W~(r cos theta, r sin theta, 0, 0, 0)) = h``."""
    ctx = p.ctx
    r0 = math.sqrt((h - ctx.h0) / (2 * ctx.omega_p))
    r_max = r_max or 1.5 * r0 + 1e-3

    def g(r):
        return slice_energy(p, (r * math.cos(theta), r * math.sin(theta), 0.0, 0.0)) - h
    return brentq(g, 0.0, r_max, xtol=1e-15, rtol=1e-15)


def lyapunov_section_curve(p, h, delta_signed, crossings, n_theta=400, stop=None):
    """Section images of the fiber over the planar Lyapunov orbit at energy ``h``.

    Returns
    -------
    theta : ndarray
    states : ndarray (n_theta, 6)
        NaN rows for points that did not reach the section.
    times : ndarray
    """
    theta = np.linspace(0.0, 2 * np.pi, n_theta, endpoint=False)
    section = SectionSpec(crossings=crossings, time_direction=branch_time_direction(p),
                          mu=p.ctx.mu)
    stop = stop or StopPolicy()
    states = np.full((n_theta, 6), np.nan)
    times = np.full(n_theta, np.nan)
    for i, th in enumerate(theta):
        r = lyapunov_radius(p, h, th)
        s_hat = (r * math.cos(th), r * math.sin(th), 0.0, 0.0)
        try:
            x, t, _ = poincare_map(p.eval_Wtilde(np.r_[s_hat, delta_signed]), section, stop)
        except (SectionNotReached, IntegrationError):
            continue
        states[i], times[i] = x, t
    return theta, states, times


def _segment_intersections(A, B):
    # intersections of closed polylines A, B in the plane (NaN vertices break them)
    out = []
    na, nb = len(A), len(B)
    for i in range(na):
        a0, a1 = A[i], A[(i + 1) % na]
        if not (np.all(np.isfinite(a0)) and np.all(np.isfinite(a1))):
            continue
        for j in range(nb):
            b0, b1 = B[j], B[(j + 1) % nb]
            if not (np.all(np.isfinite(b0)) and np.all(np.isfinite(b1))):
                continue
            M = np.column_stack([a1 - a0, b0 - b1])
            det = np.linalg.det(M)
            if abs(det) < 1e-300:
                continue
            u, v = np.linalg.solve(M, b0 - a0)
            if 0.0 <= u < 1.0 and 0.0 <= v < 1.0:
                out.append((i, u, j, v))
    return out


def planar_candidates(p_u, p_s, h, crossings_u, crossings_s, delta=1e-3, n_theta=400,
                      stop=None):
    """Candidate pairs from intersections of the two planar tubes in the (y, py) plane."""
    du = p_u.ctx.delta_sign * abs(delta)
    ds = p_s.ctx.delta_sign * abs(delta)
    th_u, xu, tu = lyapunov_section_curve(p_u, h, du, crossings_u, n_theta, stop)
    th_s, xs, ts = lyapunov_section_curve(p_s, h, ds, crossings_s, n_theta, stop)
    # large jumps mean the curve is broken (e.g. by the Moon stop)
    A, B = xu[:, [1, 4]].copy(), xs[:, [1, 4]].copy()
    pairs = []
    for i, a, j, b in _segment_intersections(A, B):
        step = 2 * np.pi / n_theta
        tha = th_u[i] + a * step
        thb = th_s[j] + b * step
        i1, j1 = (i + 1) % n_theta, (j + 1) % n_theta
        ru = lyapunov_radius(p_u, h, tha)
        rs = lyapunov_radius(p_s, h, thb)
        su = np.array([ru * math.cos(tha), ru * math.sin(tha), 0.0, 0.0])
        ss = np.array([rs * math.cos(thb), rs * math.sin(thb), 0.0, 0.0])
        Tu = (1 - a) * tu[i] + a * tu[i1]
        Ts = (1 - b) * ts[j] + b * ts[j1]
        d = float(np.linalg.norm((1 - a) * xu[i] + a * xu[i1] - (1 - b) * xs[j] - b * xs[j1]))
        pairs.append(CandidatePair(ss, su, d, Ts, Tu))
    return pairs


PLANAR_PINS = ("s3u", "s4u", "s3s", "s4s")


def planar_connections(p_u, p_s, h, crossings_u, crossings_s, delta=1e-3, n_theta=400,
                       tol=1e-10, stop=None):
    """Connections between the planar Lyapunov orbits of L2 and L1 at energy ``h``."""
    du = p_u.ctx.delta_sign * abs(delta)
    ds = p_s.ctx.delta_sign * abs(delta)
    pairs = planar_candidates(p_u, p_s, h, crossings_u, crossings_s, delta, n_theta, stop)
    return refine_candidates(pairs, p_u, p_s, h, du, ds, PLANAR_PINS, tol)


# ------------------------------------------------------------------ re-meshing

def remesh_region(records, side, p, h, mode="rectangle", refine_factor=4, base_spacing=None,
                  eps=0.05, degree=5, bracket_order=4):
    """Finer mesh of the region of a slice covered by low-resolution connections.

    Parameters
    ----------
    records : list of ConnectionRecord
    side : {"u", "s"}
        Which slice to re-mesh.
    mode : {"rectangle", "curve"}
        Bounding box in (s1, s2) fattened by 10%, or a band around a
        least-squares polynomial ``s2 = poly(s1)``.

    Returns
    -------
    mesh : SliceMesh
    region : dict
        Description of the region (box, polynomial coefficients, band).
    """
    pts = np.array([r.s_hat_u if side == "u" else r.s_hat_s for r in records])
    if len(pts) == 0:
        raise ValueError("no connections to re-mesh around")
    spacing = (base_spacing or 0.0079) / refine_factor
    s1, s2, s4 = pts[:, 0], pts[:, 1], pts[:, 3]
    region = {"mode": mode}
    poly, band = None, None
    if mode == "curve":
        if len(pts) < degree + 1 or np.ptp(s1) < 1e-12:
            mode = "rectangle"
            region["mode"] = "rectangle"
            region["fallback"] = True
        else:
            poly = np.polynomial.Polynomial.fit(s1, s2, degree)
            resid = np.abs(poly(s1) - s2)
            band = 3.0 * float(resid.max())
            band = max(band, spacing)
            region.update(poly=poly.convert().coef.tolist(), band=band)
    lo1, hi1 = _fatten(s1.min(), s1.max())
    lo2, hi2 = _fatten(s2.min(), s2.max())
    lo4, hi4 = s4.min(), s4.max()
    if mode == "curve":
        ys = poly(np.linspace(lo1, hi1, 200))
        lo2, hi2 = ys.min() - band, ys.max() + band
    region.update(s1=(lo1, hi1), s2=(lo2, hi2), s4=(lo4, hi4), spacing=spacing)
    g1 = _grid_between(lo1, hi1, spacing)
    g2 = _grid_between(lo2, hi2, spacing)
    g4 = _grid_between(lo4, hi4, spacing)
    mask = None
    if mode == "curve":
        def mask(a, b, c):
            return abs(b - poly(a)) <= band
    mesh = mesh_region(h, p, g1, g2, g4, eps=eps, bracket_order=bracket_order, mask=mask)
    mesh.spacing = spacing
    return mesh, region


def _fatten(lo, hi, frac=0.1):
    w = hi - lo
    return lo - frac * w / 2, hi + frac * w / 2


def _grid_between(lo, hi, spacing):
    if hi - lo < spacing:
        return np.array([0.5 * (lo + hi)])
    n = int(math.floor((hi - lo) / spacing + 1e-9)) + 1
    return lo + spacing * np.arange(n)


# ------------------------------------------------------------------ fixed-(s1, s4) grid

def grid_refine(records, p_u, p_s, h, side="s", n=10, tol=1e-10):
    """Equally spaced connections obtained by pinning ``s1`` and ``s4`` on one side.

    Each grid node starts from the nearest low-resolution connection.
    """
    if not records:
        return [], []
    tag = "s" if side == "s" else "u"
    pts = np.array([r.s_hat_s if tag == "s" else r.s_hat_u for r in records])
    a = np.linspace(pts[:, 0].min(), pts[:, 0].max(), n)
    b = np.linspace(pts[:, 3].min(), pts[:, 3].max(), n)
    out, failures = [], []
    for v1 in a:
        for v4 in b:
            k = int(np.argmin((pts[:, 0] - v1) ** 2 + (pts[:, 3] - v4) ** 2))
            r = records[k]
            pair = CandidatePair(r.s_hat_s, r.s_hat_u, 0.0, r.T_s, r.T_u)
            try:
                rec = refine_candidate(pair, p_u, p_s, h, r.delta_u, r.delta_s,
                                       pinned=(f"s1{tag}", f"s4{tag}"), tol=tol,
                                       fixed_values={f"s1{tag}": v1, f"s4{tag}": v4},
                                       m_u=len(r.nodes_u) - 1, m_s=len(r.nodes_s) - 1)
            except (NewtonFailure, IntegrationError, ValueError) as exc:
                failures.append(((v1, v4), str(exc)))
                continue
            out.append(rec)
    return deduplicate(out), failures


def branch_deltas(p_u, p_s, delta):
    """Signed ``delta`` for the unstable (L2) and stable (L1) branches."""
    if p_u.ctx.manifold_kind != CENTER_UNSTABLE or p_s.ctx.manifold_kind != CENTER_STABLE:
        raise ValueError("expected a center-unstable and a center-stable parameterization")
    return p_u.ctx.delta_sign * abs(delta), p_s.ctx.delta_sign * abs(delta)
