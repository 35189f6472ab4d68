"""
Spatial circular restricted three-body problem (RTBP) in synodic coordinates.

Positions and momenta are ``(x, y, z, px, py, pz)`` with ``px = xdot - y``,
``py = ydot + x``, ``pz = zdot``. The big primary sits at ``(mu, 0, 0)`` and the
small one at ``(mu - 1, 0, 0)``.

Besides the vector field, Hamiltonian and symmetries, this module locates the
collinear equilibria, analyses their linearization in closed form and builds
the change-of-basis matrices used by the manifold expansions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

MU_EARTH_MOON = 1.215058560962404e-2

CENTER_UNSTABLE = "center-unstable"
CENTER_STABLE = "center-stable"

# standard symplectic form for (q, p) ordering
J6 = np.block([[np.zeros((3, 3)), np.eye(3)], [-np.eye(3), np.zeros((3, 3))]])

_MIN_DISTANCE = 1e-12


class DegenerateDistanceError(ValueError):
    """The state sits (numerically) on top of one of the primaries."""


class SpectrumError(ValueError):
    """The linearization does not have center x center x saddle shape."""


def _check_distances(s, mu):
    r1 = math.sqrt((s[0] - mu) ** 2 + s[1] ** 2 + s[2] ** 2)
    r2 = math.sqrt((s[0] - mu + 1.0) ** 2 + s[1] ** 2 + s[2] ** 2)
    if r1 < _MIN_DISTANCE or r2 < _MIN_DISTANCE:
        raise DegenerateDistanceError(f"r1={r1:.3e}, r2={r2:.3e} below {_MIN_DISTANCE}")
    return r1, r2


@njit(cache=True)
def field_inplace(s, mu, out):
    x, y, z, px, py, pz = s[0], s[1], s[2], s[3], s[4], s[5]
    dx1 = x - mu
    dx2 = x - mu + 1.0
    rr = y * y + z * z
    r1sq = dx1 * dx1 + rr
    r2sq = dx2 * dx2 + rr
    c1 = (1.0 - mu) / (r1sq * math.sqrt(r1sq))
    c2 = mu / (r2sq * math.sqrt(r2sq))
    out[0] = px + y
    out[1] = py - x
    out[2] = pz
    out[3] = py - c1 * dx1 - c2 * dx2
    out[4] = -px - (c1 + c2) * y
    out[5] = -(c1 + c2) * z


@njit(cache=True)
def jacobian_inplace(s, mu, out):
    x, y, z = s[0], s[1], s[2]
    for i in range(6):
        for j in range(6):
            out[i, j] = 0.0
    out[0, 1] = 1.0
    out[0, 3] = 1.0
    out[1, 0] = -1.0
    out[1, 4] = 1.0
    out[2, 5] = 1.0
    out[3, 4] = 1.0
    out[4, 3] = -1.0
    d1 = (x - mu, y, z)
    d2 = (x - mu + 1.0, y, z)
    r1sq = d1[0] * d1[0] + y * y + z * z
    r2sq = d2[0] * d2[0] + y * y + z * z
    r1 = math.sqrt(r1sq)
    r2 = math.sqrt(r2sq)
    a1 = (1.0 - mu) / (r1sq * r1)
    a2 = mu / (r2sq * r2)
    b1 = 3.0 * a1 / r1sq
    b2 = 3.0 * a2 / r2sq
    for i in range(3):
        for j in range(3):
            v = b1 * d1[i] * d1[j] + b2 * d2[i] * d2[j]
            if i == j:
                v -= a1 + a2
            out[3 + i, j] = v


def rtbp_field(s, mu=MU_EARTH_MOON):
    """Vector field of the RTBP at ``s = (x, y, z, px, py, pz)``.

    Raises
    ------
    DegenerateDistanceError
        If the distance to either primary is below 1e-12.
    """
    s = np.asarray(s, dtype=float)
    _check_distances(s, mu)
    out = np.empty(6)
    field_inplace(s, mu, out)
    return out


def rtbp_hamiltonian(s, mu=MU_EARTH_MOON):
    """Energy ``H = |p|^2/2 - x py + y px - (1-mu)/r1 - mu/r2``."""
    s = np.asarray(s, dtype=float)
    r1, r2 = _check_distances(s, mu)
    x, y, _, px, py, pz = s
    return 0.5 * (px * px + py * py + pz * pz) - x * py + y * px - (1.0 - mu) / r1 - mu / r2


def hamiltonian_gradient(s, mu=MU_EARTH_MOON):
    """Gradient of :func:`rtbp_hamiltonian` with respect to the state."""
    s = np.asarray(s, dtype=float)
    r1, r2 = _check_distances(s, mu)
    x, y, z, px, py, pz = s
    g1 = (1.0 - mu) / r1**3
    g2 = mu / r2**3
    return np.array([
        -py + g1 * (x - mu) + g2 * (x - mu + 1.0),
        px + (g1 + g2) * y,
        (g1 + g2) * z,
        px + y,
        py - x,
        pz,
    ])


def linearize(point, mu=MU_EARTH_MOON):
    """Jacobian matrix of the vector field at ``point``."""
    point = np.asarray(point, dtype=float)
    _check_distances(point, mu)
    out = np.empty((6, 6))
    jacobian_inplace(point, mu, out)
    return out


def apply_symmetry_y(s):
    """Time-reversing symmetry ``(x, -y, z, -px, py, -pz)``; pair with ``t -> -t``."""
    s = np.asarray(s, dtype=float)
    return s * np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])


def apply_symmetry_z(s):
    """Reflection through the primaries' plane, ``(x, y, -z, px, py, -pz)``."""
    s = np.asarray(s, dtype=float)
    return s * np.array([1.0, 1.0, -1.0, 1.0, 1.0, -1.0])


def euler_quintic(gamma, j, mu):
    """Residual of the Euler quintic whose positive root is ``gamma_j``."""
    g = gamma
    if j in (1, 2):
        sg = -1.0 if j == 1 else 1.0
        return (g**5 + sg * (3.0 - mu) * g**4 + (3.0 - 2.0 * mu) * g**3
                - mu * g**2 - sg * 2.0 * mu * g - mu)
    if j == 3:
        return (g**5 + (2.0 + mu) * g**4 + (1.0 + 2.0 * mu) * g**3
                - (1.0 - mu) * g**2 - 2.0 * (1.0 - mu) * g - (1.0 - mu))
    raise ValueError(f"collinear point index must be 1, 2 or 3, got {j}")


def _euler_quintic_prime(g, j, mu):
    if j in (1, 2):
        sg = -1.0 if j == 1 else 1.0
        return (5 * g**4 + 4 * sg * (3.0 - mu) * g**3 + 3 * (3.0 - 2.0 * mu) * g**2
                - 2 * mu * g - sg * 2.0 * mu)
    return (5 * g**4 + 4 * (2.0 + mu) * g**3 + 3 * (1.0 + 2.0 * mu) * g**2
            - 2 * (1.0 - mu) * g - 2.0 * (1.0 - mu))


def locate_libration(j, mu=MU_EARTH_MOON):
    """Distance ``gamma_j`` to the closest primary and abscissa of ``L_j``.

    The positive root of the Euler quintic is bracketed, bisected down to a
    width of 1e-10 and polished with Newton's method.

    Returns
    -------
    gamma : float
    x_L : float
    """
    if j not in (1, 2, 3):
        raise ValueError(f"collinear point index must be 1, 2 or 3, got {j}")
    if not 0.0 < mu < 0.5:
        raise ValueError(f"mass parameter must lie in (0, 1/2), got {mu}")
    lo, hi = (1e-9, 1.0) if j in (1, 2) else (1e-9, 2.0)
    flo, fhi = euler_quintic(lo, j, mu), euler_quintic(hi, j, mu)
    if flo * fhi > 0:
        raise ValueError(f"no sign change of the L{j} quintic on [{lo}, {hi}]")
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        fm = euler_quintic(mid, j, mu)
        if fm == 0.0:
            lo = hi = mid
            break
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    g = 0.5 * (lo + hi)
    for _ in range(8):
        step = euler_quintic(g, j, mu) / _euler_quintic_prime(g, j, mu)
        g -= step
        if abs(step) < 1e-17:
            break
    x = {1: mu - 1.0 + g, 2: mu - 1.0 - g, 3: mu + g}[j]
    return g, x


def _planar_eigvec(kappa, a):
    # x-component fixed to 1; y from the first two rows of (DF - kappa) v = 0
    y = (kappa * kappa - a - 1.0) / (2.0 * kappa)
    return np.array([1.0, y, 0.0, kappa - y, kappa * y + 1.0, 0.0], dtype=complex)


def eigenstructure(jac):
    """Closed-form eigen-analysis of the linearization at a collinear point.

    The Jacobian decouples into a planar ``(x, y, px, py)`` block and a
    vertical ``(z, pz)`` block. The planar characteristic polynomial is
    quadratic in ``kappa**2`` and is solved directly.

    Eigenvectors are normalised as follows: ``u`` (eigenvalue ``+i omega_p``)
    and ``v`` (eigenvalue ``+i omega_v``) have a real positive first nonzero
    component and satisfy ``Re(u)^T J Im(u) = 1``; ``w_plus`` and ``w_minus``
    have positive x components and ``|w_plus^T J w_minus| = 1``.

    Returns
    -------
    omega_p, omega_v, lam : float
    u, v : complex ndarray, shape (6,)
    w_plus, w_minus : ndarray, shape (6,)
    """
    jac = np.asarray(jac, dtype=float)
    planar = [0, 1, 3, 4]
    vertical = [2, 5]
    coupling = max(np.abs(jac[np.ix_(planar, vertical)]).max(),
                   np.abs(jac[np.ix_(vertical, planar)]).max())
    if coupling > 1e-12 or abs(jac[3, 1]) > 1e-12 or abs(jac[4, 0]) > 1e-12:
        raise SpectrumError("linearization is not block-decoupled (not a collinear point?)")
    a, b, c = jac[3, 0], jac[4, 1], jac[5, 2]
    # kappa^4 + (2 - a - b) kappa^2 + (1 + a)(1 + b) = 0
    B = 2.0 - a - b
    Cc = (1.0 + a) * (1.0 + b)
    disc = B * B - 4.0 * Cc
    if disc <= 0:
        raise SpectrumError("planar block has complex kappa^2 roots")
    sq = math.sqrt(disc)
    eta_hyp = 0.5 * (-B + sq)
    eta_ell = 0.5 * (-B - sq)
    if eta_hyp <= 0 or eta_ell >= 0 or c >= 0:
        raise SpectrumError(f"spectrum is not center x center x saddle "
                            f"(kappa^2 = {eta_hyp:.3e}, {eta_ell:.3e}, {c:.3e})")
    lam = math.sqrt(eta_hyp)
    omega_p = math.sqrt(-eta_ell)
    omega_v = math.sqrt(-c)
    if abs(omega_p - omega_v) < 1e-8:
        raise SpectrumError("planar and vertical frequencies are degenerate")

    u = _planar_eigvec(1j * omega_p, a)
    v = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1j * omega_v])
    for vec in (u, v):
        sympl = vec.real @ J6 @ vec.imag
        if sympl <= 0:
            raise SpectrumError("elliptic direction with negative symplectic area")
        vec /= math.sqrt(sympl)
    w_plus = _planar_eigvec(lam, a).real
    w_minus = _planar_eigvec(-lam, a).real
    scale = 1.0 / math.sqrt(abs(w_plus @ J6 @ w_minus))
    w_plus *= scale
    w_minus *= scale
    return omega_p, omega_v, lam, u, v, w_plus, w_minus


# Realification matrix: C @ (s1, s2, s3, s4, s5) = (s1+is2, s1-is2, s3+is4, s3-is4, s5)
C_MATRIX = np.array([
    [1, 1j, 0, 0, 0],
    [1, -1j, 0, 0, 0],
    [0, 0, 1, 1j, 0],
    [0, 0, 1, -1j, 0],
    [0, 0, 0, 0, 1],
], dtype=complex)


@dataclass(frozen=True)
class LibrationContext:
    """Frozen data describing one collinear point and one of its manifolds.

    ``eigvec_u`` and ``eigvec_v`` follow the ``u = u_r - i u_i`` convention,
    so ``u_r = eigvec_u.real`` and ``u_i = -eigvec_u.imag``.
    """

    mu: float
    j: int
    gamma: float
    x_L: float
    omega_p: float
    omega_v: float
    lam: float
    eigvec_u: np.ndarray
    eigvec_v: np.ndarray
    w_plus: np.ndarray
    w_minus: np.ndarray
    manifold_kind: str
    delta_sign: int
    h0: float
    P: np.ndarray = field(repr=False)
    P_inv: np.ndarray = field(repr=False)
    Q: np.ndarray = field(repr=False)
    C: np.ndarray = field(repr=False)

    @property
    def point(self):
        return np.array([self.x_L, 0.0, 0.0, 0.0, self.x_L, 0.0])

    @property
    def eigenvalues(self):
        """The six eigenvalues in the column order of ``P``."""
        hyp = self.lam if self.manifold_kind == CENTER_UNSTABLE else -self.lam
        return np.array([1j * self.omega_p, -1j * self.omega_p,
                         1j * self.omega_v, -1j * self.omega_v, hyp, -hyp])

    def save(self, path):
        save_context(self, path)


def build_frames(u, v, w_plus, w_minus, manifold_kind):
    """Assemble the diagonalising matrix ``P``, the real frame ``Q`` and ``C``.

    ``P`` puts the planar pair first, then the vertical pair, then the
    hyperbolic direction spanning the manifold (``w_plus`` for the
    center-unstable manifold, ``w_minus`` for the center-stable one).
    ``Q = [u_r v_r w_+ u_i v_i w_-]``.
    """
    if manifold_kind == CENTER_UNSTABLE:
        hyp = [w_plus, w_minus]
    elif manifold_kind == CENTER_STABLE:
        hyp = [w_minus, w_plus]
    else:
        raise ValueError(f"unknown manifold kind {manifold_kind!r}")
    P = np.column_stack([u, u.conj(), v, v.conj(), hyp[0], hyp[1]]).astype(complex)
    if abs(np.linalg.det(P)) < 1e-12:
        raise np.linalg.LinAlgError("eigenvector matrix P is singular")
    Q = np.column_stack([u.real, v.real, w_plus, -u.imag, -v.imag, w_minus])
    return P, Q, C_MATRIX.copy()


def libration_context(j, manifold_kind=None, mu=MU_EARTH_MOON):
    """Build the :class:`LibrationContext` of ``L_j``.

    By default ``L1`` gets its center-stable manifold and ``L2`` its
    center-unstable one. ``delta_sign`` selects the hyperbolic branch that
    points towards the small primary (``-1`` for ``L1``, ``+1`` for ``L2``).
    """
    if manifold_kind is None:
        manifold_kind = CENTER_STABLE if j == 1 else CENTER_UNSTABLE
    if j not in (1, 2):
        raise ValueError("manifold contexts are only built for L1 and L2")
    gamma, x_L = locate_libration(j, mu)
    point = np.array([x_L, 0.0, 0.0, 0.0, x_L, 0.0])
    jac = linearize(point, mu)
    omega_p, omega_v, lam, u, v, w_plus, w_minus = eigenstructure(jac)
    P, Q, C = build_frames(u, v, w_plus, w_minus, manifold_kind)
    return LibrationContext(
        mu=mu, j=j, gamma=gamma, x_L=x_L, omega_p=omega_p, omega_v=omega_v,
        lam=lam, eigvec_u=u, eigvec_v=v, w_plus=w_plus, w_minus=w_minus,
        manifold_kind=manifold_kind, delta_sign=-1 if j == 1 else 1,
        h0=rtbp_hamiltonian(point, mu), P=P, P_inv=np.linalg.inv(P), Q=Q, C=C,
    )


def save_context(ctx, path):
    """Write the defining parameters of ``ctx`` as ``key = value`` lines.

    Derived quantities are recomputed on load, and checked against the stored
    values, so that the file is a faithful record of what was used.
    """
    lines = [
        f"mu = {ctx.mu:.17g}",
        f"j = {ctx.j}",
        f"manifold_kind = {ctx.manifold_kind}",
        f"gamma = {ctx.gamma:.17g}",
        f"x_L = {ctx.x_L:.17g}",
        f"omega_p = {ctx.omega_p:.17g}",
        f"omega_v = {ctx.omega_v:.17g}",
        f"lambda = {ctx.lam:.17g}",
        f"h0 = {ctx.h0:.17g}",
        f"delta_sign = {ctx.delta_sign}",
    ]
    for name, vec in (("u", ctx.eigvec_u), ("v", ctx.eigvec_v)):
        lines.append(f"{name}_re = " + " ".join(f"{c:.17g}" for c in vec.real))
        lines.append(f"{name}_im = " + " ".join(f"{c:.17g}" for c in vec.imag))
    lines.append("w_plus = " + " ".join(f"{c:.17g}" for c in ctx.w_plus))
    lines.append("w_minus = " + " ".join(f"{c:.17g}" for c in ctx.w_minus))
    Path(path).write_text("\n".join(lines) + "\n")


def read_key_values(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_context(path):
    """Read a context file written by :func:`save_context`."""
    kv = read_key_values(path)
    ctx = libration_context(int(kv["j"]), kv["manifold_kind"], float(kv["mu"]))
    for key, attr in (("gamma", "gamma"), ("omega_p", "omega_p"), ("lambda", "lam"),
                      ("h0", "h0")):
        stored = float(kv[key])
        if abs(stored - getattr(ctx, attr)) > 1e-13 * max(1.0, abs(stored)):
            raise ValueError(f"context file {path}: {key} does not match recomputed value")
    return ctx
