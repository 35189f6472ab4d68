"""
Center-stable / center-unstable manifolds of a collinear point by the
parameterization method.

We look for ``W: C^5 -> C^6`` and a reduced field ``f: C^5 -> C^5`` such that
``G(W(s)) = DW(s) f(s)``, where ``G`` is the RTBP field written in the
eigenbasis ``P`` of the libration point. The invariance equation is solved
degree by degree; the tangent part of each coefficient goes either into ``f``
(choice *a*) or into ``W`` (choice *b*) according to a :class:`StyleConfig`.

Indices of variables and components are 0-based throughout the code:
``s[0], ..., s[4]`` are the parameters usually written ``s1, ..., s5``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .dynamics import C_MATRIX, LibrationContext, load_context, save_context
from .propagate import IntegrationError, _integrate, _sample
from .polyalg import (
    TruncatedSeries,
    _eval_many,
    eval_many,
    monomial_index,
    mul_block_into,
    pow_block,
    read_series,
    write_series,
)

log = logging.getLogger(__name__)

NVARS = 5
NSTATE = 6
_C_INV = np.linalg.inv(C_MATRIX)


class SmallDivisorError(ArithmeticError):
    """A divisor of the cohomological equation fell below the floor ``tau``."""

    def __init__(self, component, exponent, divisor):
        self.component = component
        self.exponent = tuple(int(e) for e in exponent)
        self.divisor = divisor
        super().__init__(f"small divisor {divisor:.3e} for component {component}, "
                         f"monomial {self.exponent}")


class RealificationError(ArithmeticError):
    """Imaginary residue after realification is too large."""


@dataclass(frozen=True)
class StyleConfig:
    """Rule deciding, per tangent coefficient, between choices (a) and (b).

    ``invariant_sets`` lists 0-based index sets ``I`` such that ``{s_l = 0,
    l in I}`` must be invariant; ``uncouple_last`` removes the dependence of
    the first ``d - 1`` reduced equations on the last parameter.
    """

    d: int = 5
    invariant_sets: tuple = ((4,), (2, 3), (0, 1))
    uncouple_last: bool = True
    tau: float = 1e-8

    def graph_mask(self, i, exps):
        """Boolean mask over the rows of ``exps``: True where choice (b) applies."""
        exps = np.atleast_2d(exps)
        mask = np.zeros(exps.shape[0], dtype=bool)
        if self.uncouple_last and i < self.d - 1:
            mask |= exps[:, self.d - 1] != 0
        for iset in self.invariant_sets:
            if i in iset:
                mask |= (exps[:, list(iset)] == 0).all(axis=1)
        return mask


# ------------------------------------------------------------------ field jet

class _FieldJet:
    """Degree-by-degree composition of the RTBP field with ``Z0 + P W(s)``.

    All auxiliary series are kept so that block ``k`` can be (re)computed once
    the blocks below ``k`` are final.
    """

    names = ("Z0", "Z1", "Z2", "Z3", "Z4", "Z5", "dx1", "dx2", "q1", "q2", "c1", "c2",
             "t1", "t2", "cc", "ty", "tz")

    def __init__(self, ctx, index):
        self.ctx = ctx
        self.index = index
        self.a = {n: np.zeros(index.size, dtype=np.complex128) for n in self.names}
        self.F = np.zeros((NSTATE, index.size), dtype=np.complex128)
        self._tmp = np.zeros(index.size, dtype=np.complex128)

    def set_state_block(self, k, Zk):
        lo, hi = self.index.offsets[k], self.index.offsets[k + 1]
        for c in range(NSTATE):
            self.a[f"Z{c}"][lo:hi] = Zk[c]

    def _prod(self, a, b, k):
        lo, hi = self.index.offsets[k], self.index.offsets[k + 1]
        self._tmp[lo:hi] = 0.0
        mul_block_into(a, b, self._tmp, k, self.index)
        return self._tmp[lo:hi].copy()

    def update(self, k):
        """Recompute block ``k`` of every auxiliary series and of ``F``."""
        mu = self.ctx.mu
        a = self.a
        lo, hi = self.index.offsets[k], self.index.offsets[k + 1]
        x, y, z = a["Z0"], a["Z1"], a["Z2"]
        a["dx1"][lo:hi] = x[lo:hi]
        a["dx2"][lo:hi] = x[lo:hi]
        if k == 0:
            a["dx1"][0] -= mu
            a["dx2"][0] += 1.0 - mu
        dx1, dx2 = a["dx1"], a["dx2"]
        yz = self._prod(y, y, k) + self._prod(z, z, k)
        a["q1"][lo:hi] = self._prod(dx1, dx1, k) + yz
        a["q2"][lo:hi] = self._prod(dx2, dx2, k) + yz
        if k == 0:
            for q, c in (("q1", "c1"), ("q2", "c2")):
                if abs(a[q][0]) < 1e-24:
                    raise ZeroDivisionError("expansion point sits on a primary")
                a[c][0] = a[q][0] ** -1.5
        else:
            pow_block(a["q1"], a["c1"], k, -1.5, self.index)
            pow_block(a["q2"], a["c2"], k, -1.5, self.index)
        a["t1"][lo:hi] = self._prod(a["c1"], dx1, k)
        a["t2"][lo:hi] = self._prod(a["c2"], dx2, k)
        a["cc"][lo:hi] = (1.0 - mu) * a["c1"][lo:hi] + mu * a["c2"][lo:hi]
        a["ty"][lo:hi] = self._prod(a["cc"], y, k)
        a["tz"][lo:hi] = self._prod(a["cc"], z, k)
        px, py, pz = a["Z3"], a["Z4"], a["Z5"]
        F = self.F
        F[0, lo:hi] = px[lo:hi] + y[lo:hi]
        F[1, lo:hi] = py[lo:hi] - x[lo:hi]
        F[2, lo:hi] = pz[lo:hi]
        F[3, lo:hi] = py[lo:hi] - (1.0 - mu) * a["t1"][lo:hi] - mu * a["t2"][lo:hi]
        F[4, lo:hi] = -px[lo:hi] - a["ty"][lo:hi]
        F[5, lo:hi] = -a["tz"][lo:hi]
        return self.ctx.P_inv @ F[:, lo:hi]


def _state_block(ctx, W, k, index):
    lo, hi = index.offsets[k], index.offsets[k + 1]
    Zk = ctx.P @ W[:, lo:hi]
    if k == 0:
        Zk[:, 0] += ctx.point
    return Zk


def compose_field(W, ctx):
    """Series of ``G(W(s)) = P^{-1} F(Z0 + P W(s))``.

    Parameters
    ----------
    W : sequence of 6 TruncatedSeries
        Manifold components in the eigenbasis, with zero constant term.
    ctx : LibrationContext

    Returns
    -------
    list of 6 TruncatedSeries
    """
    W = list(W)
    nvars, order = W[0].nvars, W[0].order
    index = W[0].index
    Wc = np.array([w.coeffs for w in W])
    jet = _FieldJet(ctx, index)
    G = np.zeros((NSTATE, index.size), dtype=np.complex128)
    for k in range(order + 1):
        jet.set_state_block(k, _state_block(ctx, Wc, k, index))
        lo, hi = index.offsets[k], index.offsets[k + 1]
        G[:, lo:hi] = jet.update(k)
    return [TruncatedSeries(nvars, order, g) for g in G]


@njit(cache=True)
def _mul_block_multi(a, B, OUT, k, offs, key, lut):
    # OUT[r, block k] += [a * B[r]]_k for every row r
    nb = B.shape[0]
    base_out = offs[k]
    for da in range(k + 1):
        db = k - da
        b_lo = offs[db]
        b_hi = offs[db + 1]
        for ia in range(offs[da], offs[da + 1]):
            ca = a[ia]
            if ca == 0:
                continue
            ka = key[ia]
            for ib in range(b_lo, b_hi):
                o = base_out + lut[ka + key[ib]]
                for r in range(nb):
                    OUT[r, o] += ca * B[r, ib]


def _partial_block(coeffs, var, k, index, out):
    # out[block k-1] = block k of d/ds_var (coeffs); coeffs/out shaped (ncomp, M)
    lo, hi = index.offsets[k], index.offsets[k + 1]
    m = index.exps[lo:hi, var]
    sel = np.flatnonzero(m > 0)
    key = index.key[lo:hi][sel]
    if var < index.nvars - 1:
        key = key - index.weights[var]
    dst = index.offsets[k - 1] + index.lut[key]
    out[:, dst] = coeffs[:, lo + sel] * m[sel]


def _dw_times_f(dW, f_nl, k, index):
    # [sum_j dW_j . f_nl_j]_k for all 6 components; dW shaped (5, 6, M)
    out = np.zeros((NSTATE, index.size), dtype=np.complex128)
    for j in range(NVARS):
        _mul_block_multi(f_nl[j], dW[j], out, k, index.offsets, index.key, index.lut)
    lo, hi = index.offsets[k], index.offsets[k + 1]
    return out[:, lo:hi]


def cohomological_rhs(k, W, f, ctx):
    """Right-hand side ``R_k`` of the order-``k`` cohomological equation.

    ``W`` and ``f`` are sequences of series holding all orders below ``k``
    (blocks ``>= k`` are ignored). Returns a ``(6, block size)`` complex array.
    """
    index = W[0].index
    lo = index.offsets[k]
    Wc = np.array([w.coeffs for w in W])
    Wc[:, lo:] = 0.0
    fc = np.array([g.coeffs for g in f])
    fc[:, lo:] = 0.0
    fc[:, index.offsets[1]:index.offsets[2]] = 0.0
    G = compose_field([TruncatedSeries(w.nvars, w.order, c) for w, c in zip(W, Wc)], ctx)
    dW = np.zeros((NVARS, NSTATE, index.size), dtype=np.complex128)
    for j in range(NVARS):
        for kk in range(1, k):
            _partial_block(Wc, j, kk, index, dW[j])
    return G_block(G, k) - _dw_times_f(dW, fc, k, index)


def G_block(series_list, k):
    """Stack the degree-``k`` blocks of a list of series."""
    return np.array([s.block(k) for s in series_list])


def solve_cohomological(k, R, style, eigenvalues, index):
    """Solve one order of the cohomological equation.

    Parameters
    ----------
    k : int
    R : complex ndarray, shape (6, block size)
    style : StyleConfig
    eigenvalues : complex ndarray, shape (6,)
        Eigenvalues in the column order of ``P``.
    index : MonomialIndex

    Returns
    -------
    Wk : complex ndarray, shape (6, block size)
    fk : complex ndarray, shape (5, block size)
    """
    lo, hi = index.offsets[k], index.offsets[k + 1]
    exps = index.exps[lo:hi]
    lam_m = exps @ eigenvalues[:NVARS]
    Wk = np.zeros((NSTATE, hi - lo), dtype=np.complex128)
    fk = np.zeros((NVARS, hi - lo), dtype=np.complex128)
    for i in range(NSTATE):
        div = lam_m - eigenvalues[i]
        if i < style.d:
            use_b = style.graph_mask(i, exps)
        else:
            use_b = np.ones(hi - lo, dtype=bool)
        small = use_b & (np.abs(div) < style.tau)
        if small.any():
            t = int(np.flatnonzero(small)[0])
            raise SmallDivisorError(i, exps[t], abs(div[t]))
        Wk[i, use_b] = R[i, use_b] / div[use_b]
        if i < style.d:
            fk[i, ~use_b] = R[i, ~use_b]
    return Wk, fk


# ------------------------------------------------------------------ result type

@dataclass
class Parameterization:
    """Manifold parameterization ``W`` and reduced field ``f`` (complex coefficients).

    ``W`` has shape ``(6, M)`` and ``f`` shape ``(5, M)`` where ``M`` is the
    number of monomials of degree ``<= order`` in 5 variables.
    """

    W: np.ndarray
    f: np.ndarray
    order: int
    ctx: LibrationContext
    style: StyleConfig = field(default_factory=StyleConfig)
    _dW: np.ndarray | None = field(default=None, repr=False)
    _df: np.ndarray | None = field(default=None, repr=False)
    _flow_args: tuple | None = field(default=None, repr=False)

    @property
    def index(self):
        return monomial_index(NVARS, self.order)

    def W_series(self, i):
        return TruncatedSeries(NVARS, self.order, self.W[i])

    def f_series(self, i):
        return TruncatedSeries(NVARS, self.order, self.f[i])

    def truncated(self, order):
        """Same manifold truncated at a lower order (coefficients do not depend on N)."""
        if order > self.order:
            raise ValueError("cannot raise the order of an existing parameterization")
        m = monomial_index(NVARS, order).size
        return Parameterization(self.W[:, :m].copy(), self.f[:, :m].copy(), order,
                                self.ctx, self.style)

    @property
    def dW(self):
        """``dW[j, i]`` = coefficients of ``dW^i / ds_j``."""
        if self._dW is None:
            self._dW = _all_partials(self.W, self.index)
        return self._dW

    @property
    def df(self):
        if self._df is None:
            self._df = _all_partials(self.f, self.index)
        return self._df

    # complex evaluations
    def eval_W(self, z, max_degree=None, skip_last=False):
        return eval_many(self.W, self.index, z, max_degree, skip_last)

    def eval_f(self, z, max_degree=None, skip_last=False):
        return eval_many(self.f, self.index, z, max_degree, skip_last)

    def eval_DW(self, z, max_degree=None, skip_last=False):
        """Complex 6x5 Jacobian of ``W`` at ``z``."""
        flat = self.dW.reshape(NVARS * NSTATE, -1)
        vals = eval_many(flat, self.index, z, max_degree, skip_last)
        return vals.reshape(NVARS, NSTATE).T

    # real (realified) evaluations
    def eval_Wtilde(self, s, max_degree=None, skip_last=None, tol=1e-9):
        """Synodic state ``Z0 + P W(C s)`` for real ``s`` (5 entries).

        ``skip_last`` defaults to True exactly when ``s[4] == 0``.
        """
        s = np.asarray(s, dtype=float)
        if skip_last is None:
            skip_last = s[4] == 0.0
        Z = self.ctx.point + self.ctx.P @ self.eval_W(self.ctx.C @ s, max_degree, skip_last)
        return _real_part(Z, tol)

    def eval_Wtilde_jacobian(self, s, max_degree=None, tol=1e-9):
        """6x5 real Jacobian of :meth:`eval_Wtilde` with respect to ``s``."""
        s = np.asarray(s, dtype=float)
        D = self.ctx.P @ self.eval_DW(self.ctx.C @ s, max_degree) @ self.ctx.C
        return _real_part(D, tol)

    def eval_reduced_field(self, s, tol=1e-9):
        """Real reduced field ``C^{-1} f(C s)``."""
        s = np.asarray(s, dtype=float)
        z = self.ctx.C @ s
        fz = self.eval_f(z, skip_last=s[4] == 0.0)
        return _real_part(_C_INV @ fz, tol)

    def reduced_flow(self, s0, t, tol=1e-13):
        """Flow of the reduced field from ``s0`` over time ``t`` (RKF7(8)).

        Raises
        ------
        IntegrationError
            On step-size underflow.
        """
        s0 = np.asarray(s0, dtype=float)
        y, t_reached, status, _ = _integrate(_rhs_reduced, self._reduced_args(), s0, float(t),
                                             tol, 1e-2, 0.0, 0.0, 10_000_000)
        if status != 0:
            raise IntegrationError(f"reduced flow failed at t={t_reached:.6g}")
        return y

    def reduced_flow_samples(self, s0, times, tol=1e-13):
        """Reduced flow at the monotone ``times`` (``times[0] = 0``); rows of NaN after a failure."""
        return _sample(_rhs_reduced, self._reduced_args(), np.asarray(s0, dtype=float),
                       np.asarray(times, dtype=float), tol, 0.0)

    def _reduced_args(self):
        if self._flow_args is None:
            idx = self.index
            pos = support_closure(self.f, idx)
            self._flow_args = (np.ascontiguousarray(self.f), pos, idx.parent, idx.parent_var,
                               C_MATRIX.copy(), _C_INV.copy(),
                               np.empty(idx.size, dtype=np.complex128))
        return self._flow_args

    # io
    def save(self, directory):
        save_parameterization(self, directory)


def _real_part(Z, tol):
    scale = max(1.0, float(np.abs(Z).max()))
    resid = float(np.abs(Z.imag).max()) if np.size(Z) else 0.0
    if resid > tol * scale:
        raise RealificationError(f"imaginary residue {resid:.3e} after realification")
    return Z.real.copy()


def support_closure(coeffs, index):
    """Positions of the nonzero monomials of ``coeffs`` plus all their parents.

    Evaluating on this set gives the same value as a dense evaluation.
    """
    mark = np.any(coeffs != 0, axis=0)
    mark[0] = True
    for k in range(index.order, 0, -1):
        lo, hi = index.offsets[k], index.offsets[k + 1]
        sel = lo + np.flatnonzero(mark[lo:hi])
        mark[index.parent[sel]] = True
    return np.flatnonzero(mark).astype(np.int64)


@njit(cache=True)
def _rhs_reduced(y, args, out):
    coeffs, pos, parent, parent_var, cmat, cinv, mono = args
    z = cmat @ (y + 0j)
    fz = _eval_many(coeffs, pos, parent, parent_var, z, mono)
    w = cinv @ fz
    for i in range(out.shape[0]):
        out[i] = w[i].real


def _all_partials(coeffs, index):
    out = np.zeros((NVARS,) + coeffs.shape, dtype=np.complex128)
    for j in range(NVARS):
        for k in range(1, index.order + 1):
            _partial_block(coeffs, j, k, index, out[j])
    return out


def build_parameterization(ctx, order, style=None):
    """Solve the invariance equation up to degree ``order``.

    Returns
    -------
    Parameterization
    """
    if order < 1:
        raise ValueError("order must be at least 1")
    style = style or StyleConfig()
    index = monomial_index(NVARS, order)
    lam = ctx.eigenvalues
    W = np.zeros((NSTATE, index.size), dtype=np.complex128)
    f = np.zeros((NVARS, index.size), dtype=np.complex128)
    f_nl = np.zeros((NVARS, index.size), dtype=np.complex128)   # f without its linear part
    dW = np.zeros((NVARS, NSTATE, index.size), dtype=np.complex128)
    for i in range(NVARS):
        e = np.zeros(NVARS, dtype=np.int64)
        e[i] = 1
        p = index.position(e)
        W[i, p] = 1.0
        f[i, p] = lam[i]
    jet = _FieldJet(ctx, index)
    for k in (0, 1):
        jet.set_state_block(k, _state_block(ctx, W, k, index))
        jet.update(k)
        for j in range(NVARS):
            if k:
                _partial_block(W, j, k, index, dW[j])
    t0 = time.perf_counter()
    for k in range(2, order + 1):
        lo, hi = index.offsets[k], index.offsets[k + 1]
        jet.set_state_block(k, np.zeros((NSTATE, hi - lo)))
        R = jet.update(k) - _dw_times_f(dW, f_nl, k, index)
        Wk, fk = solve_cohomological(k, R, style, lam, index)
        W[:, lo:hi] = Wk
        f[:, lo:hi] = fk
        f_nl[:, lo:hi] = fk
        jet.set_state_block(k, _state_block(ctx, W, k, index))
        jet.update(k)
        for j in range(NVARS):
            _partial_block(W, j, k, index, dW[j])
        log.debug("order %d done (%.1fs)", k, time.perf_counter() - t0)
    return Parameterization(W, f, order, ctx, style, _dW=dW)


def invariance_residual(p, z):
    """``G(W(z)) - DW(z) f(z)`` evaluated pointwise (not as series) at complex ``z``.

    The RTBP field is continued analytically to complex arguments.
    """
    ctx = p.ctx
    Z = ctx.point + ctx.P @ p.eval_W(z)
    F = _complex_field(Z, ctx.mu)
    return ctx.P_inv @ F - p.eval_DW(z) @ p.eval_f(z)


def residual_series(p, extra=8):
    """Series of ``G(W(s)) - DW(s) f(s)`` up to degree ``p.order + extra``.

    ``W`` and ``f`` are padded with zeros above ``p.order``. Returns the
    coefficient array of shape ``(6, M)`` on the order ``p.order + extra``
    monomial index; blocks of degree ``<= p.order`` hold only roundoff.
    """
    N = p.order
    index = monomial_index(NVARS, N + extra)
    n_old = p.index.size
    W = np.zeros((NSTATE, index.size), dtype=np.complex128)
    W[:, :n_old] = p.W
    f = np.zeros((NVARS, index.size), dtype=np.complex128)
    f[:, :n_old] = p.f
    G = compose_field([TruncatedSeries(NVARS, N + extra, w) for w in W], p.ctx)
    dW = np.zeros((NVARS, NSTATE, index.size), dtype=np.complex128)
    for j in range(NVARS):
        for k in range(1, N + 1):
            _partial_block(W, j, k, index, dW[j])
    R = np.zeros((NSTATE, index.size), dtype=np.complex128)
    for k in range(N + extra + 1):
        lo, hi = index.offsets[k], index.offsets[k + 1]
        R[:, lo:hi] = G_block(G, k) - _dw_times_f(dW, f, k, index)
    return R, index


def truncation_residual(R, index, order, z):
    """Evaluate the degree ``> order`` part of a residual series at complex ``z``."""
    c = R.copy()
    c[:, :index.offsets[order + 1]] = 0.0
    return eval_many(c, index, z)


def _complex_field(Z, mu):
    x, y, z, px, py, pz = Z
    dx1 = x - mu
    dx2 = x - mu + 1.0
    q1 = dx1 * dx1 + y * y + z * z
    q2 = dx2 * dx2 + y * y + z * z
    c1 = (1.0 - mu) * q1 ** -1.5
    c2 = mu * q2 ** -1.5
    return np.array([px + y, py - x, pz, py - c1 * dx1 - c2 * dx2,
                     -px - (c1 + c2) * y, -(c1 + c2) * z])


# ------------------------------------------------------------------ persistence

def context_digest(ctx):
    text = f"{ctx.mu:.17g}|{ctx.j}|{ctx.manifold_kind}|{ctx.gamma:.17g}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_parameterization(p, directory):
    """Write one coefficient file per component plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_context(p.ctx, d / "context.txt")
    for i in range(NSTATE):
        write_series(p.W_series(i), d / f"W{i + 1}.txt")
    for i in range(NVARS):
        write_series(p.f_series(i), d / f"f{i + 1}.txt")
    manifest = {
        "order": p.order,
        "context": context_digest(p.ctx),
        "style": asdict(p.style),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_parameterization(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    ctx = load_context(d / "context.txt")
    if manifest["context"] != context_digest(ctx):
        raise ValueError(f"{d}: context digest mismatch")
    st = manifest["style"]
    style = StyleConfig(d=st["d"], invariant_sets=tuple(tuple(s) for s in st["invariant_sets"]),
                        uncouple_last=st["uncouple_last"], tau=st["tau"])
    W = np.array([read_series(d / f"W{i + 1}.txt").coeffs for i in range(NSTATE)])
    f = np.array([read_series(d / f"f{i + 1}.txt").coeffs for i in range(NVARS)])
    return Parameterization(W, f, int(manifest["order"]), ctx, style)
