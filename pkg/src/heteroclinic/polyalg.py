"""
Dense truncated multivariate power series with complex coefficients.

A series in ``n`` variables truncated at total degree ``N`` stores one
coefficient per monomial ``s^m`` with ``|m| <= N``. Coefficients are grouped
by homogeneous degree; inside a degree block the monomials are ordered by the
exponents of the first ``n - 1`` variables (graded, then lexicographically
decreasing), the exponent of the last variable being implied by the degree.

With that ordering, the position of a monomial inside its degree block only
depends on its first ``n - 1`` exponents, and those exponents are packed into
an integer key (base ``N + 1``) that is additive under multiplication. A single
look-up table then turns ``key(a) + key(b)`` into the position of the product
monomial, which is what makes the product kernels cheap.
"""
from __future__ import annotations

from functools import lru_cache
from math import comb
from pathlib import Path

import numpy as np
from numba import njit

_MAX_LUT = 50_000_000


class ShapeMismatchError(ValueError):
    """Binary operation between series of different shape."""


def _compositions(d, n):
    # all n-tuples of non-negative ints summing to d, lexicographically decreasing
    if n == 1:
        yield (d,)
        return
    for first in range(d, -1, -1):
        for rest in _compositions(d - first, n - 1):
            yield (first,) + rest


def _graded_monomials(nvars, order):
    # exponent tuples of all monomials of degree <= order, graded, lex-decreasing
    if nvars == 0:
        return [()]
    out = []
    for d in range(order + 1):
        out.extend(_compositions(d, nvars))
    return out


class MonomialIndex:
    """Index tables shared by all series with the same ``(nvars, order)``.

    Use :func:`monomial_index` to get a cached instance.
    """

    def __init__(self, nvars, order):
        if nvars < 1:
            raise ValueError("need at least one variable")
        if order < 0:
            raise ValueError("truncation order must be non-negative")
        self.nvars = nvars
        self.order = order
        base = order + 1
        if base ** (nvars - 1) > _MAX_LUT:
            raise ValueError(f"(nvars={nvars}, order={order}) too large for dense storage")
        head = _graded_monomials(nvars - 1, order)
        head_arr = np.array(head, dtype=np.int64).reshape(len(head), nvars - 1)
        weights = base ** np.arange(nvars - 1, dtype=np.int64)
        head_key = head_arr @ weights if nvars > 1 else np.zeros(len(head), dtype=np.int64)
        head_deg = head_arr.sum(axis=1)
        self.lut = np.full(base ** (nvars - 1), -1, dtype=np.int64)
        self.lut[head_key] = np.arange(len(head), dtype=np.int64)

        sizes = [comb(d + nvars - 1, nvars - 1) for d in range(order + 1)]
        self.offsets = np.zeros(order + 2, dtype=np.int64)
        self.offsets[1:] = np.cumsum(sizes)
        self.size = int(self.offsets[-1])

        exps = np.empty((self.size, nvars), dtype=np.int64)
        key = np.empty(self.size, dtype=np.int64)
        degree = np.empty(self.size, dtype=np.int64)
        for d in range(order + 1):
            lo, hi = self.offsets[d], self.offsets[d + 1]
            n = hi - lo
            exps[lo:hi, : nvars - 1] = head_arr[:n]
            exps[lo:hi, nvars - 1] = d - head_deg[:n]
            key[lo:hi] = head_key[:n]
            degree[lo:hi] = d
        self.exps = exps
        self.key = key
        self.degree = degree
        self.weights = weights

        # evaluation tree: each monomial = parent * s[var], var = first nonzero exponent
        self.parent = np.full(self.size, -1, dtype=np.int64)
        self.parent_var = np.full(self.size, -1, dtype=np.int64)
        var = np.argmax(exps[1:] > 0, axis=1)
        # the last variable does not enter the key
        pkey = key[1:] - np.append(weights, 0)[var]
        self.parent[1:] = self.offsets[degree[1:] - 1] + self.lut[pkey]
        self.parent_var[1:] = var
        self._eval_sets = {}

    def position(self, m):
        """Flat position of the exponent vector ``m``."""
        m = np.asarray(m, dtype=np.int64)
        d = int(m.sum())
        if d > self.order or (m < 0).any():
            raise IndexError(f"monomial {tuple(m)} outside truncation order {self.order}")
        k = int(m[:-1] @ self.weights) if self.nvars > 1 else 0
        return int(self.offsets[d] + self.lut[k])

    def block_size(self, k):
        return int(self.offsets[k + 1] - self.offsets[k])

    def eval_set(self, max_degree, skip_last):
        """Positions used when evaluating up to ``max_degree``, optionally
        dropping every monomial that contains the last variable."""
        key = (max_degree, skip_last)
        if key not in self._eval_sets:
            sel = self.degree <= max_degree
            if skip_last:
                sel &= self.exps[:, -1] == 0
            self._eval_sets[key] = np.flatnonzero(sel).astype(np.int64)
        return self._eval_sets[key]


@lru_cache(maxsize=None)
def monomial_index(nvars, order):
    return MonomialIndex(nvars, order)


# ---------------------------------------------------------------- kernels

@njit(cache=True)
def _mul_block(a, b, out, k, offs, key, lut):
    # out[block k] += [a * b]_k
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
                out[base_out + lut[ka + key[ib]]] += ca * b[ib]


@njit(cache=True)
def _mul_block_weighted(f, g, out, k, offs, key, lut, alpha):
    # out[block k] += sum_{j=1..k} (alpha*j - (k-j)) f_j g_{k-j}
    base_out = offs[k]
    for j in range(1, k + 1):
        w = alpha * j - (k - j)
        if w == 0.0:
            continue
        g_lo = offs[k - j]
        g_hi = offs[k - j + 1]
        for ia in range(offs[j], offs[j + 1]):
            ca = f[ia]
            if ca == 0:
                continue
            ca = ca * w
            ka = key[ia]
            for ib in range(g_lo, g_hi):
                out[base_out + lut[ka + key[ib]]] += ca * g[ib]


@njit(cache=True)
def _eval_many(coeffs, positions, parent, parent_var, point, mono):
    ncomp = coeffs.shape[0]
    out = np.zeros(ncomp, dtype=np.complex128)
    for t in range(positions.shape[0]):
        i = positions[t]
        if i == 0:
            mono[0] = 1.0
        else:
            mono[i] = mono[parent[i]] * point[parent_var[i]]
        v = mono[i]
        for c in range(ncomp):
            out[c] += coeffs[c, i] * v
    return out


def mul_block_into(a, b, out, k, index):
    """Add the degree-``k`` block of ``a * b`` (raw coefficient arrays) into ``out``."""
    _mul_block(a, b, out, k, index.offsets, index.key, index.lut)


def pow_block(f, g, k, alpha, index):
    """Degree-``k`` block of ``g = f**alpha`` given ``f`` and ``g`` below ``k``.

    Uses ``k f0 g_k = sum_{j=1}^{k} (alpha j - (k - j)) f_j g_{k-j}``, i.e. the
    identity ``f R(g) = alpha g R(f)`` with ``R`` the Euler operator.
    """
    lo, hi = index.offsets[k], index.offsets[k + 1]
    acc = np.zeros(index.size, dtype=np.complex128)
    _mul_block_weighted(f, g, acc, k, index.offsets, index.key, index.lut, float(alpha))
    g[lo:hi] = acc[lo:hi] / (k * f[0])


def eval_many(coeffs, index, point, max_degree=None, skip_last=False):
    """Evaluate several series sharing ``index`` at one point.

    ``coeffs`` has shape ``(ncomp, index.size)``; the result has ``ncomp``
    complex entries.
    """
    if max_degree is None or max_degree > index.order:
        max_degree = index.order
    positions = index.eval_set(max_degree, skip_last)
    mono = np.empty(index.size, dtype=np.complex128)
    pt = np.asarray(point, dtype=np.complex128)
    return _eval_many(np.ascontiguousarray(coeffs, dtype=np.complex128), positions,
                      index.parent, index.parent_var, pt, mono)


def partial_coeffs(coeffs, i, index):
    """Coefficients of ``d/ds_i`` of the series ``coeffs`` (same truncation)."""
    out = np.zeros(index.size, dtype=np.complex128)
    m_i = index.exps[:, i]
    src = np.flatnonzero(m_i > 0)
    if src.size == 0:
        return out
    deg = index.degree[src]
    key = index.key[src]
    if i < index.nvars - 1:
        key = key - index.weights[i]
    dst = index.offsets[deg - 1] + index.lut[key]
    out[dst] = coeffs[src] * m_i[src]
    return out


# ---------------------------------------------------------------- series type

class TruncatedSeries:
    """Power series in ``nvars`` variables truncated at total degree ``order``.

    Series are treated as values: arithmetic returns new objects and never
    mutates its operands. Both operands of a binary operation must share
    ``nvars`` and ``order``; there is no implicit re-truncation.
    """

    __slots__ = ("coeffs", "index")

    def __init__(self, nvars, order, coeffs=None):
        self.index = monomial_index(nvars, order)
        if coeffs is None:
            self.coeffs = np.zeros(self.index.size, dtype=np.complex128)
        else:
            coeffs = np.asarray(coeffs, dtype=np.complex128)
            if coeffs.shape != (self.index.size,):
                raise ShapeMismatchError(
                    f"expected {self.index.size} coefficients, got {coeffs.shape}")
            self.coeffs = coeffs

    # constructors
    @classmethod
    def constant(cls, nvars, order, value):
        out = cls(nvars, order)
        out.coeffs[0] = value
        return out

    @classmethod
    def variable(cls, nvars, order, i, shift=0.0):
        """The series ``shift + s_i`` (``i`` is 0-based)."""
        out = cls.constant(nvars, order, shift)
        if order >= 1:
            m = np.zeros(nvars, dtype=np.int64)
            m[i] = 1
            out.coeffs[out.index.position(m)] = 1.0
        return out

    @classmethod
    def from_terms(cls, nvars, order, terms):
        """Build from a mapping ``{exponent tuple: coefficient}``."""
        out = cls(nvars, order)
        for m, c in terms.items():
            out.coeffs[out.index.position(m)] += c
        return out

    @property
    def nvars(self):
        return self.index.nvars

    @property
    def order(self):
        return self.index.order

    def copy(self):
        return TruncatedSeries(self.nvars, self.order, self.coeffs.copy())

    def _check(self, other):
        if not isinstance(other, TruncatedSeries):
            raise TypeError(f"expected TruncatedSeries, got {type(other).__name__}")
        if other.index is not self.index:
            raise ShapeMismatchError(
                f"series shapes differ: (nvars={self.nvars}, N={self.order}) vs "
                f"(nvars={other.nvars}, N={other.order})")

    def coefficient(self, m):
        return self.coeffs[self.index.position(m)]

    # arithmetic
    def __add__(self, other):
        if isinstance(other, TruncatedSeries):
            self._check(other)
            return TruncatedSeries(self.nvars, self.order, self.coeffs + other.coeffs)
        out = self.copy()
        out.coeffs[0] += other
        return out

    __radd__ = __add__

    def __neg__(self):
        return TruncatedSeries(self.nvars, self.order, -self.coeffs)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, c):
        return TruncatedSeries(self.nvars, self.order, self.coeffs * c)

    def __mul__(self, other):
        if not isinstance(other, TruncatedSeries):
            return self.scale(other)
        self._check(other)
        idx = self.index
        out = np.zeros(idx.size, dtype=np.complex128)
        for k in range(idx.order + 1):
            _mul_block(self.coeffs, other.coeffs, out, k, idx.offsets, idx.key, idx.lut)
        return TruncatedSeries(self.nvars, self.order, out)

    def __rmul__(self, other):
        return self.scale(other)

    def __truediv__(self, c):
        return self.scale(1.0 / c)

    def pow_real(self, alpha):
        """``self ** alpha`` for real ``alpha``, principal branch at the constant term."""
        f0 = self.coeffs[0]
        if abs(f0) <= 1e-12:
            raise ZeroDivisionError("power of a series with vanishing constant term")
        idx = self.index
        g = np.zeros(idx.size, dtype=np.complex128)
        g[0] = f0 ** alpha
        for k in range(1, idx.order + 1):
            pow_block(self.coeffs, g, k, alpha, idx)
        return TruncatedSeries(self.nvars, self.order, g)

    def __pow__(self, alpha):
        return self.pow_real(alpha)

    def partial(self, i):
        """Derivative with respect to ``s_i`` (``i`` is 0-based)."""
        if not 0 <= i < self.nvars:
            raise IndexError(f"variable index {i} out of range")
        return TruncatedSeries(self.nvars, self.order,
                               partial_coeffs(self.coeffs, i, self.index))

    def homog_part(self, k):
        """The degree-``k`` homogeneous part, as a series of the same shape."""
        if not 0 <= k <= self.order:
            raise IndexError(f"degree {k} outside [0, {self.order}]")
        out = TruncatedSeries(self.nvars, self.order)
        lo, hi = self.index.offsets[k], self.index.offsets[k + 1]
        out.coeffs[lo:hi] = self.coeffs[lo:hi]
        return out

    def block(self, k):
        lo, hi = self.index.offsets[k], self.index.offsets[k + 1]
        return self.coeffs[lo:hi]

    def truncated(self, order):
        """Copy re-truncated at a lower (or equal) order."""
        if order > self.order:
            raise ValueError("cannot raise the truncation order")
        return TruncatedSeries(self.nvars, order,
                               self.coeffs[: monomial_index(self.nvars, order).size].copy())

    def __call__(self, point, max_degree=None, skip_last=False):
        return self.eval(point, max_degree, skip_last)

    def eval(self, point, max_degree=None, skip_last=False):
        """Value at ``point``.

        ``skip_last`` drops every monomial containing the last variable; the
        result is then exact whenever that coordinate of ``point`` is zero.
        """
        point = np.asarray(point)
        if point.shape != (self.nvars,):
            raise ShapeMismatchError(f"point must have {self.nvars} entries")
        return eval_many(self.coeffs[None, :], self.index, point, max_degree, skip_last)[0]

    def __repr__(self):
        nnz = int(np.count_nonzero(self.coeffs))
        return f"TruncatedSeries(nvars={self.nvars}, order={self.order}, nonzero={nnz})"

    # io
    def save(self, path):
        write_series(self, path)

    @classmethod
    def load(cls, path):
        return read_series(path)


def write_series(series, path):
    """Write the nonzero coefficients as ``m1 .. mn re im`` lines."""
    idx = series.index
    nz = np.flatnonzero(series.coeffs)
    with open(path, "w") as fh:
        fh.write(f"{idx.nvars} {idx.order} {nz.size}\n")
        for i in nz:
            c = series.coeffs[i]
            exps = " ".join(str(int(e)) for e in idx.exps[i])
            fh.write(f"{exps} {c.real:.17g} {c.imag:.17g}\n")


def read_series(path):
    """Read a coefficient file; lines may come in any order."""
    with open(path) as fh:
        header = fh.readline().split()
        nvars, order, count = (int(v) for v in header)
        data = np.loadtxt(fh, ndmin=2) if count else np.zeros((0, nvars + 2))
    if data.shape[0] != count:
        raise ValueError(f"{path}: header announces {count} terms, found {data.shape[0]}")
    out = TruncatedSeries(nvars, order)
    idx = out.index
    if count:
        exps = data[:, :nvars].astype(np.int64)
        if (exps.sum(axis=1) > order).any():
            raise ValueError(f"{path}: monomial above truncation order")
        deg = exps.sum(axis=1)
        key = exps[:, :-1] @ idx.weights if nvars > 1 else np.zeros(count, dtype=np.int64)
        pos = idx.offsets[deg] + idx.lut[key]
        out.coeffs[pos] = data[:, nvars] + 1j * data[:, nvars + 1]
    return out


def coefficient_count(nvars, k):
    """Number of monomials of exact degree ``k`` in ``nvars`` variables."""
    return comb(k + nvars - 1, nvars - 1)
