"""Append-only factor storage and rank-one inverse updates.

Everything here is float64 and grows by appending: the shared-kernel Gram
is kept as a unit-lower-triangular factor L and a positive diagonal D
(Gram = L D L^T), inverses are kept explicitly and patched in place with
Sherman-Morrison / Schur-border updates instead of being refactorized.
Buffers over-allocate by powers of two so an append never copies more
than O(n) amortized.
"""

import numpy as np
from scipy.linalg import blas as _blas

from .errors import DegenerateGram, SingularUpdate

# numeric policy: pivot rejection is relative to the self-kernel value,
# update denominators are guarded by an absolute floor
BETA_MIN_REL = 1e-10
EPS_SING = 1e-12
EPS_SOLVE = 1e-10

_F64 = np.float64


def _as_vec(x, size=None):
    v = np.ascontiguousarray(x, dtype=_F64)
    if v.ndim != 1:
        raise ValueError("expected a 1-d vector, got shape %r" % (v.shape,))
    if size is not None and v.shape[0] != size:
        raise ValueError("expected length %d, got %d" % (size, v.shape[0]))
    return v


def _grown(buf, need):
    cap = buf.shape[0]
    if need <= cap:
        return buf
    while cap < need:
        cap = max(2 * cap, 8)
    out = np.zeros((cap,) + buf.shape[1:], dtype=_F64)
    out[: buf.shape[0]] = buf
    return out


class GrowVec:
    """Append-only float64 vector with amortized O(1) append."""

    __slots__ = ("_buf", "n")

    def __init__(self, values=()):
        self._buf = np.zeros(8, dtype=_F64)
        self.n = 0
        for v in np.asarray(values, dtype=_F64).ravel():
            self.append(v)

    @property
    def values(self):
        return self._buf[: self.n]

    def append(self, value):
        self._buf = _grown(self._buf, self.n + 1)
        self._buf[self.n] = value
        self.n += 1

    def copy(self):
        out = GrowVec()
        out._buf = self._buf[: self.n].copy()
        out.n = self.n
        return out


class DiagonalFactor:
    """Strictly positive diagonal D of the LDL^T factorization."""

    __slots__ = ("_vec",)

    def __init__(self, values=()):
        self._vec = GrowVec(values)

    @property
    def n(self):
        return self._vec.n

    @property
    def values(self):
        return self._vec.values

    def append(self, beta):
        self._vec.append(beta)

    def copy(self):
        out = DiagonalFactor()
        out._vec = self._vec.copy()
        return out


class UnitLowerFactor:
    """Row-appendable unit lower triangular matrix.

    Only the strictly-lower entries are stored; the unit diagonal is
    implicit.  Row i carries exactly i stored entries.
    """

    __slots__ = ("_buf", "n")

    def __init__(self):
        self._buf = np.zeros((8, 8), dtype=_F64)
        self.n = 0

    def append_row(self, r):
        r = _as_vec(r, self.n)
        n = self.n
        if n + 1 > self._buf.shape[0]:
            cap = max(2 * self._buf.shape[0], 8)
            out = np.zeros((cap, cap), dtype=_F64)
            out[:n, :n] = self._buf[:n, :n]
            self._buf = out
        self._buf[n, :n] = r
        self.n = n + 1

    def row_strict(self, i):
        # stored (strictly lower) part of row i, length i
        return self._buf[i, :i]

    def solve_unit_lower(self, b):
        # L t = b by forward substitution, unit diagonal
        n = self.n
        t = _as_vec(b, n).copy()
        for i in range(1, n):
            t[i] -= np.dot(self._buf[i, :i], t[:i])
        return t

    def solve_unit_upper_t(self, t):
        # L^T x = t by back substitution on the stored columns
        n = self.n
        x = _as_vec(t, n).copy()
        for i in range(n - 2, -1, -1):
            x[i] -= np.dot(self._buf[i + 1 : n, i], x[i + 1 : n])
        return x

    def matvec(self, x):
        n = self.n
        x = _as_vec(x, n)
        y = x.copy()
        for i in range(1, n):
            y[i] += np.dot(self._buf[i, :i], x[:i])
        return y

    def t_matvec(self, x):
        n = self.n
        x = _as_vec(x, n)
        y = x.copy()
        for i in range(n - 1):
            y[i] += np.dot(self._buf[i + 1 : n, i], x[i + 1 : n])
        return y

    def rows_t_matvec(self, idx, u):
        # v = L(idx, :)^T u, accumulated row by row; v has full length n
        n = self.n
        v = np.zeros(n, dtype=_F64)
        for pos, i in enumerate(idx):
            ui = u[pos]
            v[:i] += ui * self._buf[i, :i]
            v[i] += ui
        return v

    def rows_matvec(self, idx, x):
        # L(idx, :) x for a full-length x
        x = _as_vec(x, self.n)
        out = np.empty(len(idx), dtype=_F64)
        for pos, i in enumerate(idx):
            out[pos] = x[i] + np.dot(self._buf[i, :i], x[:i])
        return out

    def dense(self):
        n = self.n
        out = np.tril(self._buf[:n, :n].copy(), -1)
        np.fill_diagonal(out, 1.0)
        return out

    def copy(self):
        out = UnitLowerFactor()
        out._buf = self._buf[: self.n, : self.n].copy()
        out.n = self.n
        return out


class SymMatrix:
    """Symmetric matrix in packed lower-triangle storage.

    Row-major packed rows coincide with BLAS upper-packed column-major
    order, so dspmv/dspr run directly on the buffer.  Symmetry is
    structural: there is no second copy of any off-diagonal entry.
    """

    __slots__ = ("_buf", "n")

    def __init__(self):
        self._buf = np.zeros(8, dtype=_F64)
        self.n = 0

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=_F64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("need a square matrix, got %r" % (a.shape,))
        if a.size and not np.allclose(a, a.T, rtol=0.0, atol=0.0):
            if not np.array_equal(a, a.T):
                raise ValueError("matrix is not symmetric")
        out = cls()
        n = a.shape[0]
        out._buf = np.concatenate([a[i, : i + 1] for i in range(n)]) if n else np.zeros(0)
        out._buf = np.ascontiguousarray(out._buf, dtype=_F64)
        out.n = n
        return out

    @classmethod
    def from_packed(cls, packed, n):
        packed = _as_vec(packed, n * (n + 1) // 2)
        out = cls()
        out._buf = packed.copy()
        out.n = n
        return out

    @property
    def packed(self):
        return self._buf[: self.n * (self.n + 1) // 2]

    def entry(self, i, j):
        if j > i:
            i, j = j, i
        return float(self._buf[i * (i + 1) // 2 + j])

    def column(self, p):
        n = self.n
        out = np.empty(n, dtype=_F64)
        base = p * (p + 1) // 2
        out[: p + 1] = self._buf[base : base + p + 1]
        if p + 1 < n:
            rows = np.arange(p + 1, n)
            out[p + 1 :] = self._buf[rows * (rows + 1) // 2 + p]
        return out

    def matvec(self, x):
        n = self.n
        if n == 0:
            return np.zeros(0, dtype=_F64)
        x = _as_vec(x, n)
        return _blas.dspmv(n, 1.0, self.packed, x, lower=0)

    def add_scaled_outer(self, alpha, u):
        # self += alpha * u u^T, in place on the packed buffer
        n = self.n
        if n == 0:
            return
        u = _as_vec(u, n)
        view = self.packed
        out = _blas.dspr(n, alpha, u, view, lower=0, overwrite_ap=1)
        if not np.shares_memory(out, self._buf):  # pragma: no cover - BLAS copied
            view[:] = out

    def append_border_row(self, row):
        # grow to order n+1 with a new last row/column
        n = self.n
        row = _as_vec(row, n + 1)
        size = n * (n + 1) // 2
        self._buf = _grown(self._buf, size + n + 1)
        self._buf[size : size + n + 1] = row
        self.n = n + 1

    def to_dense(self):
        n = self.n
        out = np.zeros((n, n), dtype=_F64)
        k = 0
        for i in range(n):
            out[i, : i + 1] = self._buf[k : k + i + 1]
            k += i + 1
        return out + np.tril(out, -1).T

    def copy(self):
        out = SymMatrix()
        out._buf = self.packed.copy()
        out.n = self.n
        return out

    def __eq__(self, other):
        if not isinstance(other, SymMatrix):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.packed, other.packed)

    def __hash__(self):  # pragma: no cover
        return object.__hash__(self)


# ===== triangular solves =================================================


def tri_solve_ldl(L, D, b):
    """Solve L diag(D) x = b with unit-lower L."""
    d = D.values
    if np.any(d <= 0.0):
        raise DegenerateGram("diagonal factor has non-positive entries")
    t = L.solve_unit_lower(b)
    return t / d if L.n else t


def tri_solve_dlt(L, D, b):
    """Solve diag(D) L^T x = b with unit-lower L."""
    d = D.values
    if np.any(d <= 0.0):
        raise DegenerateGram("diagonal factor has non-positive entries")
    t = _as_vec(b, L.n) / d if L.n else _as_vec(b, 0)
    return L.solve_unit_upper_t(t)


# ===== factor growth =====================================================


def ldl_append(L, D, k_head, k_self):
    """Next LDL^T row for a Gram matrix bordered by one input.

    k_head holds the kernel values against the already-stored inputs,
    k_self the new self-kernel value.  Returns (r, beta) where the new
    row of L is (r, 1) and the new diagonal entry is beta.  The caller
    appends; on rejection nothing is touched anywhere.
    """
    k_head = _as_vec(k_head, L.n)
    r = tri_solve_ldl(L, D, k_head)
    beta = float(k_self) - float(np.dot(r, D.values * r))
    if beta <= BETA_MIN_REL * max(1.0, float(k_self)):
        raise DegenerateGram(
            "pivot %.3e below threshold; input is numerically dependent" % beta
        )
    return r, beta


class FactorSet:
    """L, D and the bias map M grown one input at a time.

    Invariants: Gram = L D L^T for the shared kernel over the appended
    inputs, and L D M equals the bias matrix of those inputs.  Server and
    clients run the exact same append path here, so factors rebuilt from
    the same input sequence match the server's bit for bit.
    """

    __slots__ = ("L", "D", "_m", "bias_dim")

    def __init__(self, bias_dim):
        self.L = UnitLowerFactor()
        self.D = DiagonalFactor()
        self.bias_dim = int(bias_dim)
        self._m = np.zeros((8, self.bias_dim), dtype=_F64)

    @property
    def n(self):
        return self.L.n

    @property
    def M(self):
        return self._m[: self.n]

    def bias_row(self, r, beta, psi_row):
        psi_row = _as_vec(psi_row, self.bias_dim)
        if self.n == 0:
            return psi_row / beta
        return (psi_row - np.dot(r * self.D.values, self.M)) / beta

    def append(self, k_head, k_self, psi_row):
        r, beta = ldl_append(self.L, self.D, k_head, k_self)
        mrow = self.bias_row(r, beta, psi_row)
        self.append_precomputed(r, beta, mrow)
        return r, beta

    def append_precomputed(self, r, beta, mrow):
        n = self.n
        self._m = _grown(self._m, n + 1)
        self._m[n] = mrow
        self.L.append_row(r)
        self.D.append(beta)

    def copy(self):
        out = FactorSet(self.bias_dim)
        out.L = self.L.copy()
        out.D = self.D.copy()
        out._m = self.M.copy()
        return out


# ===== rank-one inverse updates ==========================================


def smw_rank_one_inverse_update(H, v, sigma):
    """Inverse of (H^-1 + sigma v v^T) given H, via Sherman-Morrison.

    Returns a new SymMatrix; H itself is untouched.
    """
    v = _as_vec(v, H.n)
    z = H.matvec(v)
    denom = 1.0 / sigma + float(np.dot(v, z))
    if abs(denom) < EPS_SING:
        raise SingularUpdate("rank-one denominator %.3e too small" % denom)
    out = H.copy()
    out.add_scaled_outer(-1.0 / denom, z)
    return out


def schur_enlarge_inverse(R, ktilde, lambda_w):
    """Grow the inverse R of a SPD block by one row/column.

    ktilde carries the (already scaled) kernel values of the new point
    against the block's points, last entry the self value; lambda_w is
    the regularized weight added on the new diagonal.  Returns
    (u, gamma, R_new) with R_new = blockdiag(R, 0) + gamma u u^T.
    """
    ell = R.n + 1
    ktilde = _as_vec(ktilde, ell)
    u = np.empty(ell, dtype=_F64)
    u[:-1] = R.matvec(ktilde[:-1])
    u[-1] = -1.0
    denom = float(lambda_w) - float(np.dot(u, ktilde))
    if denom <= EPS_SING:
        raise SingularUpdate(
            "enlarged block not positive definite (denominator %.3e)" % denom
        )
    gamma = 1.0 / denom
    out = R.copy()
    out.append_border_row(np.zeros(ell, dtype=_F64))
    out.add_scaled_outer(gamma, u)
    return u, gamma, out
