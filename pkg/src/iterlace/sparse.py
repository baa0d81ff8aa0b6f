"""Symmetric sparse matrices and sparse Cholesky factors.

This is the numerical backbone for everything that touches a precision
matrix: building it from triplets, factorising it, solving against the
factor, and pulling out the diagonal of the inverse.  Matrices are small
enough here (hundreds of rows) that clarity wins over asymptotics, but
storage stays sparse throughout.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "FactorizationError",
    "SparseSym",
    "sparse_from_triplets",
    "CholFactor",
    "chol",
]

#: relative tolerance used to decide whether construction input is symmetric
_SYM_TOL = 1e-12


class FactorizationError(ValueError):
    """Raised when a matrix cannot be Cholesky-factorised.

    ``pivot`` is the 0-based index of the first non-positive pivot when
    that is known, else ``None``.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class SparseSym:
    """A symmetric sparse matrix of order ``n``.

    Canonical storage is a CSC matrix with summed duplicates and no
    explicit zeros.  Construction validates symmetry to ``1e-12``
    (relative to the largest entry) and then symmetrises exactly, so
    downstream code never sees round-off asymmetry.
    """

    __slots__ = ("n", "csc")

    def __init__(self, matrix):
        m = sp.csc_matrix(matrix)
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"matrix must be square, got shape {m.shape}")
        if m.shape[0] < 1:
            raise ValueError("matrix must have order >= 1")
        m.sum_duplicates()
        m.eliminate_zeros()
        gap = abs(m - m.T)
        if gap.nnz:
            worst = gap.max()
            scale = max(1.0, abs(m).max())
            if worst > _SYM_TOL * scale:
                raise ValueError(
                    f"matrix is not symmetric: max |A - A^T| = {worst:g}"
                )
        self.n = m.shape[0]
        self.csc = (m + m.T) * 0.5
        self.csc.sum_duplicates()

    @classmethod
    def from_dense(cls, arr):
        return cls(sp.csc_matrix(np.asarray(arr, dtype=float)))

    def to_dense(self):
        return self.csc.toarray()

    def diagonal(self):
        return self.csc.diagonal()

    def triplets(self):
        """Return (rows, cols, vals) in canonical (col-major, sorted) order."""
        coo = self.csc.tocoo()
        order = np.lexsort((coo.row, coo.col))
        return coo.row[order], coo.col[order], coo.data[order]

    def __matmul__(self, other):
        return self.csc @ other

    def __add__(self, other):
        if isinstance(other, SparseSym):
            other = other.csc
        return SparseSym(self.csc + other)

    def __sub__(self, other):
        if isinstance(other, SparseSym):
            other = other.csc
        return SparseSym(self.csc - other)

    def __mul__(self, scalar):
        return SparseSym(self.csc * float(scalar))

    __rmul__ = __mul__

    def __repr__(self):
        return f"SparseSym(n={self.n}, nnz={self.csc.nnz})"


def sparse_from_triplets(n, rows, cols, vals):
    """Assemble a SparseSym from COO triplets.

    Duplicate (row, col) entries are summed.  The assembled matrix must
    be symmetric; triplets may describe either the full matrix or any
    redundant scattering of it, as long as the sum comes out symmetric.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    if not (rows.shape == cols.shape == vals.shape):
        raise ValueError("rows, cols, vals must have identical length")
    if rows.size and (rows.min() < 0 or cols.min() < 0):
        raise ValueError("negative triplet index")
    if rows.size and (rows.max() >= n or cols.max() >= n):
        raise ValueError(
            f"triplet index out of range for n={n}: "
            f"max row {rows.max()}, max col {cols.max()}"
        )
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    return SparseSym(m.tocsc())


class CholFactor:
    """Lower-triangular Cholesky factor of a SparseSym.

    With the natural (identity) ordering used here, ``L @ L.T``
    reproduces the input matrix.  ``log_det`` is the log-determinant of
    the factored matrix.
    """

    __slots__ = ("n", "L", "perm", "log_det", "_splu")

    def __init__(self, n, L, perm, log_det, splu_obj=None):
        self.n = n
        self.L = L
        self.perm = perm
        self.log_det = log_det
        self._splu = splu_obj

    def solve(self, rhs):
        """Solve A x = rhs for one vector or a matrix of columns."""
        rhs = np.asarray(rhs, dtype=float)
        vec = rhs.ndim == 1
        b = rhs.reshape(-1, 1) if vec else rhs
        if b.shape[0] != self.n:
            raise ValueError(f"rhs has {b.shape[0]} rows, expected {self.n}")
        if self._splu is not None:
            x = self._splu.solve(np.ascontiguousarray(b))
        else:
            y = spla.spsolve_triangular(self.L, b, lower=True)
            x = spla.spsolve_triangular(self.L.T.tocsr(), y, lower=False)
        return x[:, 0] if vec else x

    def solve_lt(self, rhs):
        """Solve L^T x = rhs.

        If z is standard normal, the solution has covariance A^{-1},
        which is exactly what posterior sampling needs.
        """
        rhs = np.asarray(rhs, dtype=float)
        vec = rhs.ndim == 1
        b = rhs.reshape(-1, 1) if vec else rhs
        if b.shape[0] != self.n:
            raise ValueError(f"rhs has {b.shape[0]} rows, expected {self.n}")
        x = spla.spsolve_triangular(self.L.T.tocsr(), b, lower=False)
        return x[:, 0] if vec else x

    def diag_inverse(self):
        """Diagonal of A^{-1}, via n solves against unit vectors."""
        inv = self.solve(np.eye(self.n))
        return inv.diagonal().copy()


def chol(a):
    """Cholesky-factorise a SparseSym, or raise FactorizationError.

    Uses an LU factorisation restricted to diagonal pivots in natural
    order, so for a symmetric positive-definite input U = D L^T and the
    Cholesky factor is L sqrt(D).  A non-positive pivot means the input
    is not positive definite and is reported by index.
    """
    if not isinstance(a, SparseSym):
        raise TypeError("chol expects a SparseSym")
    try:
        lu = spla.splu(
            a.csc,
            permc_spec="NATURAL",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as err:  # SuperLU: "Factor is exactly singular"
        raise FactorizationError(f"factorisation failed: {err}") from err
    n = a.n
    identity = np.arange(n)
    if not (np.array_equal(lu.perm_r, identity) and np.array_equal(lu.perm_c, identity)):
        # cannot happen with NATURAL ordering + diagonal pivoting on a
        # symmetric PD matrix; guard so a silent permutation never leaks
        raise FactorizationError("factorisation produced an unexpected permutation")
    d = lu.U.diagonal()
    bad = np.where(~(d > 0.0))[0]
    if bad.size:
        raise FactorizationError(
            f"matrix is not positive definite: pivot {bad[0]} is {d[bad[0]]:g}",
            pivot=int(bad[0]),
        )
    L = (lu.L @ sp.diags(np.sqrt(d))).tocsr()
    log_det = float(np.sum(np.log(d)))
    return CholFactor(n, L, identity, log_det, splu_obj=lu)
