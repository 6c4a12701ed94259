"""Sparse and dense linear algebra kernels.

CSR storage in canonical form (sorted column indices, no duplicates),
Galerkin triple products, preconditioned conjugate gradients, dense
factorizations for coarse-grid and subdomain solves, and a Lanczos
largest-eigenvalue estimator.  scipy supplies the compiled kernels; the
thin wrappers here pin down the storage contract and the error behaviour
the rest of the package relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp

Operator = Union["CsrMatrix", np.ndarray, Callable[[np.ndarray], np.ndarray]]


class IndefiniteOperatorError(RuntimeError):
    """CG encountered a direction of non-positive curvature."""

    def __init__(self, iteration: int, curvature: float):
        super().__init__(
            f"non-positive curvature p'Ap = {curvature:.6e} at CG iteration {iteration}; "
            "operator is not positive definite"
        )
        self.iteration = iteration
        self.curvature = curvature


class NotPositiveDefiniteError(RuntimeError):
    """Cholesky factorization failed on a matrix expected to be SPD."""


class EigenEstimateError(RuntimeError):
    """Eigenvalue estimate failed to settle within the iteration cap."""

    def __init__(self, message: str, best_estimate: float):
        super().__init__(message)
        self.best_estimate = best_estimate


@dataclass(frozen=True)
class CsrMatrix:
    """Compressed sparse row matrix in canonical form.

    Column indices are strictly increasing within each row and duplicates
    have been summed.  Instances are immutable; all operations return new
    matrices.
    """

    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        offs = np.asarray(self.row_offsets, dtype=np.int64)
        cols = np.asarray(self.col_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if offs.shape != (self.nrows + 1,):
            raise ValueError("row_offsets must have length nrows + 1")
        if offs[0] != 0 or offs[-1] != len(cols) or np.any(np.diff(offs) < 0):
            raise ValueError("row_offsets must be monotone from 0 to nnz")
        if len(cols) != len(vals):
            raise ValueError("col_indices and values length mismatch")
        if len(cols) and (cols.min() < 0 or cols.max() >= self.ncols):
            raise ValueError("column index out of range")
        # strictly increasing column indices within each row
        if len(cols) > 1:
            interior = np.ones(len(cols) - 1, dtype=bool)
            interior[offs[1:-1] - 1] = False
            if np.any(cols[1:][interior] <= cols[:-1][interior]):
                raise ValueError("column indices must be strictly increasing within rows")
        for arr in (offs, cols, vals):
            arr.setflags(write=False)
        object.__setattr__(self, "row_offsets", offs)
        object.__setattr__(self, "col_indices", cols)
        object.__setattr__(self, "values", vals)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def shape(self) -> tuple:
        return (self.nrows, self.ncols)

    @classmethod
    def from_scipy(cls, m) -> "CsrMatrix":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr.astype(np.int64),
                   m.indices.astype(np.int64), m.data.astype(np.float64))

    @classmethod
    def from_coo(cls, nrows: int, ncols: int, rows, cols, vals) -> "CsrMatrix":
        m = sp.coo_matrix((vals, (rows, cols)), shape=(nrows, ncols))
        return cls.from_scipy(m)

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "CsrMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(a, dtype=np.float64)))

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls.from_scipy(sp.identity(n, format="csr"))

    def to_scipy(self) -> sp.csr_matrix:
        # shares the underlying arrays; callers must not mutate
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets),
                             shape=(self.nrows, self.ncols), copy=False)

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def principal_submatrix(self, indices: np.ndarray) -> "CsrMatrix":
        idx = np.asarray(indices, dtype=np.int64)
        s = self.to_scipy()
        return CsrMatrix.from_scipy(s[idx][:, idx])

    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        return spmv(self, x)


def spmv(a: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """Sparse matrix-vector product a @ x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (a.ncols,):
        raise ValueError(f"dimension mismatch: matrix is {a.nrows}x{a.ncols}, vector has length {x.shape}")
    return a.to_scipy() @ x


def transpose(a: CsrMatrix) -> CsrMatrix:
    return CsrMatrix.from_scipy(a.to_scipy().T.tocsr())


def triple_product(p: CsrMatrix, a: CsrMatrix) -> CsrMatrix:
    """Galerkin product p.T @ a @ p in canonical CSR form."""
    if a.ncols != p.nrows or a.nrows != p.nrows:
        raise ValueError(
            f"dimension mismatch: a is {a.nrows}x{a.ncols}, p is {p.nrows}x{p.ncols}"
        )
    ps = p.to_scipy()
    return CsrMatrix.from_scipy((ps.T @ (a.to_scipy() @ ps)).tocsr())


def _as_matvec(op: Operator) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(op, CsrMatrix):
        s = op.to_scipy()
        return lambda x: s @ x
    if isinstance(op, np.ndarray):
        return lambda x: op @ x
    if callable(op):
        return op
    raise TypeError(f"unsupported operator type {type(op)!r}")


def cg(a: Operator, b: np.ndarray, precond: Optional[Operator] = None,
       rtol: float = 1e-10, maxit: int = 1000,
       x0: Optional[np.ndarray] = None) -> tuple:
    """Preconditioned conjugate gradients for SPD systems.

    Returns ``(x, history)`` where ``history[k]`` is the relative residual
    ``||b - A x_k|| / ||b||`` (relative to the initial residual when b = 0),
    including the initial entry.  Raises :class:`IndefiniteOperatorError` if
    a direction of non-positive curvature appears.
    """
    matvec = _as_matvec(a)
    apply_m = _as_matvec(precond) if precond is not None else (lambda v: v)
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)

    r = b - matvec(x)
    norm_b = np.linalg.norm(b)
    denom = norm_b if norm_b > 0 else np.linalg.norm(r)
    if denom == 0.0:
        return x, [0.0]

    history = [float(np.linalg.norm(r) / denom)]
    if history[-1] <= rtol:
        return x, history

    z = apply_m(r)
    d = z.copy()
    rz = float(r @ z)
    for k in range(maxit):
        q = matvec(d)
        curvature = float(d @ q)
        if curvature <= 0.0:
            raise IndefiniteOperatorError(k, curvature)
        alpha = rz / curvature
        x += alpha * d
        r -= alpha * q
        history.append(float(np.linalg.norm(r) / denom))
        if history[-1] <= rtol:
            break
        z = apply_m(r)
        rz_new = float(r @ z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x, history


@dataclass(frozen=True)
class DenseFactor:
    """Factorization of a small dense symmetric matrix.

    Cholesky when the matrix is SPD, pivoted LU as the fallback.
    """

    kind: str  # "cholesky" | "lu"
    factor: tuple
    n_local: int

    def solve(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        if r.shape[0] != self.n_local:
            raise ValueError(f"dimension mismatch: factor is {self.n_local}, rhs has {r.shape[0]}")
        if self.kind == "cholesky":
            return scipy.linalg.cho_solve(self.factor, r)
        return scipy.linalg.lu_solve(self.factor, r)


def dense_factor(a: np.ndarray, lu_fallback: bool = True) -> DenseFactor:
    """Factor a small dense symmetric matrix for repeated solves.

    Attempts Cholesky first.  When the matrix is not SPD, falls back to
    pivoted LU if ``lu_fallback`` is set, otherwise raises
    :class:`NotPositiveDefiniteError`.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("dense_factor expects a square matrix")
    scale = np.abs(a).max() if a.size else 0.0
    if scale and np.abs(a - a.T).max() > 1e-10 * scale:
        raise ValueError("dense_factor expects a symmetric matrix")
    try:
        c = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
        return DenseFactor("cholesky", c, a.shape[0])
    except scipy.linalg.LinAlgError as err:
        if not lu_fallback:
            raise NotPositiveDefiniteError(f"Cholesky failed: {err}") from err
        lu = scipy.linalg.lu_factor(a, check_finite=False)
        return DenseFactor("lu", lu, a.shape[0])


def estimate_lambda_max(op: Operator, n: int, tol: float = 1e-8,
                        maxit: Optional[int] = None) -> float:
    """Largest-eigenvalue estimate of a symmetric PSD operator.

    Lanczos iteration with full reorthogonalization; stops when the
    relative change between successive Ritz estimates drops below ``tol``.
    The starting vector is fixed, so repeated calls are deterministic.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    matvec = _as_matvec(op)
    if n <= 3:
        # dense path: Lanczos degenerates for tiny systems
        cols = np.eye(n)
        dense = np.column_stack([matvec(cols[:, j]) for j in range(n)])
        return float(np.linalg.eigvalsh(0.5 * (dense + dense.T)).max())

    if maxit is None:
        maxit = min(n, 300)
    rng = np.random.default_rng(7)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)

    basis = np.zeros((n, maxit))
    alphas = np.zeros(maxit)
    betas = np.zeros(maxit)
    estimate = 0.0
    for k in range(maxit):
        basis[:, k] = q
        w = matvec(q)
        alphas[k] = float(q @ w)
        w -= alphas[k] * q
        if k > 0:
            w -= betas[k - 1] * basis[:, k - 1]
        # full reorthogonalization keeps the Ritz values below lambda_max
        w -= basis[:, :k + 1] @ (basis[:, :k + 1].T @ w)

        previous = estimate
        estimate = float(scipy.linalg.eigh_tridiagonal(
            alphas[:k + 1], betas[:k], select="i", select_range=(k, k),
            eigvals_only=True)[0])
        if k > 0 and abs(estimate - previous) <= tol * max(abs(estimate), 1e-300):
            return estimate

        beta = np.linalg.norm(w)
        if beta <= 1e-14 * max(abs(estimate), 1.0) or k == n - 1:
            return estimate  # exhausted an invariant subspace
        betas[k] = beta
        q = w / beta

    raise EigenEstimateError(
        f"largest-eigenvalue estimate did not settle to tol={tol:g} "
        f"within {maxit} iterations", estimate)
