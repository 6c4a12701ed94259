"""Multigrid smoothers: global sweeps, local subdomain correction, and the
combined sandwich smoother.

The global smoothers are symmetric Gauss-Seidel and a Jacobi-preconditioned
Chebyshev iteration.  The local correction solves the residual equation
exactly on the dofs of each low-quality region and adds the errors back.
The combined smoother applies local correction, then the global smoother,
then local correction again; with a symmetric global smoother the combined
operator is symmetric, so it remains admissible inside a CG preconditioner.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import DofMap
from .mesh import RegionSet, SimplexMesh
from .sparse import (CsrMatrix, DenseFactor, NotPositiveDefiniteError,
                     dense_factor, estimate_lambda_max)


class ZeroDiagonalError(ValueError):
    def __init__(self, row: int):
        super().__init__(f"zero diagonal entry in row {row}")
        self.row = row


@dataclass
class SmootherConfig:
    """Global smoother selection.

    ``sweeps`` is the number of Gauss-Seidel sweeps or the Chebyshev degree.
    For Chebyshev, the iteration runs on the Jacobi-preconditioned operator
    over [lambda_min_fraction * lambda_max, lambda_max]; with ``adjusted``
    set, hierarchies use the largest eigenvalue of the block excluding
    low-quality-region dofs as the upper bound.  A fraction of one collapses
    the interval (single-point spectrum).
    """

    kind: str = "sgs"
    sweeps: int = 1
    lambda_max: Optional[float] = None
    lambda_min_fraction: float = 0.1
    adjusted: bool = False

    def __post_init__(self):
        if self.kind not in ("sgs", "chebyshev"):
            raise ValueError(f"unknown smoother kind {self.kind!r}")
        if self.sweeps < 1:
            raise ValueError(f"sweeps must be at least 1, got {self.sweeps}")
        if not 0.0 < self.lambda_min_fraction <= 1.0:
            raise ValueError(f"lambda_min_fraction must lie in (0, 1], got {self.lambda_min_fraction}")
        if self.lambda_max is not None and self.lambda_max <= 0.0:
            raise ValueError(f"lambda_max must be positive, got {self.lambda_max}")


class SgsSplitting:
    """Cached triangular splittings of one matrix for Gauss-Seidel sweeps."""

    def __init__(self, a: CsrMatrix):
        s = a.to_scipy()
        diag = s.diagonal()
        zero = np.nonzero(diag == 0.0)[0]
        if len(zero):
            raise ZeroDiagonalError(int(zero[0]))
        self._lower = spla.splu(sp.tril(s).tocsc(), permc_spec="NATURAL",
                                diag_pivot_thresh=0.0)
        self._upper = spla.splu(sp.triu(s).tocsc(), permc_spec="NATURAL",
                                diag_pivot_thresh=0.0)
        self._strict_lower = sp.tril(s, -1).tocsr()
        self._strict_upper = sp.triu(s, 1).tocsr()

    def forward(self, b: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self._lower.solve(b - self._strict_upper @ u)

    def backward(self, b: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self._upper.solve(b - self._strict_lower @ u)


def sgs_sweep(a: CsrMatrix, b: np.ndarray, u: np.ndarray, sweeps: int = 1,
              splitting: Optional[SgsSplitting] = None) -> np.ndarray:
    """Symmetric Gauss-Seidel: forward in ascending dof order, then backward.

    Updates ``u`` in place and returns it.  Pass a precomputed
    :class:`SgsSplitting` to amortise the triangular factor setup.
    """
    split = splitting if splitting is not None else SgsSplitting(a)
    for _ in range(sweeps):
        u[:] = split.forward(b, u)
        u[:] = split.backward(b, u)
    return u


def chebyshev_smooth(a: CsrMatrix, b: np.ndarray, u: np.ndarray, sweeps: int,
                     cfg: SmootherConfig) -> np.ndarray:
    """Degree-``sweeps`` Chebyshev iteration on the Jacobi-preconditioned system.

    Runs the classical three-term recurrence targeting the interval
    [lambda_min, lambda_max] of D^{-1} A.  The exact solution is a fixed
    point.  Updates ``u`` in place and returns it.
    """
    if cfg.lambda_max is None or cfg.lambda_max <= 0.0:
        raise ValueError("chebyshev_smooth requires a positive cfg.lambda_max")
    lam_max = cfg.lambda_max
    lam_min = cfg.lambda_min_fraction * lam_max
    diag = a.diagonal()
    zero = np.nonzero(diag == 0.0)[0]
    if len(zero):
        raise ZeroDiagonalError(int(zero[0]))
    inv_diag = 1.0 / diag
    s = a.to_scipy()

    theta = 0.5 * (lam_max + lam_min)
    delta = 0.5 * (lam_max - lam_min)
    if delta == 0.0:
        # collapsed interval: one exactly-scaled Richardson step per sweep
        for _ in range(sweeps):
            u += inv_diag * (b - s @ u) / theta
        return u

    sigma = theta / delta
    rho = 1.0 / sigma
    d = inv_diag * (b - s @ u) / theta
    u += d
    for _ in range(sweeps - 1):
        rho_next = 1.0 / (2.0 * sigma - rho)
        z = inv_diag * (b - s @ u)
        d = rho_next * rho * d + (2.0 * rho_next / delta) * z
        u += d
        rho = rho_next
    return u


@dataclass(frozen=True)
class LocalCorrection:
    """Factorized restriction of an operator to disjoint dof subsets.

    Each region holds the sorted dof indices (the inclusion map) and a
    dense factorization of the corresponding principal submatrix.
    """

    regions: Tuple[Tuple[np.ndarray, DenseFactor], ...]
    n_global: int

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def covered_dofs(self) -> np.ndarray:
        if not self.regions:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([idx for idx, _ in self.regions])


def dofs_for_regions(dofmap: DofMap, mesh: SimplexMesh,
                     regions: RegionSet) -> List[np.ndarray]:
    """Dof index sets of the cells of each region (all components of each node)."""
    out = []
    for region in regions.omega_B_regions:
        cells = np.asarray(sorted(region), dtype=np.int64)
        nodes = np.unique(dofmap.cell_nodes[cells])
        vd = dofmap.value_dims
        if vd == 1:
            out.append(nodes)
        else:
            out.append((nodes[:, None] * vd + np.arange(vd)).ravel())
    return out


def build_local_correction(a: CsrMatrix, dof_sets: Sequence[np.ndarray]) -> LocalCorrection:
    """Extract and factor the principal submatrix of each dof set.

    The factors are Cholesky; a non-SPD block is reported as an error since
    it signals an indefinite global operator.
    """
    regions = []
    seen = np.zeros(a.nrows, dtype=bool)
    for k, dofs in enumerate(dof_sets):
        idx = np.unique(np.asarray(dofs, dtype=np.int64))
        if len(idx) == 0:
            continue
        if idx[0] < 0 or idx[-1] >= a.nrows:
            raise ValueError(f"region {k} has dof indices outside 0..{a.nrows - 1}")
        if np.any(seen[idx]):
            raise ValueError(f"region {k} overlaps a previous region's dofs")
        seen[idx] = True
        sub = a.principal_submatrix(idx).to_dense()
        try:
            factor = dense_factor(sub, lu_fallback=False)
        except NotPositiveDefiniteError as err:
            raise NotPositiveDefiniteError(
                f"local block {k} ({len(idx)} dofs) is not SPD: {err}") from err
        regions.append((idx, factor))
    return LocalCorrection(tuple(regions), a.nrows)


def apply_local_correction(correction: LocalCorrection, r: np.ndarray) -> np.ndarray:
    """Sum of the per-region error corrections; zero outside the covered dofs."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (correction.n_global,):
        raise ValueError(f"residual length {r.shape} does not match {correction.n_global}")
    out = np.zeros_like(r)
    for idx, factor in correction.regions:
        out[idx] = factor.solve(r[idx])
    return out


def jacobi_lambda_max(a: CsrMatrix, tol: float = 1e-8) -> float:
    """Largest eigenvalue of D^{-1} A, estimated on D^{-1/2} A D^{-1/2}."""
    diag = a.diagonal()
    zero = np.nonzero(diag == 0.0)[0]
    if len(zero):
        raise ZeroDiagonalError(int(zero[0]))
    scale = 1.0 / np.sqrt(np.abs(diag))
    s = a.to_scipy()
    return estimate_lambda_max(lambda x: scale * (s @ (scale * x)), a.nrows, tol)


def adjusted_lambda_max(a: CsrMatrix, boundary_dof_sets: Sequence[np.ndarray],
                        tol: float = 1e-8) -> float:
    """Largest Jacobi-scaled eigenvalue of the block excluding the given dofs.

    By eigenvalue interlacing the result never exceeds the estimate for the
    full operator (up to estimator tolerance).  With no excluded dofs this
    equals the plain estimate.
    """
    covered = np.zeros(a.nrows, dtype=bool)
    for dofs in boundary_dof_sets:
        covered[np.asarray(dofs, dtype=np.int64)] = True
    keep = np.nonzero(~covered)[0]
    if len(keep) == 0:
        raise ValueError("excluded dofs cover the whole operator; nothing remains")
    if len(keep) == a.nrows:
        return jacobi_lambda_max(a, tol)
    return jacobi_lambda_max(a.principal_submatrix(keep), tol)


def apply_global_smoother(a: CsrMatrix, b: np.ndarray, u: np.ndarray,
                          cfg: SmootherConfig,
                          splitting: Optional[SgsSplitting] = None) -> np.ndarray:
    if cfg.kind == "sgs":
        return sgs_sweep(a, b, u, cfg.sweeps, splitting)
    return chebyshev_smooth(a, b, u, cfg.sweeps, cfg)


def combined_smooth(a: CsrMatrix, b: np.ndarray, u: np.ndarray,
                    correction: Optional[LocalCorrection], cfg: SmootherConfig,
                    splitting: Optional[SgsSplitting] = None) -> np.ndarray:
    """Sandwich smoother: local correction, global smoother, local correction.

    With no regions this is exactly the global smoother.  Updates ``u`` in
    place and returns it.
    """
    s = a.to_scipy()
    active = correction is not None and correction.n_regions > 0
    if active:
        u += apply_local_correction(correction, b - s @ u)
    apply_global_smoother(a, b, u, cfg, splitting)
    if active:
        u += apply_local_correction(correction, b - s @ u)
    return u
