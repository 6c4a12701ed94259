"""Intergrid transfer between non-nested simplicial meshes.

Point location with a uniform-bin spatial index, interpolation-based
prolongation assembly (rows are coarse basis values at fine dof
coordinates) and Galerkin construction of coarse operators.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .fem import DofMap, reference_basis
from .mesh import SimplexMesh
from .sparse import CsrMatrix, triple_product


class PointLocationError(RuntimeError):
    """A point lies outside every cell beyond the barycentric tolerance."""

    def __init__(self, point, nearest_cell: int, worst_coordinate: float,
                 dof_index: Optional[int] = None):
        where = f" (while interpolating dof {dof_index})" if dof_index is not None else ""
        super().__init__(
            f"point {np.asarray(point)} lies outside the mesh{where}; nearest cell "
            f"{nearest_cell} has most negative barycentric coordinate {worst_coordinate:.3e}")
        self.point = np.asarray(point)
        self.nearest_cell = nearest_cell
        self.worst_coordinate = worst_coordinate
        self.dof_index = dof_index


class CellLocator:
    """Locate points in a simplicial mesh via a uniform-bin cell index.

    Queries test candidate cells in ascending index order, so a point on a
    shared facet is always assigned to the lowest-index containing cell.
    """

    def __init__(self, mesh: SimplexMesh, tol: float = 1e-10):
        self.mesh = mesh
        self.tol = tol
        v = mesh.vertices[mesh.cells]
        self._v0 = v[:, 0, :]
        edges = (v[:, 1:, :] - v[:, :1, :]).transpose(0, 2, 1)
        self._inv_jac = np.linalg.inv(edges)

        self._lo = mesh.vertices.min(axis=0)
        self._hi = mesh.vertices.max(axis=0)
        span = np.maximum(self._hi - self._lo, 1e-300)
        self._nbins = max(1, min(64, int(round(mesh.n_cells ** (1.0 / mesh.dim)))))
        self._scale = self._nbins / span

        pad = 1e-9 * span.max()
        cell_lo = v.min(axis=1) - pad
        cell_hi = v.max(axis=1) + pad
        lo_bins = np.clip(((cell_lo - self._lo) * self._scale).astype(int), 0, self._nbins - 1)
        hi_bins = np.clip(((cell_hi - self._lo) * self._scale).astype(int), 0, self._nbins - 1)
        bins = {}
        for c in range(mesh.n_cells):
            ranges = [range(lo_bins[c, d], hi_bins[c, d] + 1) for d in range(mesh.dim)]
            for key in np.ndindex(*[len(r) for r in ranges]):
                idx = tuple(ranges[d][key[d]] for d in range(mesh.dim))
                bins.setdefault(idx, []).append(c)
        self._bins = {k: np.asarray(v, dtype=np.int64) for k, v in bins.items()}

    def _barycentric(self, cells: np.ndarray, x: np.ndarray) -> np.ndarray:
        local = np.einsum("med,md->me", self._inv_jac[cells], x - self._v0[cells])
        return np.column_stack([1.0 - local.sum(axis=1), local])

    def locate(self, x) -> Tuple[int, np.ndarray]:
        """Return (cell index, clamped barycentric coordinates) containing x."""
        x = np.asarray(x, dtype=np.float64)
        query = np.clip(x, self._lo, self._hi)
        key = tuple(np.clip(((query - self._lo) * self._scale).astype(int),
                            0, self._nbins - 1))
        best_cell, best_min = -1, -np.inf
        for candidates in (self._bins.get(key, np.empty(0, dtype=np.int64)),
                           np.arange(self.mesh.n_cells)):
            if len(candidates) == 0:
                continue
            bary = self._barycentric(candidates, x)
            mins = bary.min(axis=1)
            inside = np.nonzero(mins >= -self.tol)[0]
            if len(inside):
                pick = inside[0]  # candidates are in ascending cell order
                clamped = np.clip(bary[pick], 0.0, 1.0)
                return int(candidates[pick]), clamped / clamped.sum()
            worst = int(np.argmax(mins))
            if mins[worst] > best_min:
                best_min = float(mins[worst])
                best_cell = int(candidates[worst])
        raise PointLocationError(x, best_cell, best_min)


def locate_point(mesh: SimplexMesh, x, tol: float = 1e-10) -> Tuple[int, np.ndarray]:
    """One-shot point location; builds a :class:`CellLocator` internally."""
    return CellLocator(mesh, tol=tol).locate(x)


@dataclass(frozen=True)
class Prolongation:
    """Interpolation matrix from a coarse dof space into a finer one."""

    matrix: CsrMatrix
    fine_level: Optional[int] = None
    coarse_level: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.matrix.shape


def build_prolongation(fine: DofMap, coarse_mesh: SimplexMesh, coarse: DofMap,
                       drop_tol: float = 1e-14) -> Prolongation:
    """Interpolation prolongation: row i holds coarse basis values at fine dof i.

    Vector fields interpolate componentwise, giving a block structure.
    """
    if fine.value_dims != coarse.value_dims:
        raise ValueError("fine and coarse dof maps must have equal value_dims")
    if fine.element_degree != coarse.element_degree:
        raise ValueError("fine and coarse dof maps must have equal element degree")

    locator = CellLocator(coarse_mesh)
    degree = coarse.element_degree
    dim = coarse_mesh.dim
    rows, cols, vals = [], [], []
    for i, x in enumerate(fine.node_coords):
        try:
            cell, bary = locator.locate(x)
        except PointLocationError as err:
            raise PointLocationError(err.point, err.nearest_cell,
                                     err.worst_coordinate, dof_index=i) from err
        values, _ = reference_basis(degree, dim, bary[1:])
        nodes = coarse.cell_nodes[cell]
        for node, value in zip(nodes, values):
            if abs(value) > drop_tol:
                rows.append(i)
                cols.append(int(node))
                vals.append(float(value))

    scalar = sp.coo_matrix((vals, (rows, cols)),
                           shape=(fine.n_nodes, coarse.n_nodes)).tocsr()
    if fine.value_dims > 1:
        scalar = sp.kron(scalar, sp.identity(fine.value_dims), format="csr")
    return Prolongation(CsrMatrix.from_scipy(scalar))


def coarsen_system(a_fine: CsrMatrix, p: Prolongation) -> CsrMatrix:
    """Galerkin coarse operator from the fine operator and the prolongation."""
    return triple_product(p.matrix, a_fine)


def restrict_residual(p: Prolongation, r_fine: np.ndarray) -> np.ndarray:
    r_fine = np.asarray(r_fine, dtype=np.float64)
    if r_fine.shape != (p.matrix.nrows,):
        raise ValueError(f"residual length {r_fine.shape} does not match fine size {p.matrix.nrows}")
    return p.matrix.to_scipy().T @ r_fine


def prolong_add(p: Prolongation, u_coarse: np.ndarray, u_fine: np.ndarray) -> np.ndarray:
    u_coarse = np.asarray(u_coarse, dtype=np.float64)
    if u_coarse.shape != (p.matrix.ncols,):
        raise ValueError(f"coarse vector length {u_coarse.shape} does not match {p.matrix.ncols}")
    if u_fine.shape != (p.matrix.nrows,):
        raise ValueError(f"fine vector length {u_fine.shape} does not match {p.matrix.nrows}")
    u_fine += p.matrix.to_scipy() @ u_coarse
    return u_fine
