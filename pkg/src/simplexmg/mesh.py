"""Simplicial meshes, quality measurement and low-quality region detection.

Meshes are triangles (dim 2) or tetrahedra (dim 3) with positively oriented
cells.  Test meshes are generated as structured grids of the unit square or
cube and degraded controllably by displacing interior vertices.  Cell
quality is the normalised radius ratio: the inradius/circumradius ratio of
a cell divided by the optimal ratio 1/dim, giving a measure in (0, 1] that
equals one exactly for the regular simplex.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, List, Sequence, Tuple

import numpy as np


class DegenerateCellError(ValueError):
    """A cell has non-positive volume."""


@dataclass(frozen=True)
class SimplexMesh:
    """Immutable simplicial mesh with marked boundary facets.

    ``cells`` holds (dim+1) vertex indices per cell, positively oriented.
    ``boundary_facets`` holds dim vertex indices per facet and
    ``facet_markers`` the integer marker of each facet.
    """

    dim: int
    vertices: np.ndarray
    cells: np.ndarray
    boundary_facets: np.ndarray
    facet_markers: np.ndarray

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, self.dim)
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, self.dim + 1)
        facets = np.asarray(self.boundary_facets, dtype=np.int64).reshape(-1, self.dim)
        markers = np.asarray(self.facet_markers, dtype=np.int64).reshape(-1)
        if len(facets) != len(markers):
            raise ValueError("boundary_facets and facet_markers length mismatch")
        if cells.size:
            if cells.min() < 0 or cells.max() >= len(verts):
                raise ValueError("cell vertex index out of range")
            sorted_cells = np.sort(cells, axis=1)
            if np.any(sorted_cells[:, 1:] == sorted_cells[:, :-1]):
                raise ValueError("cell with repeated vertex indices")
            vols = _signed_volumes(verts, cells)
            bad = np.nonzero(vols <= 0.0)[0]
            if len(bad):
                raise DegenerateCellError(
                    f"{len(bad)} cell(s) with non-positive volume, first is cell {bad[0]}")
        if facets.size:
            faces = {tuple(f) for cell in cells for f in _cell_faces(cell)}
            for i, facet in enumerate(facets):
                if tuple(np.sort(facet)) not in faces:
                    raise ValueError(f"boundary facet {i} is not a face of any cell")
        for arr in (verts, cells, facets, markers):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "boundary_facets", facets)
        object.__setattr__(self, "facet_markers", markers)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @cached_property
    def boundary_vertices(self) -> frozenset:
        return frozenset(int(v) for v in np.unique(self.boundary_facets))

    @cached_property
    def vertex_to_cells(self) -> tuple:
        """For each vertex, the sorted indices of its incident cells."""
        incident: List[List[int]] = [[] for _ in range(self.n_vertices)]
        for c, cell in enumerate(self.cells):
            for v in cell:
                incident[v].append(c)
        return tuple(np.asarray(lst, dtype=np.int64) for lst in incident)


@dataclass(frozen=True)
class QualityReport:
    """Per-cell normalised radius ratios with a histogram over (0, 1]."""

    per_cell_gamma: np.ndarray
    gamma_min: float
    histogram: np.ndarray
    bin_edges: np.ndarray


@dataclass(frozen=True)
class RegionSet:
    """Low-quality cells and their disjoint one-layer extended regions.

    ``omega_b`` is the set of below-threshold cells.  Each entry of
    ``omega_B_regions`` is a cluster of those cells together with every
    cell sharing a vertex with the cluster; regions whose extensions share
    a vertex are merged, so the regions never share degrees of freedom.
    """

    omega_b: frozenset
    omega_B_regions: Tuple[frozenset, ...]


def _cell_faces(cell: np.ndarray) -> Iterable[tuple]:
    n = len(cell)
    for skip in range(n):
        yield tuple(sorted(int(cell[j]) for j in range(n) if j != skip))


def _signed_volumes(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    v = vertices[cells]
    edges = v[:, 1:, :] - v[:, :1, :]
    dim = vertices.shape[1]
    return np.linalg.det(edges) / math.factorial(dim)


def cell_volumes(mesh: SimplexMesh) -> np.ndarray:
    return _signed_volumes(mesh.vertices, mesh.cells)


def generate_simplex_grid(dim: int, n: int) -> SimplexMesh:
    """Structured triangulation of the unit square or cube.

    Each of the n^dim subcubes is split into 2 triangles (dim 2) or 6
    tetrahedra (dim 3, conforming Kuhn subdivision).  Boundary facets are
    marked by box face: 1/2 for x=0/1, 3/4 for y=0/1, 5/6 for z=0/1.
    """
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if n < 1:
        raise ValueError(f"cells-per-edge must be at least 1, got {n}")

    side = n + 1
    axes = [np.linspace(0.0, 1.0, side)] * dim
    if dim == 2:
        xx, yy = np.meshgrid(*axes, indexing="ij")
        vertices = np.column_stack([xx.ravel(order="F"), yy.ravel(order="F")])
        vid = lambda i, j: j * side + i
        cells = []
        for j in range(n):
            for i in range(n):
                a, b = vid(i, j), vid(i + 1, j)
                c, d = vid(i + 1, j + 1), vid(i, j + 1)
                cells.append((a, b, c))
                cells.append((a, c, d))
    else:
        order = np.array([(i, j, k) for k in range(side) for j in range(side) for i in range(side)])
        vertices = order / n
        vid = lambda i, j, k: (k * side + j) * side + i
        steps = np.eye(3, dtype=int)
        cells = []
        for k in range(n):
            for j in range(n):
                for i in range(n):
                    base = np.array([i, j, k])
                    for perm in itertools.permutations(range(3)):
                        path = [base]
                        for axis in perm:
                            path.append(path[-1] + steps[axis])
                        tet = [vid(*p) for p in path]
                        # odd permutations produce negatively oriented tets
                        if _permutation_sign(perm) < 0:
                            tet[2], tet[3] = tet[3], tet[2]
                        cells.append(tuple(tet))

    cells = np.asarray(cells, dtype=np.int64)
    vertices = np.asarray(vertices, dtype=np.float64)
    facets, markers = _box_boundary_facets(vertices, cells, dim)
    return SimplexMesh(dim, vertices, cells, facets, markers)


def _permutation_sign(perm: Sequence[int]) -> int:
    sign = 1
    p = list(perm)
    for i in range(len(p)):
        while p[i] != i:
            j = p[i]
            p[i], p[j] = p[j], p[i]
            sign = -sign
    return sign


def _box_boundary_facets(vertices, cells, dim):
    counts = {}
    for cell in cells:
        for face in _cell_faces(cell):
            counts[face] = counts.get(face, 0) + 1
    facets, markers = [], []
    for face, count in counts.items():
        if count != 1:
            continue
        coords = vertices[list(face)]
        marker = 0
        for axis in range(dim):
            if np.all(np.abs(coords[:, axis]) < 1e-12):
                marker = 2 * axis + 1
                break
            if np.all(np.abs(coords[:, axis] - 1.0) < 1e-12):
                marker = 2 * axis + 2
                break
        if marker == 0:
            raise RuntimeError("boundary facet not on a box face")
        facets.append(face)
        markers.append(marker)
    order = np.lexsort(np.asarray(facets, dtype=np.int64).T[::-1])
    facets = np.asarray(facets, dtype=np.int64)[order]
    markers = np.asarray(markers, dtype=np.int64)[order]
    return facets, markers


def perturb_vertices(mesh: SimplexMesh,
                     targets: Sequence[Tuple[int, np.ndarray]]) -> SimplexMesh:
    """Displace interior vertices, keeping connectivity and orientation.

    Rejects displacements of boundary vertices and displacements that
    invert (non-positive volume) any incident cell.
    """
    if not targets:
        return mesh
    vertices = np.array(mesh.vertices)
    moved = []
    for vidx, disp in targets:
        vidx = int(vidx)
        if vidx < 0 or vidx >= mesh.n_vertices:
            raise ValueError(f"vertex index {vidx} out of range")
        if vidx in mesh.boundary_vertices:
            raise ValueError(f"vertex {vidx} lies on the boundary and cannot be moved")
        vertices[vidx] = vertices[vidx] + np.asarray(disp, dtype=np.float64)
        moved.append(vidx)

    touched = np.unique(np.concatenate([mesh.vertex_to_cells[v] for v in moved]))
    vols = _signed_volumes(vertices, mesh.cells[touched])
    bad = np.nonzero(vols <= 0.0)[0]
    if len(bad):
        raise DegenerateCellError(
            f"displacement inverts cell {int(touched[bad[0]])} (signed volume {vols[bad[0]]:.3e})")
    return SimplexMesh(mesh.dim, vertices, mesh.cells,
                       mesh.boundary_facets, mesh.facet_markers)


def _facet_measures(v: np.ndarray, dim: int) -> np.ndarray:
    """Measures of the (dim+1) facets of each cell; v has shape (m, dim+1, dim)."""
    m = v.shape[0]
    measures = np.empty((m, dim + 1))
    for skip in range(dim + 1):
        keep = [j for j in range(dim + 1) if j != skip]
        pts = v[:, keep, :]
        if dim == 2:
            measures[:, skip] = np.linalg.norm(pts[:, 1] - pts[:, 0], axis=1)
        else:
            cross = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
            measures[:, skip] = 0.5 * np.linalg.norm(cross, axis=1)
    return measures


def _radius_ratios(vertices: np.ndarray, cells: np.ndarray, dim: int) -> np.ndarray:
    v = vertices[cells]
    edges = v[:, 1:, :] - v[:, :1, :]
    vols = np.linalg.det(edges) / math.factorial(dim)
    if np.any(vols <= 0.0):
        bad = int(np.nonzero(vols <= 0.0)[0][0])
        raise DegenerateCellError(f"cell {bad} has non-positive volume {vols[bad]:.3e}")

    r_in = dim * vols / _facet_measures(v, dim).sum(axis=1)

    # circumcenter from |c - v_0| = |c - v_i|: 2 (v_i - v_0) . (c - v_0) = |v_i - v_0|^2
    rhs = np.einsum("mij,mij->mi", edges, edges)
    centers = np.linalg.solve(2.0 * edges, rhs[:, :, None])[:, :, 0]
    r_circ = np.linalg.norm(centers, axis=1)

    # normalise by the optimal inradius/circumradius ratio 1/dim
    return dim * r_in / r_circ


def radius_ratio(mesh: SimplexMesh, cell: int) -> float:
    """Normalised radius ratio of one cell, in (0, 1], 1 for the regular simplex."""
    return float(_radius_ratios(mesh.vertices, mesh.cells[cell:cell + 1], mesh.dim)[0])


def radius_ratios(mesh: SimplexMesh) -> np.ndarray:
    """Normalised radius ratios of every cell."""
    return _radius_ratios(mesh.vertices, mesh.cells, mesh.dim)


def quality_report(mesh: SimplexMesh, bins: int = 20) -> QualityReport:
    """Per-cell quality and a histogram over uniform bins of (0, 1]."""
    if bins < 1:
        raise ValueError(f"bins must be at least 1, got {bins}")
    gammas = radius_ratios(mesh)
    hist, edges = np.histogram(gammas, bins=bins, range=(0.0, 1.0))
    return QualityReport(per_cell_gamma=gammas, gamma_min=float(gammas.min()),
                         histogram=hist, bin_edges=edges)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def identify_regions(mesh: SimplexMesh, threshold: float = 0.1) -> RegionSet:
    """Detect below-threshold cells and build their extended correction regions.

    Clusters of low-quality cells are connected components under vertex
    adjacency; each region is a cluster plus every cell sharing a vertex
    with it.  Regions whose extensions share a vertex are merged so the
    final regions are disjoint down to the degree-of-freedom level.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    gammas = radius_ratios(mesh)
    bad = np.nonzero(gammas < threshold)[0]
    if len(bad) == 0:
        return RegionSet(frozenset(), ())

    v2c = mesh.vertex_to_cells
    bad_set = set(int(b) for b in bad)

    # cluster bad cells sharing a vertex
    uf = _UnionFind(len(bad))
    pos = {int(c): i for i, c in enumerate(bad)}
    for i, c in enumerate(bad):
        for v in mesh.cells[c]:
            for other in v2c[v]:
                if int(other) in bad_set:
                    uf.union(i, pos[int(other)])
    clusters = {}
    for i, c in enumerate(bad):
        clusters.setdefault(uf.find(i), set()).add(int(c))

    # one-layer vertex extension of each cluster
    extended = []
    for cluster in clusters.values():
        region = set(cluster)
        for c in cluster:
            for v in mesh.cells[c]:
                region.update(int(x) for x in v2c[v])
        extended.append(region)

    # merge regions whose extensions share any vertex, so DOF sets stay disjoint
    region_vertices = [set(int(v) for c in region for v in mesh.cells[c])
                       for region in extended]
    uf2 = _UnionFind(len(extended))
    for i in range(len(extended)):
        for j in range(i + 1, len(extended)):
            if region_vertices[i] & region_vertices[j]:
                uf2.union(i, j)
    merged = {}
    for i, region in enumerate(extended):
        merged.setdefault(uf2.find(i), set()).update(region)

    regions = tuple(sorted((frozenset(r) for r in merged.values()), key=min))
    return RegionSet(omega_b=frozenset(bad_set), omega_B_regions=regions)
