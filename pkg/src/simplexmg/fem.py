"""P1/P2 Lagrange finite elements for Poisson and linear elasticity.

Reference bases and simplex quadrature, degree-of-freedom maps (scalar or
vector valued), vectorized stiffness/load assembly with Neumann and
traction surface terms, and symmetric Dirichlet elimination that keeps the
assembled operator SPD.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi, roots_legendre

from .mesh import SimplexMesh
from .sparse import CsrMatrix

# local edges of the reference simplex, vertices first then these pairs
_EDGES = {
    2: ((0, 1), (0, 2), (1, 2)),
    3: ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)),
}


def reference_basis(degree: int, dim: int, point) -> Tuple[np.ndarray, np.ndarray]:
    """Lagrange basis values and local gradients at a reference-simplex point.

    Vertex functions come first, then edge functions ordered as in
    ``_EDGES``.  The point is given in local coordinates and must lie in
    the closed reference simplex up to 1e-12.
    """
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if degree not in (1, 2):
        raise ValueError(f"element degree must be 1 or 2, got {degree}")
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (dim,):
        raise ValueError(f"expected a local point with {dim} coordinates")
    lam = np.concatenate([[1.0 - point.sum()], point])
    if lam.min() < -1e-12:
        raise ValueError(f"point {point} lies outside the reference simplex")

    grad_lam = np.vstack([-np.ones(dim), np.eye(dim)])
    if degree == 1:
        return lam.copy(), grad_lam.copy()

    n_vert = dim + 1
    edges = _EDGES[dim]
    values = np.empty(n_vert + len(edges))
    grads = np.empty((n_vert + len(edges), dim))
    values[:n_vert] = lam * (2.0 * lam - 1.0)
    grads[:n_vert] = (4.0 * lam - 1.0)[:, None] * grad_lam
    for k, (a, b) in enumerate(edges):
        values[n_vert + k] = 4.0 * lam[a] * lam[b]
        grads[n_vert + k] = 4.0 * (lam[a] * grad_lam[b] + lam[b] * grad_lam[a])
    return values, grads


def quadrature(dim: int, degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """Positive-weight quadrature on the reference simplex, exact to ``degree``.

    Returns local points (nq, dim) and weights summing to the reference
    volume (1/2 for the triangle, 1/6 for the tetrahedron).
    """
    if degree < 1 or degree > 4:
        raise ValueError(f"quadrature degree must be in 1..4, got {degree}")
    if dim == 2:
        if degree == 1:
            return np.array([[1 / 3, 1 / 3]]), np.array([0.5])
        if degree == 2:
            pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
            return pts, np.full(3, 1 / 6)
        # six-point rule, exact to degree 4
        groups = ((0.445948490915965, 0.223381589678011),
                  (0.091576213509771, 0.109951743655322))
        pts, wts = [], []
        for a, w in groups:
            b = 1.0 - 2.0 * a
            pts += [[a, a], [b, a], [a, b]]
            wts += [w, w, w]
        return np.asarray(pts), 0.5 * np.asarray(wts)
    if dim == 3:
        if degree == 1:
            return np.array([[0.25, 0.25, 0.25]]), np.array([1 / 6])
        if degree == 2:
            a = (5.0 - np.sqrt(5.0)) / 20.0
            b = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
            pts = np.array([[a, a, a], [b, a, a], [a, b, a], [a, a, b]])
            return pts, np.full(4, 1 / 24)
        return _conical_tet_rule(3)  # exact to degree 5
    raise ValueError(f"dim must be 2 or 3, got {dim}")


def _conical_tet_rule(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stroud conical product rule on the reference tetrahedron."""
    xu, wu = roots_jacobi(n, 2.0, 0.0)
    xv, wv = roots_jacobi(n, 1.0, 0.0)
    xw, ww = roots_legendre(n)
    u, wu = (xu + 1.0) / 2.0, wu / 8.0
    v, wv = (xv + 1.0) / 2.0, wv / 4.0
    w, ww = (xw + 1.0) / 2.0, ww / 2.0
    pts, wts = [], []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                x = u[i]
                y = v[j] * (1.0 - u[i])
                z = w[k] * (1.0 - u[i]) * (1.0 - v[j])
                pts.append([x, y, z])
                wts.append(wu[i] * wv[j] * ww[k])
    return np.asarray(pts), np.asarray(wts)


def _segment_rule(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss rule on [0, 1] for facet integrals of 2D meshes."""
    n = max(1, (degree + 2) // 2)
    x, w = roots_legendre(n)
    return (x + 1.0) / 2.0, w / 2.0


@dataclass(frozen=True)
class DofMap:
    """Degrees of freedom of a P1/P2 Lagrange space on a mesh.

    Scalar nodes are mesh vertices (P1) or vertices followed by edge
    midpoints (P2, edges keyed by sorted vertex pair).  For vector fields
    the components of node ``n`` occupy dof indices ``n*value_dims + c``.
    """

    mesh: SimplexMesh
    element_degree: int
    value_dims: int
    node_coords: np.ndarray
    cell_nodes: np.ndarray
    edge_lookup: dict

    def __post_init__(self):
        for arr in (self.node_coords, self.cell_nodes):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_coords)

    @property
    def n_dofs(self) -> int:
        return self.n_nodes * self.value_dims

    @cached_property
    def cell_dofs(self) -> np.ndarray:
        vd = self.value_dims
        if vd == 1:
            return self.cell_nodes
        expanded = (self.cell_nodes[:, :, None] * vd + np.arange(vd)).reshape(
            len(self.cell_nodes), -1)
        expanded.setflags(write=False)
        return expanded

    @cached_property
    def dof_coords(self) -> np.ndarray:
        coords = np.repeat(self.node_coords, self.value_dims, axis=0)
        coords.setflags(write=False)
        return coords

    @cached_property
    def dof_components(self) -> np.ndarray:
        comps = np.tile(np.arange(self.value_dims), self.n_nodes)
        comps.setflags(write=False)
        return comps

    def boundary_nodes(self, marker: int) -> np.ndarray:
        """Scalar nodes lying on boundary facets with the given marker."""
        selected = self.mesh.boundary_facets[self.mesh.facet_markers == marker]
        if len(selected) == 0:
            raise ValueError(f"boundary marker {marker} not present in mesh")
        nodes = set(int(v) for v in selected.ravel())
        if self.element_degree == 2:
            for facet in selected:
                for a, b in _facet_edges(facet):
                    nodes.add(self.edge_lookup[(a, b)])
        return np.asarray(sorted(nodes), dtype=np.int64)

    def boundary_dofs(self, marker: int) -> np.ndarray:
        nodes = self.boundary_nodes(marker)
        vd = self.value_dims
        if vd == 1:
            return nodes
        return (nodes[:, None] * vd + np.arange(vd)).ravel()


def _facet_edges(facet) -> Tuple[Tuple[int, int], ...]:
    f = [int(v) for v in facet]
    if len(f) == 2:
        return (tuple(sorted(f)),)
    return tuple(tuple(sorted((f[i], f[j])))
                 for i in range(3) for j in range(i + 1, 3))


def build_dofmap(mesh: SimplexMesh, degree: int, value_dims: int = 1) -> DofMap:
    if degree not in (1, 2):
        raise ValueError(f"element degree must be 1 or 2, got {degree}")
    if value_dims not in (1, mesh.dim):
        raise ValueError(f"value_dims must be 1 or {mesh.dim}, got {value_dims}")
    if degree == 1:
        return DofMap(mesh, 1, value_dims, np.array(mesh.vertices),
                      np.array(mesh.cells), {})

    local_edges = np.asarray(_EDGES[mesh.dim])
    pairs = np.sort(mesh.cells[:, local_edges], axis=2).reshape(-1, 2)
    unique, inverse = np.unique(pairs, axis=0, return_inverse=True)
    edge_ids = inverse.reshape(mesh.n_cells, len(local_edges))
    midpoints = 0.5 * (mesh.vertices[unique[:, 0]] + mesh.vertices[unique[:, 1]])
    node_coords = np.vstack([mesh.vertices, midpoints])
    cell_nodes = np.hstack([mesh.cells, mesh.n_vertices + edge_ids])
    lookup = {(int(a), int(b)): mesh.n_vertices + i
              for i, (a, b) in enumerate(unique)}
    return DofMap(mesh, 2, value_dims, node_coords, cell_nodes, lookup)


def lame_parameters(e_modulus: float, poisson_ratio: float) -> Tuple[float, float]:
    mu = e_modulus / (2.0 * (1.0 + poisson_ratio))
    lam = e_modulus * poisson_ratio / ((1.0 + poisson_ratio) * (1.0 - 2.0 * poisson_ratio))
    return mu, lam


@dataclass(frozen=True)
class ProblemSpec:
    """Problem data: PDE kind, source, boundary conditions and material.

    ``source`` maps a coordinate to a scalar (Poisson) or a length-dim
    vector (elasticity); ``None`` means zero.  ``dirichlet``/``neumann``
    are sequences of (marker, function) pairs with disjoint marker sets.
    """

    kind: str
    source: Optional[Callable] = None
    dirichlet: tuple = ()
    neumann: tuple = ()
    material: Optional[dict] = None

    def __post_init__(self):
        if self.kind not in ("poisson", "elasticity"):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.kind == "elasticity" and not self.material:
            raise ValueError("elasticity requires material={'E': ..., 'nu': ...}")
        d_markers = {m for m, _ in self.dirichlet}
        n_markers = {m for m, _ in self.neumann}
        if d_markers & n_markers:
            raise ValueError(f"markers {sorted(d_markers & n_markers)} appear in both "
                             "dirichlet and neumann lists")
        object.__setattr__(self, "dirichlet", tuple(self.dirichlet))
        object.__setattr__(self, "neumann", tuple(self.neumann))

    def value_dims(self, dim: int) -> int:
        return 1 if self.kind == "poisson" else dim


@dataclass(frozen=True)
class AssembledSystem:
    a: CsrMatrix
    b: np.ndarray
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray


def _cell_geometry(mesh: SimplexMesh):
    v = mesh.vertices[mesh.cells]
    jac = (v[:, 1:, :] - v[:, :1, :]).transpose(0, 2, 1)  # columns are edges
    det = np.linalg.det(jac)
    if np.any(det <= 0.0):
        raise ValueError("mesh contains a degenerate or inverted cell")
    return v[:, 0, :], jac, det, np.linalg.inv(jac)


def _basis_at(degree: int, dim: int, points: np.ndarray):
    vals, grads = [], []
    for p in points:
        v, g = reference_basis(degree, dim, p)
        vals.append(v)
        grads.append(g)
    return np.asarray(vals), np.asarray(grads)  # (nq, nloc), (nq, nloc, dim)


def _evaluate_source(fn, coords, value_dims):
    m, nq = coords.shape[:2]
    if value_dims == 1:
        out = np.empty((m, nq))
        for i in range(m):
            for q in range(nq):
                out[i, q] = fn(coords[i, q])
    else:
        out = np.empty((m, nq, value_dims))
        for i in range(m):
            for q in range(nq):
                out[i, q] = fn(coords[i, q])
    return out


def assemble(mesh: SimplexMesh, dofmap: DofMap, problem: ProblemSpec) -> AssembledSystem:
    """Assemble the stiffness matrix and load vector with boundary conditions.

    Dirichlet conditions are eliminated symmetrically: constrained rows and
    columns are cleared, the diagonal is set to one and prescribed values
    are folded into the right-hand side.
    """
    dim = mesh.dim
    vd = dofmap.value_dims
    if problem.value_dims(dim) != vd:
        raise ValueError(f"dofmap has value_dims={vd}, problem expects {problem.value_dims(dim)}")
    present = set(int(m) for m in np.unique(mesh.facet_markers))
    for marker, _ in tuple(problem.dirichlet) + tuple(problem.neumann):
        if marker not in present:
            raise ValueError(f"boundary marker {marker} not present in mesh")

    degree = dofmap.element_degree
    v0, jac, det, inv_jac = _cell_geometry(mesh)

    pts, wts = quadrature(dim, 1 if degree == 1 else 2)
    _, grads_ref = _basis_at(degree, dim, pts)
    # physical gradients: grad N = J^{-T} grad_ref N
    grads = np.einsum("qie,med->mqid", grads_ref, inv_jac)

    if problem.kind == "poisson":
        local = np.einsum("q,m,mqid,mqjd->mij", wts, det, grads, grads)
    else:
        mu, lam = lame_parameters(problem.material["E"], problem.material["nu"])
        base = np.einsum("q,m,mqid,mqjd->mij", wts, det, grads, grads)
        block = mu * np.einsum("mij,ab->miajb", base, np.eye(vd))
        block += mu * np.einsum("q,m,mqib,mqja->miajb", wts, det, grads, grads)
        block += lam * np.einsum("q,m,mqia,mqjb->miajb", wts, det, grads, grads)
        nloc = dofmap.cell_nodes.shape[1]
        local = block.reshape(mesh.n_cells, nloc * vd, nloc * vd)

    cell_dofs = dofmap.cell_dofs
    rows = np.repeat(cell_dofs, cell_dofs.shape[1], axis=1).ravel()
    cols = np.tile(cell_dofs, (1, cell_dofs.shape[1])).ravel()
    stiffness = sp.coo_matrix((local.ravel(), (rows, cols)),
                              shape=(dofmap.n_dofs, dofmap.n_dofs)).tocsr()
    stiffness.sum_duplicates()

    b = np.zeros(dofmap.n_dofs)
    if problem.source is not None:
        qpts, qwts = quadrature(dim, 4)
        vals, _ = _basis_at(degree, dim, qpts)
        coords = v0[:, None, :] + np.einsum("mde,qe->mqd", jac, qpts)
        fvals = _evaluate_source(problem.source, coords, vd)
        if vd == 1:
            b_local = np.einsum("q,m,qi,mq->mi", qwts, det, vals, fvals)
        else:
            b_local = np.einsum("q,m,qi,mqa->mia", qwts, det, vals, fvals).reshape(
                mesh.n_cells, -1)
        np.add.at(b, cell_dofs.ravel(), b_local.ravel())

    for marker, fn in problem.neumann:
        _assemble_facet_load(mesh, dofmap, marker, fn, b)

    dir_dofs, dir_vals = _dirichlet_data(dofmap, problem)
    if len(dir_dofs):
        u_bc = np.zeros(dofmap.n_dofs)
        u_bc[dir_dofs] = dir_vals
        b -= stiffness @ u_bc
        b[dir_dofs] = dir_vals
        mask = np.zeros(dofmap.n_dofs, dtype=bool)
        mask[dir_dofs] = True
        coo = stiffness.tocoo()
        keep = ~(mask[coo.row] | mask[coo.col])
        rows = np.concatenate([coo.row[keep], dir_dofs])
        cols = np.concatenate([coo.col[keep], dir_dofs])
        data = np.concatenate([coo.data[keep], np.ones(len(dir_dofs))])
        a = CsrMatrix.from_coo(dofmap.n_dofs, dofmap.n_dofs, rows, cols, data)
    else:
        a = CsrMatrix.from_scipy(stiffness)
    return AssembledSystem(a, b, dir_dofs, dir_vals)


def _dirichlet_data(dofmap: DofMap, problem: ProblemSpec):
    dofs, values = [], []
    vd = dofmap.value_dims
    for marker, fn in problem.dirichlet:
        for node in dofmap.boundary_nodes(marker):
            x = dofmap.node_coords[node]
            if vd == 1:
                dofs.append(node)
                values.append(float(fn(x)))
            else:
                g = np.asarray(fn(x), dtype=np.float64)
                for c in range(vd):
                    dofs.append(node * vd + c)
                    values.append(g[c])
    if not dofs:
        return np.empty(0, dtype=np.int64), np.empty(0)
    # nodes shared by several markers (corners) appear once
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.asarray(values)
    unique, first = np.unique(dofs, return_index=True)
    return unique, values[first]


def _assemble_facet_load(mesh: SimplexMesh, dofmap: DofMap, marker: int, fn, b):
    """Add the surface term of a Neumann/traction condition to the load vector."""
    selected = mesh.boundary_facets[mesh.facet_markers == marker]
    degree = dofmap.element_degree
    vd = dofmap.value_dims
    dim = mesh.dim

    if dim == 2:
        t_pts, t_wts = _segment_rule(2)
        local_pts = t_pts[:, None]  # 1D local coordinate
        basis = np.array([_segment_basis(degree, t) for t in t_pts])
    else:
        local_pts, t_wts = quadrature(2, 2)
        t_wts = t_wts / 0.5  # normalise to unit parameter area
        basis = np.array([reference_basis(degree, 2, p)[0] for p in local_pts])

    for facet in selected:
        fverts = mesh.vertices[facet]
        if dim == 2:
            measure = np.linalg.norm(fverts[1] - fverts[0])
            coords = fverts[0] + local_pts * (fverts[1] - fverts[0])
        else:
            cross = np.cross(fverts[1] - fverts[0], fverts[2] - fverts[0])
            measure = 0.5 * np.linalg.norm(cross)
            coords = (fverts[0]
                      + np.outer(local_pts[:, 0], fverts[1] - fverts[0])
                      + np.outer(local_pts[:, 1], fverts[2] - fverts[0]))
        nodes = _facet_nodes(dofmap, facet)
        for q, w in enumerate(t_wts):
            s = fn(coords[q])
            if vd == 1:
                contrib = w * measure * float(s) * basis[q]
                np.add.at(b, nodes, contrib)
            else:
                s = np.asarray(s, dtype=np.float64)
                for c in range(vd):
                    np.add.at(b, nodes * vd + c, w * measure * s[c] * basis[q])


def _segment_basis(degree: int, t: float) -> np.ndarray:
    if degree == 1:
        return np.array([1.0 - t, t])
    return np.array([(1.0 - t) * (1.0 - 2.0 * t), t * (2.0 * t - 1.0), 4.0 * t * (1.0 - t)])


def _facet_nodes(dofmap: DofMap, facet) -> np.ndarray:
    nodes = [int(v) for v in facet]
    if dofmap.element_degree == 2:
        nodes += [dofmap.edge_lookup[pair] for pair in _facet_edges(facet)]
    return np.asarray(nodes, dtype=np.int64)


def interpolate(dofmap: DofMap, fn: Callable) -> np.ndarray:
    """Nodal interpolation: result[i] = fn(coordinate of dof i), componentwise."""
    vd = dofmap.value_dims
    if vd == 1:
        return np.array([float(fn(x)) for x in dofmap.node_coords])
    out = np.empty(dofmap.n_dofs)
    for node, x in enumerate(dofmap.node_coords):
        out[node * vd:(node + 1) * vd] = np.asarray(fn(x), dtype=np.float64)
    return out


def l2_error(mesh: SimplexMesh, dofmap: DofMap, u: np.ndarray, exact: Callable,
             degree: int = 4) -> float:
    """L2 norm of the difference between a scalar FE function and a callable."""
    if dofmap.value_dims != 1:
        raise ValueError("l2_error supports scalar fields only")
    v0, jac, det, _ = _cell_geometry(mesh)
    pts, wts = quadrature(mesh.dim, degree)
    vals, _ = _basis_at(dofmap.element_degree, mesh.dim, pts)
    coords = v0[:, None, :] + np.einsum("mde,qe->mqd", jac, pts)
    uh = np.einsum("qi,mi->mq", vals, u[dofmap.cell_dofs])
    ue = np.empty_like(uh)
    for i in range(uh.shape[0]):
        for q in range(uh.shape[1]):
            ue[i, q] = exact(coords[i, q])
    return float(np.sqrt(np.einsum("q,m,mq->", wts, det, (uh - ue) ** 2)))
