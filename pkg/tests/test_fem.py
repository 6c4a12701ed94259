"""Finite element basis, quadrature, dof map and assembly tests."""

import math

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from simplexmg.fem import (ProblemSpec, assemble, build_dofmap, interpolate,
                           l2_error, lame_parameters, quadrature,
                           reference_basis)
from simplexmg.mesh import SimplexMesh, generate_simplex_grid, perturb_vertices


def reference_triangle():
    return SimplexMesh(2, [[0, 0], [1, 0], [0, 1]], [[0, 1, 2]],
                       [[0, 1], [1, 2], [0, 2]], [1, 2, 3])


def wiggled_grid(n=4, scale=0.15):
    """Structured grid with all interior vertices jittered (still valid)."""
    mesh = generate_simplex_grid(2, n)
    rng = np.random.default_rng(99)
    targets = []
    for v in range(mesh.n_vertices):
        if v in mesh.boundary_vertices:
            continue
        targets.append((v, rng.uniform(-scale / n, scale / n, size=2)))
    return perturb_vertices(mesh, targets)


class TestReferenceBasis:
    @pytest.mark.parametrize("degree,dim", [(1, 2), (1, 3), (2, 2), (2, 3)])
    def test_partition_of_unity(self, degree, dim):
        rng = np.random.default_rng(degree * 10 + dim)
        for _ in range(10):
            lam = rng.dirichlet(np.ones(dim + 1))
            values, grads = reference_basis(degree, dim, lam[1:])
            assert abs(values.sum() - 1.0) <= 1e-12
            assert np.abs(grads.sum(axis=0)).max() <= 1e-12

    def test_p1_kronecker_at_vertices(self):
        corners = [np.zeros(2), np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        for k, corner in enumerate(corners):
            values, _ = reference_basis(1, 2, corner)
            expected = np.zeros(3)
            expected[k] = 1.0
            np.testing.assert_allclose(values, expected, atol=1e-14)

    def test_p2_edge_midpoint_property(self):
        values, _ = reference_basis(2, 2, [0.5, 0.0])
        expected = np.zeros(6)
        expected[3] = 1.0  # edge (0, 1) bubble
        np.testing.assert_allclose(values, expected, atol=1e-14)

    def test_p2_kronecker_at_all_nodes(self):
        nodes = [(0, 0), (1, 0), (0, 1), (0.5, 0), (0, 0.5), (0.5, 0.5)]
        for k, node in enumerate(nodes):
            values, _ = reference_basis(2, 2, node)
            expected = np.zeros(6)
            expected[k] = 1.0
            np.testing.assert_allclose(values, expected, atol=1e-14)

    def test_rejects_unsupported_degree(self):
        with pytest.raises(ValueError, match="degree"):
            reference_basis(3, 2, [0.3, 0.3])

    def test_rejects_outside_point(self):
        with pytest.raises(ValueError, match="outside"):
            reference_basis(1, 2, [0.8, 0.8])


def simplex_monomial_integral(exponents, dim):
    """Exact integral of prod(x_i^a_i) over the reference simplex."""
    num = math.prod(math.factorial(a) for a in exponents)
    return num / math.factorial(sum(exponents) + dim)


class TestQuadrature:
    def test_degree_one_is_centroid_rule(self):
        pts, wts = quadrature(2, 1)
        np.testing.assert_allclose(pts, [[1 / 3, 1 / 3]])
        np.testing.assert_allclose(wts, [0.5])

    @pytest.mark.parametrize("dim", [2, 3])
    @pytest.mark.parametrize("degree", [1, 2, 3, 4])
    def test_weights_positive_and_sum_to_volume(self, dim, degree):
        pts, wts = quadrature(dim, degree)
        assert wts.min() > 0.0
        assert abs(wts.sum() - 1.0 / math.factorial(dim)) <= 1e-12

    def test_x_squared_on_triangle(self):
        pts, wts = quadrature(2, 2)
        assert abs((wts * pts[:, 0] ** 2).sum() - 1 / 12) <= 1e-14

    @pytest.mark.parametrize("dim", [2, 3])
    @pytest.mark.parametrize("degree", [1, 2, 3, 4])
    def test_exactness_for_all_monomials(self, dim, degree):
        pts, wts = quadrature(dim, degree)
        for total in range(degree + 1):
            for exponents in _exponents(dim, total):
                value = (wts * np.prod(pts ** np.array(exponents), axis=1)).sum()
                exact = simplex_monomial_integral(exponents, dim)
                assert abs(value - exact) <= 1e-13, (degree, exponents)

    def test_rejects_unsupported_degree(self):
        with pytest.raises(ValueError, match="degree"):
            quadrature(2, 5)


def _exponents(dim, total):
    if dim == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _exponents(dim - 1, total - head):
            yield (head,) + rest


class TestDofMap:
    def test_p1_scalar_counts(self):
        mesh = generate_simplex_grid(2, 3)
        dm = build_dofmap(mesh, 1)
        assert dm.n_dofs == mesh.n_vertices
        np.testing.assert_array_equal(dm.cell_dofs, mesh.cells)

    def test_p2_scalar_counts(self):
        mesh = generate_simplex_grid(2, 3)
        dm = build_dofmap(mesh, 2)
        n_edges = mesh.n_vertices + mesh.n_cells - 1  # Euler on a disc
        assert dm.n_dofs == mesh.n_vertices + n_edges

    def test_p2_tet_counts(self):
        mesh = generate_simplex_grid(3, 2)
        dm = build_dofmap(mesh, 2)
        assert dm.cell_nodes.shape[1] == 10

    def test_shared_edge_dofs(self):
        mesh = generate_simplex_grid(2, 2)
        dm = build_dofmap(mesh, 2)
        # every interior edge appears in exactly two cells with one dof id
        seen = {}
        local_edges = ((0, 1), (0, 2), (1, 2))
        for c in range(mesh.n_cells):
            for k, (a, b) in enumerate(local_edges):
                key = tuple(sorted((int(mesh.cells[c][a]), int(mesh.cells[c][b]))))
                dof = int(dm.cell_nodes[c][3 + k])
                assert seen.setdefault(key, dof) == dof

    def test_vector_expansion(self):
        mesh = generate_simplex_grid(2, 2)
        dm = build_dofmap(mesh, 1, value_dims=2)
        assert dm.n_dofs == 2 * mesh.n_vertices
        np.testing.assert_array_equal(dm.dof_components[:4], [0, 1, 0, 1])
        assert dm.cell_dofs.shape == (mesh.n_cells, 6)

    def test_boundary_dofs_by_marker(self):
        mesh = generate_simplex_grid(2, 2)
        dm = build_dofmap(mesh, 1)
        left = dm.boundary_dofs(1)
        assert all(abs(dm.node_coords[d][0]) < 1e-15 for d in left)

    def test_p2_boundary_includes_edge_nodes(self):
        mesh = generate_simplex_grid(2, 2)
        dm = build_dofmap(mesh, 2)
        bottom = dm.boundary_dofs(3)
        coords = dm.node_coords[bottom]
        assert len(bottom) == 5  # 3 vertices + 2 edge midpoints
        assert np.abs(coords[:, 1]).max() <= 1e-15

    def test_missing_marker_raises(self):
        mesh = generate_simplex_grid(2, 2)
        dm = build_dofmap(mesh, 1)
        with pytest.raises(ValueError, match="marker 9"):
            dm.boundary_dofs(9)


class TestAssembly:
    def test_reference_triangle_local_stiffness(self):
        mesh = reference_triangle()
        system = assemble(mesh, build_dofmap(mesh, 1), ProblemSpec("poisson"))
        expected = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]]
        np.testing.assert_allclose(system.a.to_dense(), expected, atol=1e-14)

    def test_stiffness_row_sums_vanish_without_bcs(self):
        mesh = wiggled_grid()
        system = assemble(mesh, build_dofmap(mesh, 1), ProblemSpec("poisson"))
        assert np.abs(system.a.to_dense().sum(axis=1)).max() <= 1e-12

    def test_assembled_matrix_symmetric(self):
        mesh = wiggled_grid()
        zero = lambda x: 0.0
        for degree in (1, 2):
            system = assemble(mesh, build_dofmap(mesh, degree),
                              ProblemSpec("poisson", dirichlet=((1, zero),)))
            dense = system.a.to_dense()
            assert np.abs(dense - dense.T).max() <= 1e-12 * np.abs(dense).max()

    def test_spd_after_dirichlet_elimination(self):
        mesh = wiggled_grid()
        for kind, vd in (("poisson", 1), ("elasticity", 2)):
            g = (lambda x: 0.0) if vd == 1 else (lambda x: np.zeros(2))
            spec = ProblemSpec(kind, dirichlet=tuple((m, g) for m in (1, 2, 3, 4)),
                               material={"E": 1.0, "nu": 0.3} if vd == 2 else None)
            system = assemble(mesh, build_dofmap(mesh, 1, value_dims=vd), spec)
            np.linalg.cholesky(system.a.to_dense())  # raises unless SPD

    def test_lame_parameters(self):
        mu, lam = lame_parameters(6.9e10, 0.33)
        assert mu == pytest.approx(6.9e10 / (2 * 1.33), rel=1e-12)
        assert lam == pytest.approx(6.9e10 * 0.33 / (1.33 * 0.34), rel=1e-12)
        assert mu == pytest.approx(2.59398e10, rel=1e-4)
        assert lam == pytest.approx(5.03454e10, rel=2e-3)

    def test_patch_test_reproduces_linear(self):
        linear = lambda x: 1.0 + 2.0 * x[0] + 3.0 * x[1]
        mesh = wiggled_grid()
        dm = build_dofmap(mesh, 1)
        spec = ProblemSpec("poisson", dirichlet=tuple((m, linear) for m in (1, 2, 3, 4)))
        system = assemble(mesh, dm, spec)
        u = spla.splu(system.a.to_scipy().tocsc()).solve(system.b)
        exact = interpolate(dm, linear)
        assert np.abs(u - exact).max() <= 1e-10

    def test_neumann_flux_recovers_linear(self):
        # u = x has zero laplacian, unit flux at x=1 and natural bcs on y-planes
        mesh = wiggled_grid()
        dm = build_dofmap(mesh, 1)
        spec = ProblemSpec("poisson",
                           dirichlet=((1, lambda x: 0.0),),
                           neumann=((2, lambda x: 1.0),))
        system = assemble(mesh, dm, spec)
        u = spla.splu(system.a.to_scipy().tocsc()).solve(system.b)
        assert np.abs(u - interpolate(dm, lambda x: x[0])).max() <= 1e-10

    def test_elasticity_rigid_translations_in_kernel(self):
        mesh = wiggled_grid()
        dm = build_dofmap(mesh, 1, value_dims=2)
        spec = ProblemSpec("elasticity", material={"E": 6.9e10, "nu": 0.33})
        system = assemble(mesh, dm, spec)
        dense = system.a.to_dense()
        norm = np.linalg.norm(dense)
        for comp in range(2):
            t = np.zeros(dm.n_dofs)
            t[comp::2] = 1.0
            assert np.linalg.norm(dense @ t) <= 1e-9 * norm

    def test_elasticity_traction_balances_reaction(self):
        # total reaction at the clamped face equals the applied traction
        mesh = generate_simplex_grid(2, 4)
        dm = build_dofmap(mesh, 1, value_dims=2)
        traction = 1.0e3
        spec = ProblemSpec("elasticity",
                           dirichlet=((1, lambda x: np.zeros(2)),),
                           neumann=((2, lambda x: np.array([traction, 0.0])),),
                           material={"E": 6.9e10, "nu": 0.33})
        system = assemble(mesh, dm, spec)
        # the load resultant equals traction * face length by partition of unity
        free = np.ones(dm.n_dofs, dtype=bool)
        free[system.dirichlet_dofs] = False
        assert system.b[free].sum() == pytest.approx(traction, rel=1e-12)

    def test_missing_marker_raises(self):
        mesh = reference_triangle()
        spec = ProblemSpec("poisson", dirichlet=((9, lambda x: 0.0),))
        with pytest.raises(ValueError, match="marker 9"):
            assemble(mesh, build_dofmap(mesh, 1), spec)

    def test_dirichlet_neumann_markers_disjoint(self):
        with pytest.raises(ValueError, match="both"):
            ProblemSpec("poisson", dirichlet=((1, lambda x: 0.0),),
                        neumann=((1, lambda x: 0.0),))

    def test_p2_reproduces_quadratic_in_3d(self):
        # P2 elements represent quadratics exactly; -lap(x^2+y^2+z^2) = -6
        quadratic = lambda x: x[0] ** 2 + x[1] ** 2 + x[2] ** 2
        mesh = generate_simplex_grid(3, 2)
        dm = build_dofmap(mesh, 2)
        spec = ProblemSpec("poisson", source=lambda x: -6.0,
                           dirichlet=tuple((m, quadratic) for m in range(1, 7)))
        system = assemble(mesh, dm, spec)
        u = spla.splu(system.a.to_scipy().tocsc()).solve(system.b)
        assert np.abs(u - interpolate(dm, quadratic)).max() <= 1e-10

    def test_elasticity_3d_rigid_translations_and_traction(self):
        mesh = generate_simplex_grid(3, 2)
        dm = build_dofmap(mesh, 1, value_dims=3)
        pre_bc = assemble(mesh, dm, ProblemSpec(
            "elasticity", material={"E": 6.9e10, "nu": 0.33}))
        dense = pre_bc.a.to_dense()
        for comp in range(3):
            t = np.zeros(dm.n_dofs)
            t[comp::3] = 1.0
            assert np.linalg.norm(dense @ t) <= 1e-9 * np.linalg.norm(dense)
        # traction resultant over the x=1 face (unit area) by partition of unity
        for degree in (1, 2):
            dmd = build_dofmap(mesh, degree, value_dims=3)
            loaded = assemble(mesh, dmd, ProblemSpec(
                "elasticity",
                dirichlet=((1, lambda x: np.zeros(3)),),
                neumann=((2, lambda x: np.array([1e3, 0.0, 0.0])),),
                material={"E": 6.9e10, "nu": 0.33}))
            free = np.ones(dmd.n_dofs, dtype=bool)
            free[loaded.dirichlet_dofs] = False
            assert loaded.b[free].sum() == pytest.approx(1e3, rel=1e-12)

    def test_p2_poisson_l2_convergence(self):
        exact = lambda x: np.sin(np.pi * x[0]) * np.sin(np.pi * x[1])
        source = lambda x: 2 * np.pi ** 2 * np.sin(np.pi * x[0]) * np.sin(np.pi * x[1])
        errors = []
        for n in (4, 8, 16):
            mesh = generate_simplex_grid(2, n)
            dm = build_dofmap(mesh, 2)
            spec = ProblemSpec("poisson", source=source,
                               dirichlet=tuple((m, lambda x: 0.0) for m in (1, 2, 3, 4)))
            system = assemble(mesh, dm, spec)
            u = spla.splu(system.a.to_scipy().tocsc()).solve(system.b)
            errors.append(l2_error(mesh, dm, u, exact))
        rates = [np.log2(errors[i] / errors[i + 1]) for i in range(2)]
        assert min(rates) >= 2.7


class TestInterpolate:
    def test_constant(self):
        dm = build_dofmap(generate_simplex_grid(2, 3), 2)
        np.testing.assert_array_equal(interpolate(dm, lambda x: 1.0), np.ones(dm.n_dofs))

    def test_linear_reproduced_on_p1(self):
        mesh = generate_simplex_grid(2, 3)
        dm = build_dofmap(mesh, 1)
        np.testing.assert_allclose(interpolate(dm, lambda x: x[0]),
                                   mesh.vertices[:, 0])

    def test_oscillatory_mode_range_and_boundary(self):
        mesh = generate_simplex_grid(2, 12)
        dm = build_dofmap(mesh, 1)
        u = interpolate(dm, lambda x: np.sin(10 * np.pi * x[0]) * np.sin(10 * np.pi * x[1]))
        assert np.abs(u).max() <= 1.0 + 1e-12
        boundary = sorted(mesh.boundary_vertices)
        assert np.abs(u[boundary]).max() <= 1e-12

    def test_vector_components(self):
        dm = build_dofmap(generate_simplex_grid(2, 2), 1, value_dims=2)
        u = interpolate(dm, lambda x: np.array([x[0], -x[1]]))
        coords = dm.node_coords
        np.testing.assert_allclose(u[0::2], coords[:, 0])
        np.testing.assert_allclose(u[1::2], -coords[:, 1])
