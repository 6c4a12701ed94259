"""Smoother tests: Gauss-Seidel, Chebyshev, local correction, sandwich."""

import numpy as np
import pytest
from numpy.polynomial import chebyshev as cheb_poly

from simplexmg.fem import build_dofmap
from simplexmg.mesh import generate_simplex_grid, identify_regions
from simplexmg.smoothers import (LocalCorrection, SgsSplitting, SmootherConfig,
                                 ZeroDiagonalError, adjusted_lambda_max,
                                 apply_local_correction, build_local_correction,
                                 chebyshev_smooth, combined_smooth,
                                 dofs_for_regions, jacobi_lambda_max, sgs_sweep)
from simplexmg.sparse import CsrMatrix, NotPositiveDefiniteError


def random_spd(n, seed, scale=None):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n))
    return m @ m.T + (scale or n) * np.eye(n)


class TestDofsForRegions:
    def test_empty_region_set(self):
        mesh = generate_simplex_grid(2, 4)
        regions = identify_regions(mesh, 0.1)  # uniform grid, nothing below
        assert dofs_for_regions(build_dofmap(mesh, 1), mesh, regions) == []

    def test_one_triangle_region_p1(self):
        from simplexmg.mesh import RegionSet
        mesh = generate_simplex_grid(2, 2)
        dm = build_dofmap(mesh, 1)
        regions = RegionSet(frozenset({0}), (frozenset({0}),))
        [dofs] = dofs_for_regions(dm, mesh, regions)
        np.testing.assert_array_equal(dofs, np.sort(mesh.cells[0]))

    def test_one_triangle_region_p2_vector(self):
        from simplexmg.mesh import RegionSet
        mesh = generate_simplex_grid(2, 2)
        dm = build_dofmap(mesh, 2, value_dims=2)
        regions = RegionSet(frozenset({0}), (frozenset({0}),))
        [dofs] = dofs_for_regions(dm, mesh, regions)
        assert len(dofs) == 12  # 6 nodes times 2 components


class TestLocalCorrection:
    def test_full_index_set_reproduces_operator(self):
        a = random_spd(8, 0)
        lc = build_local_correction(CsrMatrix.from_dense(a), [np.arange(8)])
        r = np.random.default_rng(1).standard_normal(8)
        np.testing.assert_allclose(a @ apply_local_correction(lc, r), r, atol=1e-9)

    def test_diagonal_submatrix(self):
        a = CsrMatrix.from_dense(np.diag([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
        lc = build_local_correction(a, [np.array([2, 5])])
        sub = lc.regions[0][1]
        np.testing.assert_allclose(sub.solve(np.array([3.0, 6.0])), [1.0, 1.0])

    def test_matches_dense_submatrix_extraction(self):
        a = random_spd(10, 2)
        idx = np.array([1, 3, 4])
        lc = build_local_correction(CsrMatrix.from_dense(a), [idx])
        r = np.random.default_rng(3).standard_normal(10)
        expected = np.zeros(10)
        expected[idx] = np.linalg.solve(a[np.ix_(idx, idx)], r[idx])
        np.testing.assert_allclose(apply_local_correction(lc, r), expected, atol=1e-12)

    def test_zero_residual(self):
        lc = build_local_correction(CsrMatrix.from_dense(random_spd(6, 4)),
                                    [np.array([0, 1])])
        np.testing.assert_array_equal(apply_local_correction(lc, np.zeros(6)),
                                      np.zeros(6))

    def test_correction_vanishes_outside_regions(self):
        a = random_spd(9, 5)
        lc = build_local_correction(CsrMatrix.from_dense(a), [np.array([2, 3])])
        out = apply_local_correction(lc, np.ones(9))
        outside = np.setdiff1d(np.arange(9), [2, 3])
        np.testing.assert_array_equal(out[outside], np.zeros(7))

    def test_local_residual_eliminated_single_region(self):
        a = random_spd(12, 6)
        idx = np.array([4, 5, 6, 7])
        lc = build_local_correction(CsrMatrix.from_dense(a), [idx])
        r = np.random.default_rng(7).standard_normal(12)
        r_new = r - a @ apply_local_correction(lc, r)
        assert np.abs(r_new[idx]).max() <= 1e-10 * np.linalg.norm(r)

    def test_local_residual_eliminated_uncoupled_regions(self):
        blocks = [random_spd(4, s, scale=6) for s in (8, 9, 10)]
        a = np.zeros((12, 12))
        for k, b in enumerate(blocks):
            a[4 * k:4 * k + 4, 4 * k:4 * k + 4] = b
        sets = [np.arange(4), np.arange(4, 8)]
        lc = build_local_correction(CsrMatrix.from_dense(a), sets)
        r = np.random.default_rng(11).standard_normal(12)
        r_new = r - a @ apply_local_correction(lc, r)
        for idx in sets:
            assert np.abs(r_new[idx]).max() <= 1e-10 * np.linalg.norm(r)

    def test_non_spd_block_reported(self):
        a = np.eye(5)
        a[1, 1] = -1.0
        with pytest.raises(NotPositiveDefiniteError, match="not SPD"):
            build_local_correction(CsrMatrix.from_dense(a), [np.array([0, 1])])

    def test_overlapping_regions_rejected(self):
        a = CsrMatrix.from_dense(random_spd(6, 12))
        with pytest.raises(ValueError, match="overlaps"):
            build_local_correction(a, [np.array([0, 1]), np.array([1, 2])])

    def test_dimension_mismatch(self):
        lc = build_local_correction(CsrMatrix.from_dense(random_spd(5, 13)),
                                    [np.array([0])])
        with pytest.raises(ValueError, match="does not match"):
            apply_local_correction(lc, np.zeros(4))


class TestSgs:
    def test_diagonal_matrix_exact_in_one_sweep(self):
        a = CsrMatrix.from_dense(np.diag([2.0, 4.0, 8.0]))
        b = np.array([2.0, 4.0, 8.0])
        u = sgs_sweep(a, b, np.zeros(3), 1)
        np.testing.assert_allclose(u, np.ones(3))

    def test_exact_solution_is_fixed_point(self):
        a_dense = random_spd(10, 20)
        a = CsrMatrix.from_dense(a_dense)
        x = np.random.default_rng(21).standard_normal(10)
        b = a_dense @ x
        u = sgs_sweep(a, b, x.copy(), 3)
        np.testing.assert_allclose(u, x, atol=1e-12)

    def test_hand_iterated_2x2(self):
        a = CsrMatrix.from_dense(np.array([[2.0, 1.0], [1.0, 2.0]]))
        b = np.array([1.0, 1.0])
        split = SgsSplitting(a)
        forward = split.forward(b, np.zeros(2))
        np.testing.assert_allclose(forward, [0.5, 0.25])
        backward = split.backward(b, forward)
        np.testing.assert_allclose(backward, [0.375, 0.25])
        u = sgs_sweep(a, b, np.zeros(2), 1)
        np.testing.assert_allclose(u, [0.375, 0.25])

    def test_zero_diagonal_names_row(self):
        a = CsrMatrix.from_dense(np.array([[1.0, 1.0], [1.0, 0.0]]))
        with pytest.raises(ZeroDiagonalError, match="row 1"):
            sgs_sweep(a, np.ones(2), np.zeros(2), 1)

    def test_converges_on_spd(self):
        a_dense = random_spd(15, 22)
        a = CsrMatrix.from_dense(a_dense)
        b = np.ones(15)
        u = np.zeros(15)
        sgs_sweep(a, b, u, 60)
        assert np.linalg.norm(b - a_dense @ u) <= 1e-8 * np.linalg.norm(b)


class TestChebyshev:
    def test_exact_solution_is_fixed_point(self):
        a_dense = random_spd(9, 30)
        a = CsrMatrix.from_dense(a_dense)
        x = np.random.default_rng(31).standard_normal(9)
        cfg = SmootherConfig("chebyshev", 3, lambda_max=jacobi_lambda_max(a))
        u = chebyshev_smooth(a, a_dense @ x, x.copy(), 3, cfg)
        np.testing.assert_allclose(u, x, atol=1e-12)

    def test_scaled_identity_exact_with_collapsed_interval(self):
        a = CsrMatrix.from_dense(5.0 * np.eye(6))
        cfg = SmootherConfig("chebyshev", 1, lambda_max=1.0, lambda_min_fraction=1.0)
        b = np.arange(6.0)
        u = chebyshev_smooth(a, b, np.zeros(6), 1, cfg)
        np.testing.assert_allclose(u, b / 5.0, atol=1e-14)

    def test_error_propagation_matches_minmax_polynomial(self):
        # the iteration must realize the shifted-scaled Chebyshev polynomial
        # of the Jacobi-preconditioned operator, checked by eigendecomposition
        a_dense = random_spd(20, 32)
        a = CsrMatrix.from_dense(a_dense)
        d = np.diag(a_dense)
        scaled = a_dense / np.sqrt(np.outer(d, d))
        evals, evecs = np.linalg.eigh(scaled)
        lam_max = evals.max()
        rng = np.random.default_rng(33)
        x = rng.standard_normal(20)
        b = a_dense @ x
        for nu in (1, 2, 4):
            cfg = SmootherConfig("chebyshev", nu, lambda_max=lam_max)
            alpha, beta = 0.1 * lam_max, lam_max
            t_nu = [0] * nu + [1]
            denom = cheb_poly.chebval((beta + alpha) / (beta - alpha), t_nu)
            poly = cheb_poly.chebval((beta + alpha - 2 * evals) / (beta - alpha),
                                     t_nu) / denom
            u = rng.standard_normal(20)
            e0 = np.sqrt(d) * (u - x)
            predicted = (evecs @ (poly * (evecs.T @ e0))) / np.sqrt(d)
            chebyshev_smooth(a, b, u, nu, cfg)
            assert np.abs((u - x) - predicted).max() <= 1e-10
            # and the reduction respects the min-max bound (within 10%)
            reduction = np.linalg.norm(np.sqrt(d) * (u - x)) / np.linalg.norm(e0)
            assert reduction <= 1.1 * np.abs(poly).max()

    def test_requires_lambda_max(self):
        a = CsrMatrix.identity(3)
        with pytest.raises(ValueError, match="lambda_max"):
            chebyshev_smooth(a, np.ones(3), np.zeros(3), 1, SmootherConfig("chebyshev", 1))


class TestAdjustedLambdaMax:
    def test_empty_exclusion_equals_plain_estimate(self):
        a = CsrMatrix.from_dense(random_spd(12, 40))
        assert adjusted_lambda_max(a, []) == pytest.approx(jacobi_lambda_max(a), rel=1e-10)

    def test_excluding_dominant_entry(self):
        a = CsrMatrix.from_dense(np.diag([1.0, 100.0]))
        # after Jacobi scaling both eigenvalues are 1; use unscaled content via
        # a non-diagonal block so the exclusion actually matters
        assert adjusted_lambda_max(a, [np.array([1])]) == pytest.approx(1.0, abs=1e-8)

    def test_matches_dense_eigensolver_on_submatrix(self):
        a_dense = random_spd(20, 41)
        excluded = np.array([0, 3, 7, 11])
        keep = np.setdiff1d(np.arange(20), excluded)
        sub = a_dense[np.ix_(keep, keep)]
        d = np.diag(sub)
        exact = np.linalg.eigvalsh(sub / np.sqrt(np.outer(d, d))).max()
        est = adjusted_lambda_max(CsrMatrix.from_dense(a_dense), [excluded])
        assert abs(est - exact) <= 1e-6 * exact

    def test_interlacing_never_exceeds_full_estimate(self):
        for seed in range(6):
            a_dense = random_spd(16, 50 + seed)
            a = CsrMatrix.from_dense(a_dense)
            rng = np.random.default_rng(seed)
            excluded = rng.choice(16, size=5, replace=False)
            assert adjusted_lambda_max(a, [excluded]) <= \
                jacobi_lambda_max(a) * (1.0 + 1e-6)

    def test_rejects_full_exclusion(self):
        a = CsrMatrix.identity(4)
        with pytest.raises(ValueError, match="whole operator"):
            adjusted_lambda_max(a, [np.arange(4)])


def materialize_combined(a, lc, cfg):
    n = a.nrows
    split = SgsSplitting(a) if cfg.kind == "sgs" else None
    cols = []
    for j in range(n):
        u = np.zeros(n)
        b = np.zeros(n)
        b[j] = 1.0
        combined_smooth(a, b, u, lc, cfg, split)
        cols.append(u)
    return np.column_stack(cols)


def dense_sandwich_formula(a_dense, region_sets, s_global):
    """Explicit sandwich operator 2Sc - Sc A Sc + (I - Sc A) Sg (I - A Sc)."""
    n = len(a_dense)
    s_c = np.zeros((n, n))
    for idx in region_sets:
        inc = np.zeros((n, len(idx)))
        inc[idx, np.arange(len(idx))] = 1.0
        s_c += inc @ np.linalg.inv(a_dense[np.ix_(idx, idx)]) @ inc.T
    eye = np.eye(n)
    return (2 * s_c - s_c @ a_dense @ s_c
            + (eye - s_c @ a_dense) @ s_global @ (eye - a_dense @ s_c))


class TestCombinedSmooth:
    def setup_method(self):
        self.a_dense = random_spd(24, 60)
        self.a = CsrMatrix.from_dense(self.a_dense)
        self.regions = [np.array([2, 3, 4]), np.array([10, 11, 15])]
        self.lc = build_local_correction(self.a, self.regions)

    def test_no_regions_reduces_to_global_smoother(self):
        rng = np.random.default_rng(61)
        b = rng.standard_normal(24)
        cfg = SmootherConfig("sgs", 2)
        u1 = combined_smooth(self.a, b, np.zeros(24), None, cfg)
        u2 = sgs_sweep(self.a, b, np.zeros(24), 2)
        np.testing.assert_array_equal(u1, u2)
        empty = LocalCorrection((), 24)
        u3 = combined_smooth(self.a, b, np.zeros(24), empty, cfg)
        np.testing.assert_array_equal(u3, u2)

    def test_full_coverage_is_exact(self):
        lc = build_local_correction(self.a, [np.arange(24)])
        b = np.random.default_rng(62).standard_normal(24)
        u = combined_smooth(self.a, b, np.zeros(24), lc, SmootherConfig("sgs", 1))
        np.testing.assert_allclose(self.a_dense @ u, b, atol=1e-8)

    def test_matches_dense_operator_formula(self):
        # independent oracle: forward/backward sweep operators by inversion
        d = np.diag(np.diag(self.a_dense))
        lower = np.tril(self.a_dense, -1)
        upper = np.triu(self.a_dense, 1)
        s_f = np.linalg.inv(d + lower)
        s_b = np.linalg.inv(d + upper)
        s_g = s_b + s_f - s_b @ self.a_dense @ s_f
        expected = dense_sandwich_formula(self.a_dense, self.regions, s_g)
        result = materialize_combined(self.a, self.lc, SmootherConfig("sgs", 1))
        assert np.abs(result - expected).max() <= 1e-11 * np.abs(expected).max()

    @pytest.mark.parametrize("cfg_builder", [
        lambda a: SmootherConfig("sgs", 1),
        lambda a: SmootherConfig("sgs", 2),
        lambda a: SmootherConfig("chebyshev", 3, lambda_max=jacobi_lambda_max(a)),
    ])
    def test_sandwich_operator_symmetric(self, cfg_builder):
        for seed in (70, 71):
            a_dense = random_spd(30, seed)
            a = CsrMatrix.from_dense(a_dense)
            lc = build_local_correction(a, [np.array([1, 2, 3]), np.array([8, 9])])
            mat = materialize_combined(a, lc, cfg_builder(a))
            assert np.abs(mat - mat.T).max() <= 1e-11 * np.abs(mat).max()
