"""Hierarchy construction and the multigrid V-cycle.

The hierarchy assembles the fine-level system once, builds interpolation
prolongations between adjacent non-nested levels and forms every coarse
operator by Galerkin coarsening.  The V-cycle smooths with the configured
global smoother, optionally wrapped in the local-correction sandwich on
levels that contain low-quality regions, and solves the coarsest system
directly.  It can run as a stationary solver or serve as a symmetric CG
preconditioner.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .fem import AssembledSystem, DofMap, ProblemSpec, assemble, build_dofmap
from .mesh import RegionSet, SimplexMesh, identify_regions
from .smoothers import (LocalCorrection, SgsSplitting, SmootherConfig,
                        adjusted_lambda_max, build_local_correction,
                        combined_smooth, dofs_for_regions, jacobi_lambda_max)
from .sparse import CsrMatrix, DenseFactor, dense_factor
from .transfer import Prolongation, build_prolongation, coarsen_system

LAMBDA_TOL = 1e-8


@dataclass
class Level:
    """One grid level: geometry, operator, transfer and smoother state."""

    index: int
    mesh: SimplexMesh
    dofmap: DofMap
    a: CsrMatrix
    prolongation: Optional[Prolongation]  # from the next-coarser level; None on the coarsest
    smoother: SmootherConfig
    regions: RegionSet
    local_correction: Optional[LocalCorrection]
    sgs: Optional[SgsSplitting]
    lambda_max: Optional[float] = None
    lambda_max_adjusted: Optional[float] = None

    def smooth(self, b: np.ndarray, u: np.ndarray) -> np.ndarray:
        return combined_smooth(self.a, b, u, self.local_correction,
                               self.smoother, self.sgs)


@dataclass
class Hierarchy:
    """Grid levels ordered fine to coarse plus the factored coarsest operator."""

    levels: List[Level]
    coarse_factor: DenseFactor
    system: AssembledSystem

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def fine(self) -> Level:
        return self.levels[0]

    @property
    def rhs(self) -> np.ndarray:
        return self.system.b


def build_hierarchy(meshes: Sequence[SimplexMesh], problem: ProblemSpec,
                    smoother: SmootherConfig, use_local_correction: bool,
                    quality_threshold: float = 0.1,
                    element_degree: int = 1) -> Hierarchy:
    """Assemble the fine system and build the full Galerkin hierarchy.

    ``meshes`` are ordered fine to coarse and must share the boundary.  Low
    quality regions are identified per level at ``quality_threshold``; with
    ``use_local_correction`` their local systems are factored for the
    sandwich smoother.  Chebyshev smoothers get a per-level eigenvalue
    estimate (the adjusted variant excludes region dofs when regions exist).
    """
    if len(meshes) < 2:
        raise ValueError(f"a hierarchy needs at least 2 meshes, got {len(meshes)}")
    dims = {m.dim for m in meshes}
    if len(dims) != 1:
        raise ValueError("all meshes must share the same dimension")

    value_dims = problem.value_dims(meshes[0].dim)
    dofmaps = [build_dofmap(m, element_degree, value_dims) for m in meshes]
    system = assemble(meshes[0], dofmaps[0], problem)

    operators = [system.a]
    prolongations: List[Prolongation] = []
    for l in range(len(meshes) - 1):
        p = build_prolongation(dofmaps[l], meshes[l + 1], dofmaps[l + 1])
        p = replace(p, fine_level=l, coarse_level=l + 1)
        prolongations.append(p)
        operators.append(coarsen_system(operators[l], p))

    levels = []
    for l, (mesh, dofmap, a) in enumerate(zip(meshes, dofmaps, operators)):
        regions = identify_regions(mesh, quality_threshold)
        dof_sets = dofs_for_regions(dofmap, mesh, regions)
        correction = None
        if use_local_correction and dof_sets:
            correction = build_local_correction(a, dof_sets)

        lam = lam_adj = None
        cfg = smoother
        if smoother.kind == "chebyshev":
            lam = jacobi_lambda_max(a, LAMBDA_TOL)
            lam_adj = (adjusted_lambda_max(a, dof_sets, LAMBDA_TOL)
                       if dof_sets else lam)
            cfg = replace(smoother, lambda_max=lam_adj if smoother.adjusted else lam)

        sgs = SgsSplitting(a) if smoother.kind == "sgs" and l < len(meshes) - 1 else None
        prol = prolongations[l] if l < len(prolongations) else None
        levels.append(Level(l, mesh, dofmap, a, prol, cfg, regions, correction,
                            sgs, lam, lam_adj))

    coarse_factor = dense_factor(operators[-1].to_dense())
    return Hierarchy(levels, coarse_factor, system)


def vcycle(h: Hierarchy, b: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One V-cycle for the fine-level system; updates ``u`` in place.

    Descends with pre-smoothing and residual restriction (coarse initial
    guesses are zero), solves the coarsest level directly, then ascends
    with prolongated corrections and post-smoothing.
    """
    n_levels = h.n_levels
    b_levels: List[np.ndarray] = [np.asarray(b, dtype=np.float64)]
    u_levels: List[np.ndarray] = [u]

    for l in range(n_levels - 1):
        level = h.levels[l]
        level.smooth(b_levels[l], u_levels[l])
        residual = b_levels[l] - level.a.to_scipy() @ u_levels[l]
        b_levels.append(level.prolongation.matrix.to_scipy().T @ residual)
        u_levels.append(np.zeros(h.levels[l + 1].a.nrows))

    u_levels[-1][:] = h.coarse_factor.solve(b_levels[-1])

    for l in range(n_levels - 2, -1, -1):
        level = h.levels[l]
        u_levels[l] += level.prolongation.matrix.to_scipy() @ u_levels[l + 1]
        level.smooth(b_levels[l], u_levels[l])
    return u


def solve_stationary(h: Hierarchy, b: np.ndarray, u0: np.ndarray,
                     rtol: float = 1e-10, max_cycles: int = 100) -> Tuple[np.ndarray, List[float]]:
    """Repeat V-cycles until the relative residual drops below ``rtol``.

    Returns ``(u, history)`` where ``history[k]`` is the relative residual
    after k cycles (entry 0 is the initial residual).  Residuals are
    measured against ||b||, or against the initial residual when b = 0.
    """
    a = h.fine.a.to_scipy()
    u = np.array(u0, dtype=np.float64)
    residual = np.linalg.norm(b - a @ u)
    norm_b = np.linalg.norm(b)
    denom = norm_b if norm_b > 0 else residual
    if denom == 0.0:
        return u, [0.0]
    history = [float(residual / denom)]
    for _ in range(max_cycles):
        if history[-1] <= rtol:
            break
        vcycle(h, b, u)
        history.append(float(np.linalg.norm(b - a @ u) / denom))
    return u, history


def as_preconditioner(h: Hierarchy) -> Callable[[np.ndarray], np.ndarray]:
    """The map r -> vcycle(0; r): linear, and symmetric for symmetric smoothers."""
    def apply(r: np.ndarray) -> np.ndarray:
        z = np.zeros_like(r)
        vcycle(h, r, z)
        return z
    return apply
