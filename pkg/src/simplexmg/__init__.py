"""Simplicial finite elements and non-nested geometric multigrid with a
global-local combined smoother for meshes containing low-quality cells."""

__version__ = "0.1.0"

from .mesh import (DegenerateCellError, QualityReport, RegionSet, SimplexMesh,
                   generate_simplex_grid, identify_regions, perturb_vertices,
                   quality_report, radius_ratio, radius_ratios)
from .msh_io import MshParseError, read_msh, write_msh
from .fem import (AssembledSystem, DofMap, ProblemSpec, assemble, build_dofmap,
                  interpolate, l2_error, lame_parameters, quadrature,
                  reference_basis)
from .sparse import (CsrMatrix, DenseFactor, EigenEstimateError,
                     IndefiniteOperatorError, NotPositiveDefiniteError, cg,
                     dense_factor, estimate_lambda_max, spmv, transpose,
                     triple_product)
from .transfer import (CellLocator, PointLocationError, Prolongation,
                       build_prolongation, coarsen_system, locate_point,
                       prolong_add, restrict_residual)
from .smoothers import (LocalCorrection, SgsSplitting, SmootherConfig,
                        ZeroDiagonalError, adjusted_lambda_max,
                        apply_local_correction, build_local_correction,
                        chebyshev_smooth, combined_smooth, dofs_for_regions,
                        jacobi_lambda_max, sgs_sweep)
from .mg import Hierarchy, Level, as_preconditioner, build_hierarchy, \
    solve_stationary, vcycle
from .experiments import (ClusterSpec, ExperimentConfig, ExperimentError,
                          LevelReport, RunReport, compare_to_direct, emit, run)
