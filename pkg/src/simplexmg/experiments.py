"""Experiment driver: mesh hierarchies with controlled low-quality clusters,
solver runs, and machine-readable reports.

Configurations are plain JSON documents.  Every level is either a generated
unit-square/cube grid (``{"n": ...}``) or an MSH file (``{"msh": ...}``).
Cluster specs are declarative (a target point plus a quality target) so the
same low-quality regions regenerate on every perturbed level; the random
seed only jitters the target-point selection, never the numerics.  Case
"A" perturbs every level, case "B" every level below the finest, and
"reference" none.
"""

from __future__ import annotations

import csv
import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse.linalg as spla

from . import plots
from .fem import ProblemSpec, interpolate
from .mesh import (DegenerateCellError, QualityReport, SimplexMesh,
                   generate_simplex_grid, perturb_vertices, quality_report,
                   radius_ratios)
from .mg import Hierarchy, as_preconditioner, build_hierarchy, solve_stationary, vcycle
from .msh_io import read_msh
from .smoothers import SmootherConfig
from .sparse import cg

DIRECT_SOLVE_SIZE_CAP = 50_000


class ExperimentError(RuntimeError):
    """A module error raised while running an experiment, with the stage named."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"experiment failed during {stage}: {cause}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    try:
        yield
    except ExperimentError:
        raise
    except Exception as err:
        raise ExperimentError(name, err) from err


@dataclass(frozen=True)
class ClusterSpec:
    """A low-quality cluster around ``center``: the nearest interior vertex
    and ``vertices - 1`` of its interior neighbours are each displaced to
    flatten one incident cell down to quality ``gamma``."""

    center: Tuple[float, ...]
    gamma: float = 1e-3
    vertices: int = 3

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"cluster gamma must lie in (0, 1), got {self.gamma}")
        if self.vertices < 1:
            raise ValueError(f"cluster needs at least one vertex, got {self.vertices}")


@dataclass
class ExperimentConfig:
    problem: str = "poisson"
    dim: int = 2
    element_degree: int = 1
    case: str = "reference"  # "reference" | "A" | "B"
    levels: Tuple[dict, ...] = ()
    clusters: Tuple[ClusterSpec, ...] = ()
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    local_correction: bool = False
    quality_threshold: float = 0.1
    mode: str = "stationary"  # "stationary" | "cg"
    rtol: float = 1e-10
    max_iterations: int = 100
    compare_direct_cycles: Optional[int] = None
    seed: int = 0
    boundary: str = "all"  # dirichlet planes: "all" | "x" | "y" | "z" | "clamp-pull-x"
    source: str = "zero"  # "zero" | "cos-sin" | "sin-sin" | "gaussian"
    initial_guess: str = "zero"  # "zero" | "sin-mode"
    traction: float = 1e3
    material: dict = field(default_factory=lambda: {"E": 6.9e10, "nu": 0.33})

    def __post_init__(self):
        if self.problem not in ("poisson", "elasticity"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.case not in ("reference", "A", "B"):
            raise ValueError(f"case must be 'reference', 'A' or 'B', got {self.case!r}")
        if self.mode == "cg-preconditioned":
            self.mode = "cg"
        if self.mode not in ("stationary", "cg"):
            raise ValueError(f"mode must be 'stationary' or 'cg', got {self.mode!r}")
        if len(self.levels) < 2:
            raise ValueError("an experiment needs at least 2 levels (fine to coarse)")
        if self.case == "B" and len(self.levels) < 2:
            raise ValueError("case B needs at least 2 levels")
        self.levels = tuple(dict(lv) for lv in self.levels)
        self.clusters = tuple(c if isinstance(c, ClusterSpec) else ClusterSpec(**c)
                              for c in self.clusters)
        if not isinstance(self.smoother, SmootherConfig):
            self.smoother = SmootherConfig(**self.smoother)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["levels"] = [dict(lv) for lv in self.levels]
        data["clusters"] = [{"center": list(c.center), "gamma": c.gamma,
                             "vertices": c.vertices} for c in self.clusters]
        return data


@dataclass
class LevelReport:
    level: int
    n_cells: int
    n_dofs: int
    gamma_min: float
    n_regions: int
    n_region_cells: int
    n_region_dofs: int
    lambda_max: Optional[float]
    lambda_max_adjusted: Optional[float]
    quality: QualityReport

    def scalars(self) -> dict:
        return {
            "level": self.level,
            "n_cells": self.n_cells,
            "n_dofs": self.n_dofs,
            "gamma_min": self.gamma_min,
            "n_regions": self.n_regions,
            "n_region_cells": self.n_region_cells,
            "n_region_dofs": self.n_region_dofs,
            "lambda_max": self.lambda_max,
            "lambda_max_adjusted": self.lambda_max_adjusted,
        }


@dataclass
class RunReport:
    config: dict
    residual_history: List[float]
    iterations_to_rtol: Optional[int]
    converged: bool
    levels: List[LevelReport]
    solution_error_vs_direct: Optional[float] = None


def _mean_edge_length(mesh: SimplexMesh) -> float:
    v = mesh.vertices[mesh.cells]
    return float(np.linalg.norm(v[:, 1, :] - v[:, 0, :], axis=1).mean())


def _apply_clusters(mesh: SimplexMesh, clusters: Sequence[ClusterSpec],
                    rng: np.random.Generator) -> SimplexMesh:
    """Degrade a group of cells near each cluster centre.

    For every cluster, the interior vertex nearest the (jittered) centre
    and the closest pairwise non-adjacent interior vertices are each moved
    toward the centroid of the opposite facet of one incident cell,
    stopping a short distance above the facet plane, which flattens that
    cell to the target quality.  Flattened cells are kept edge-disjoint
    across all clusters so that every squashed cell borders normal-sized
    cells and interpolation from the perturbed mesh never degenerates.
    """
    interior_mask = np.ones(mesh.n_vertices, dtype=bool)
    interior_mask[list(mesh.boundary_vertices)] = False
    if not interior_mask.any():
        raise ValueError("mesh has no interior vertices to perturb")
    h = _mean_edge_length(mesh)
    interior = np.nonzero(interior_mask)[0]

    adjacency = set()
    used_facets = set()
    perturbed = mesh
    for cluster in clusters:
        target = np.asarray(cluster.center, dtype=np.float64)
        target = target + rng.normal(0.0, h / 20.0, size=mesh.dim)
        by_distance = interior[np.lexsort(
            (interior, np.linalg.norm(mesh.vertices[interior] - target, axis=1)))]
        taken = 0
        for v in by_distance:
            v = int(v)
            if taken == cluster.vertices:
                break
            if v in adjacency:
                continue
            result = _flatten_at(perturbed, v, cluster.gamma, used_facets)
            if result is None:
                continue
            perturbed, facet = result
            used_facets.add(facet)
            taken += 1
            adjacency.update(int(u) for u in np.unique(mesh.cells[mesh.vertex_to_cells[v]]))
    return perturbed


def _flatten_at(mesh: SimplexMesh, v: int, gamma_target: float, used_facets):
    """Move vertex ``v`` close to the opposite facet of one incident cell.

    Returns ``(mesh, facet)`` or None when no admissible facet remains.
    The flattened cell's quality scales with the square of the remaining
    height, so a couple of calibration steps land at or below the target.
    """
    facet_key = None
    for c in mesh.vertex_to_cells[v]:
        key = tuple(sorted(int(u) for u in mesh.cells[c] if u != v))
        if key not in used_facets:
            facet_key = key
            break
    if facet_key is None:
        return None
    facet = mesh.vertices[list(facet_key)]
    centroid = facet.mean(axis=0)
    if mesh.dim == 2:
        tangent = facet[1] - facet[0]
        normal = np.array([-tangent[1], tangent[0]])
    else:
        normal = np.cross(facet[1] - facet[0], facet[2] - facet[0])
    normal /= np.linalg.norm(normal)
    height = abs(float((mesh.vertices[v] - facet[0]) @ normal))
    direction = centroid - mesh.vertices[v]

    eps = height * np.sqrt(gamma_target)
    best = None
    for _ in range(16):
        if eps >= 0.9 * height:
            break
        try:
            candidate = perturb_vertices(mesh, [(v, direction * (1.0 - eps / height))])
        except DegenerateCellError:
            eps *= 4.0  # a shorter move cannot invert previously squashed cells
            continue
        best = candidate
        touched = candidate.vertex_to_cells[v]
        gamma_min = float(radius_ratios(candidate)[touched].min())
        if gamma_min <= gamma_target:
            break
        eps *= 0.7 * np.sqrt(gamma_target / gamma_min)
    if best is None:
        return None
    return best, facet_key


def _level_perturbed(case: str, level: int) -> bool:
    if case == "A":
        return True
    if case == "B":
        return level >= 1
    return False


def build_meshes(config: ExperimentConfig) -> List[SimplexMesh]:
    """Level meshes fine to coarse, with case-dependent cluster perturbations."""
    meshes = []
    for idx, source in enumerate(config.levels):
        if "n" in source:
            mesh = generate_simplex_grid(config.dim, int(source["n"]))
        elif "msh" in source:
            mesh = read_msh(source["msh"])
            if mesh.dim != config.dim:
                raise ValueError(f"level {idx} mesh has dim {mesh.dim}, config says {config.dim}")
        else:
            raise ValueError(f"level {idx} must specify 'n' or 'msh'")
        if _level_perturbed(config.case, idx) and config.clusters:
            rng = np.random.default_rng([config.seed, idx])
            mesh = _apply_clusters(mesh, config.clusters, rng)
        meshes.append(mesh)
    return meshes


def make_problem(config: ExperimentConfig, fine_mesh: SimplexMesh) -> ProblemSpec:
    """Problem data from the config presets."""
    if config.problem == "elasticity":
        dim = config.dim
        clamp = lambda x: np.zeros(dim)
        pull = lambda x: np.concatenate([[config.traction], np.zeros(dim - 1)])
        return ProblemSpec("elasticity", source=None,
                           dirichlet=((1, clamp),), neumann=((2, pull),),
                           material=dict(config.material))

    source = _poisson_source(config.source, config.dim)
    markers = _dirichlet_markers(config.boundary, fine_mesh)
    zero = lambda x: 0.0
    return ProblemSpec("poisson", source=source,
                       dirichlet=tuple((m, zero) for m in markers))


def _poisson_source(name: str, dim: int):
    if name == "zero":
        return None
    if name == "cos-sin":
        return lambda x: 2.0 * np.pi ** 2 * np.cos(np.pi * x[0]) * np.sin(np.pi * x[1])
    if name == "sin-sin":
        return lambda x: dim * np.pi ** 2 * np.prod(np.sin(np.pi * x))
    if name == "gaussian":
        return lambda x: 10.0 * np.exp(-np.sum((x - 0.5) ** 2) / 0.02)
    raise ValueError(f"unknown source preset {name!r}")


def _dirichlet_markers(boundary: str, mesh: SimplexMesh) -> Tuple[int, ...]:
    present = tuple(int(m) for m in np.unique(mesh.facet_markers))
    if boundary == "all":
        return present
    axes = {"x": (1, 2), "y": (3, 4), "z": (5, 6)}
    if boundary not in axes:
        raise ValueError(f"unknown boundary preset {boundary!r}")
    markers = axes[boundary]
    missing = [m for m in markers if m not in present]
    if missing:
        raise ValueError(f"boundary markers {missing} not present in mesh")
    return markers


def _initial_guess(config: ExperimentConfig, hierarchy: Hierarchy) -> np.ndarray:
    if config.initial_guess == "zero":
        return np.zeros(hierarchy.fine.a.nrows)
    if config.initial_guess == "sin-mode":
        mode = lambda x: np.prod(np.sin(10.0 * np.pi * np.asarray(x)))
        dofmap = hierarchy.fine.dofmap
        if dofmap.value_dims == 1:
            return interpolate(dofmap, mode)
        return interpolate(dofmap, lambda x: np.full(dofmap.value_dims, mode(x)))
    raise ValueError(f"unknown initial guess preset {config.initial_guess!r}")


def _level_reports(hierarchy: Hierarchy, bins: int = 20) -> List[LevelReport]:
    reports = []
    for level in hierarchy.levels:
        quality = quality_report(level.mesh, bins=bins)
        region_cells = sum(len(r) for r in level.regions.omega_B_regions)
        if level.local_correction is not None:
            region_dofs = len(level.local_correction.covered_dofs)
        else:
            from .smoothers import dofs_for_regions
            region_dofs = sum(len(s) for s in
                              dofs_for_regions(level.dofmap, level.mesh, level.regions))
        reports.append(LevelReport(
            level=level.index,
            n_cells=level.mesh.n_cells,
            n_dofs=level.dofmap.n_dofs,
            gamma_min=quality.gamma_min,
            n_regions=len(level.regions.omega_B_regions),
            n_region_cells=region_cells,
            n_region_dofs=region_dofs,
            lambda_max=level.lambda_max,
            lambda_max_adjusted=level.lambda_max_adjusted,
            quality=quality,
        ))
    return reports


def build_experiment(config: ExperimentConfig) -> Hierarchy:
    with _stage("mesh construction"):
        meshes = build_meshes(config)
    with _stage("problem setup"):
        problem = make_problem(config, meshes[0])
    with _stage("hierarchy construction"):
        return build_hierarchy(meshes, problem, config.smoother,
                               config.local_correction, config.quality_threshold,
                               config.element_degree)


def run(config: ExperimentConfig) -> RunReport:
    """Execute one experiment and gather its report; deterministic given the seed."""
    hierarchy = build_experiment(config)
    u0 = _initial_guess(config, hierarchy)
    with _stage("solve"):
        if config.mode == "stationary":
            _, history = solve_stationary(hierarchy, hierarchy.rhs, u0,
                                          rtol=config.rtol,
                                          max_cycles=config.max_iterations)
        else:
            _, history = cg(hierarchy.fine.a, hierarchy.rhs,
                            precond=as_preconditioner(hierarchy),
                            rtol=config.rtol, maxit=config.max_iterations, x0=u0)
    hits = [k for k, r in enumerate(history) if r <= config.rtol]
    error_vs_direct = None
    if config.compare_direct_cycles is not None:
        with _stage("direct comparison"):
            error_vs_direct = _error_vs_direct(hierarchy, u0.copy(),
                                               config.compare_direct_cycles)
    with _stage("report assembly"):
        return RunReport(
            config=config.to_dict(),
            residual_history=[float(r) for r in history],
            iterations_to_rtol=hits[0] if hits else None,
            converged=bool(history[-1] <= config.rtol),
            levels=_level_reports(hierarchy),
            solution_error_vs_direct=error_vs_direct,
        )


def _error_vs_direct(hierarchy: Hierarchy, u: np.ndarray, cycles: int) -> float:
    n = hierarchy.fine.a.nrows
    if n > DIRECT_SOLVE_SIZE_CAP:
        raise ValueError(f"direct comparison capped at {DIRECT_SOLVE_SIZE_CAP} dofs, "
                         f"system has {n}")
    for _ in range(cycles):
        vcycle(hierarchy, hierarchy.rhs, u)
    direct = spla.splu(hierarchy.fine.a.to_scipy().tocsc()).solve(hierarchy.rhs)
    return float(np.linalg.norm(u - direct))


def compare_to_direct(config: ExperimentConfig, cycles: int) -> float:
    """l2 distance between the iterate after exactly ``cycles`` V-cycles and
    the directly factorized solution of the fine system."""
    hierarchy = build_experiment(config)
    return _error_vs_direct(hierarchy, _initial_guess(config, hierarchy), cycles)


def emit(report: RunReport, out_dir) -> dict:
    """Write the delimited outputs, the JSON summary and the rendered figures.

    Produces residuals.csv, quality.csv, summary.json plus residuals.png and
    quality.png.  Output (bar the timestamp) is byte-stable for equal
    config and seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    paths["residuals"] = out / "residuals.csv"
    with open(paths["residuals"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "relative_residual"])
        for k, r in enumerate(report.residual_history):
            writer.writerow([k, f"{r:.16e}"])

    paths["quality"] = out / "quality.csv"
    with open(paths["quality"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "cell", "gamma"])
        for lr in report.levels:
            for cell, gamma in enumerate(lr.quality.per_cell_gamma):
                writer.writerow([lr.level, cell, f"{gamma:.16e}"])

    from . import __version__
    summary = {
        "version": __version__,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "config": report.config,
        "converged": report.converged,
        "iterations_to_rtol": report.iterations_to_rtol,
        "final_relative_residual": report.residual_history[-1],
        "iterations": len(report.residual_history) - 1,
        "levels": [lr.scalars() for lr in report.levels],
        "solution_error_vs_direct": report.solution_error_vs_direct,
    }
    paths["summary"] = out / "summary.json"
    with open(paths["summary"], "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    paths["residual_plot"] = out / "residuals.png"
    plots.save_residual_history(report.residual_history, paths["residual_plot"])
    paths["quality_plot"] = out / "quality.png"
    plots.save_quality_histograms([(lr.level, lr.quality) for lr in report.levels],
                                  paths["quality_plot"])
    return {k: str(v) for k, v in paths.items()}
