"""Feasible-start constrained optimisation and the multiresolution driver.

The equality constraints are sparse and homogeneous with a trivially
feasible origin, so instead of an interior-point method the solver walks the
null space directly: gradients and limited-memory quasi-Newton directions
are projected onto ker(A) (Schur-complement CG from :mod:`constraint`),
which keeps every iterate feasible to solver precision by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from .constraint import ConstraintSystem, MaskRegion, build_constraint_system
from .errors import ConfigError, SolverError
from .field import ClassicalSVF, ControlGrid, DivConformingSVF
from .flow import EulerConfig
from .io_image import Image3D
from .metrics import ObjectiveConfig, RegistrationObjective


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    gradient_tolerance: float = 1e-5
    sufficient_decrease: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 40
    history: int = 10
    pyramid_levels: int = 3
    euler_steps: int = 8
    feasibility_tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.gradient_tolerance <= 0 or self.feasibility_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if not 0 < self.backtrack_factor < 1:
            raise ConfigError("backtrack_factor must be in (0, 1)")
        EulerConfig(steps=self.euler_steps)  # validates power of two


@dataclass
class SolveReport:
    converged: bool = False
    iterations: int = 0
    objective_trace: list = dc_field(default_factory=list)
    gradient_trace: list = dc_field(default_factory=list)
    constraint_trace: list = dc_field(default_factory=list)
    final_objective: float = np.nan
    final_constraint_residual: float = 0.0
    max_constraint_residual: float = 0.0
    line_search_failed: bool = False
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "objective_trace": [float(v) for v in self.objective_trace],
            "gradient_trace": [float(v) for v in self.gradient_trace],
            "constraint_trace": [float(v) for v in self.constraint_trace],
            "final_objective": float(self.final_objective),
            "final_constraint_residual": float(self.final_constraint_residual),
            "max_constraint_residual": float(self.max_constraint_residual),
            "line_search_failed": self.line_search_failed,
            "message": self.message,
        }


class _TwoLoop:
    """Limited-memory inverse-Hessian application (standard two-loop)."""

    def __init__(self, history: int):
        self.history = history
        self.s: list[np.ndarray] = []
        self.y: list[np.ndarray] = []

    def reset(self) -> None:
        self.s.clear()
        self.y.clear()

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        sy = float(s @ y)
        if sy <= 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        self.s.append(s)
        self.y.append(y)
        if len(self.s) > self.history:
            self.s.pop(0)
            self.y.pop(0)
        return True

    def apply(self, g: np.ndarray) -> np.ndarray:
        if not self.s:
            return g.copy()
        q = g.copy()
        alphas = []
        rhos = [1.0 / (s @ y) for s, y in zip(self.s, self.y)]
        for s, y, rho in zip(reversed(self.s), reversed(self.y), reversed(rhos)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        gamma = (self.s[-1] @ self.y[-1]) / (self.y[-1] @ self.y[-1])
        q *= gamma
        for (s, y, rho), a in zip(zip(self.s, self.y, rhos), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return q


def _as_value_grad(objective):
    if hasattr(objective, "value_grad"):
        value_grad = objective.value_grad
        value = objective.value if hasattr(objective, "value") else (
            lambda t: value_grad(t)[0]
        )
    else:
        value_grad = objective
        value = lambda t: objective(t)[0]  # noqa: E731
    return value_grad, value


def solve_constrained(
    objective,
    system: ConstraintSystem,
    theta0: np.ndarray,
    cfg: SolverConfig = SolverConfig(),
) -> tuple[np.ndarray, SolveReport]:
    """Minimise over {theta : A theta = 0} from a feasible start.

    ``objective`` is either a callable returning ``(value, gradient)`` or an
    object with ``value_grad`` (and optionally a cheaper ``value``) methods.
    Every iterate stays feasible: search directions live in ker(A) and the
    parameters are re-projected whenever accumulated drift approaches the
    feasibility tolerance.
    """
    value_grad, value = _as_value_grad(objective)
    theta = np.asarray(theta0, dtype=np.float64).copy()
    report = SolveReport()

    res0 = system.residual_inf(theta)
    if res0 > 1e-12 * max(1.0, float(np.max(np.abs(theta))) if theta.size else 1.0):
        raise SolverError(
            f"infeasible start: ||A theta0||_inf = {res0:.3e} exceeds 1e-12"
        )
    report.max_constraint_residual = res0

    def project(v):
        return system.project_nullspace(v, tol_abs=0.5 * cfg.feasibility_tol)

    memory = _TwoLoop(cfg.history)
    f, g = value_grad(theta)
    pg = project(g)
    best = (f, theta.copy())

    for it in range(cfg.max_iterations):
        pg_norm = float(np.max(np.abs(pg))) if pg.size else 0.0
        res = system.residual_inf(theta)
        report.objective_trace.append(f)
        report.gradient_trace.append(pg_norm)
        report.constraint_trace.append(res)
        report.max_constraint_residual = max(report.max_constraint_residual, res)
        if pg_norm <= cfg.gradient_tolerance:
            report.converged = True
            report.message = "projected gradient below tolerance"
            break

        d = -memory.apply(pg)
        if not system.is_empty:
            d = project(d)
        slope = float(d @ g)
        if not np.isfinite(slope) or slope >= -1e-14 * np.linalg.norm(d) * pg_norm:
            memory.reset()
            d = -pg
            slope = float(d @ g)

        alpha = 1.0 if memory.s else min(1.0, 1.0 / max(1.0, np.linalg.norm(pg)))
        accepted = False
        for _ in range(cfg.max_backtracks):
            trial = theta + alpha * d
            f_trial = value(trial)
            if np.isfinite(f_trial) and f_trial <= f + cfg.sufficient_decrease * alpha * slope:
                accepted = True
                break
            alpha *= cfg.backtrack_factor
        if not accepted:
            report.line_search_failed = True
            report.message = "line search failed; returning best iterate"
            break

        theta_new = theta + alpha * d
        if system.residual_inf(theta_new) > 0.5 * cfg.feasibility_tol:
            theta_new = project(theta_new)
        f_new, g_new = value_grad(theta_new)
        pg_new = project(g_new)
        memory.push(theta_new - theta, pg_new - pg)
        theta, f, g, pg = theta_new, f_new, g_new, pg_new
        if f < best[0]:
            best = (f, theta.copy())
        report.iterations = it + 1
    else:
        report.message = "iteration cap reached"

    if best[0] < f:
        theta = best[1]
        f = best[0]
    report.final_objective = f
    report.final_constraint_residual = system.residual_inf(theta)
    report.max_constraint_residual = max(
        report.max_constraint_residual, report.final_constraint_residual
    )
    return theta, report


# ---------------------------------------------------------------------------
# Multiresolution pyramid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Control-grid request for registration: finest knot spacing in mm."""

    spacing: float = 5.0
    parameterization: str = "div_conforming"  # or "classical"
    classical_order: int = 3
    divergence_order: int = 2

    def __post_init__(self) -> None:
        if self.spacing <= 0:
            raise ConfigError("grid spacing must be positive")
        if self.parameterization not in ("div_conforming", "classical"):
            raise ConfigError(f"unknown parameterization {self.parameterization!r}")


@dataclass
class RegistrationReport:
    levels: list = dc_field(default_factory=list)
    final_constraint_residual: float = 0.0
    constrained: bool = False
    grid_cells: tuple = ()
    grid_spacing: tuple = ()

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "final_constraint_residual": float(self.final_constraint_residual),
            "constrained": self.constrained,
            "grid_cells": list(self.grid_cells),
            "grid_spacing": list(self.grid_spacing),
        }

    def write_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def downsample_image(img: Image3D, factor: int) -> Image3D:
    """Gaussian anti-aliasing then decimation by an integer factor."""
    if factor == 1:
        return img
    sigma = 0.5 * np.sqrt(factor**2 - 1.0)
    smoothed = ndimage.gaussian_filter(img.data, sigma, mode="nearest")
    data = smoothed[::factor, ::factor, ::factor]
    spacing = tuple(s * factor for s in img.spacing)
    return Image3D(origin=img.origin, spacing=spacing, data=data)


def _grid_chain(img: Image3D, spec: GridSpec, levels: int) -> list[ControlGrid]:
    """Nested grids, finest first; level l has spacing spec.spacing * 2**l."""
    extent = (np.asarray(img.dims) - 1) * np.asarray(img.spacing)
    coarse_h = spec.spacing * 2 ** (levels - 1)
    cells = np.maximum(2, np.ceil(extent / coarse_h + 1e-9).astype(int))
    margin = cells * coarse_h - extent
    origin = np.asarray(img.origin) - 0.5 * margin
    coarsest = ControlGrid(
        origin=tuple(origin),
        spacing=(coarse_h,) * 3,
        cells=tuple(cells),
        divergence_order=spec.divergence_order,
    )
    chain = [coarsest]
    for _ in range(levels - 1):
        chain.append(chain[-1].refined())
    return chain[::-1]


def _template(grid: ControlGrid, spec: GridSpec):
    if spec.parameterization == "div_conforming":
        return DivConformingSVF.zeros(grid)
    return ClassicalSVF.zeros(grid, order=spec.classical_order)


def register_pyramid(
    img1: Image3D,
    img2: Image3D,
    mask: MaskRegion | None,
    obj_cfg: ObjectiveConfig = ObjectiveConfig(),
    solver_cfg: SolverConfig = SolverConfig(),
    grid_spec: GridSpec = GridSpec(),
    constrained: bool = True,
):
    """Coarse-to-fine symmetric registration.

    Images are smoothed and decimated per level; the control grid is refined
    by exact spline subdivision between levels, and constraints are
    reassembled from the (full-resolution) mask against each level's grid.
    Returns the finest-level field and a :class:`RegistrationReport`.
    """
    if not img1.geometry.matches(img2.geometry):
        raise ConfigError("images must share a voxel geometry")
    if constrained:
        if grid_spec.parameterization != "div_conforming":
            raise ConfigError(
                "constraints require the div_conforming parameterization"
            )
        if mask is None or mask.is_empty:
            raise ConfigError("constrained registration requires a non-empty mask")

    levels = solver_cfg.pyramid_levels
    grids = _grid_chain(img1, grid_spec, levels)
    report = RegistrationReport(constrained=constrained)
    euler = EulerConfig(steps=solver_cfg.euler_steps)

    svf = None
    for level in range(levels - 1, -1, -1):
        factor = 2**level
        i1 = downsample_image(img1, factor)
        i2 = downsample_image(img2, factor)
        grid = grids[level]
        template = _template(grid, grid_spec)
        system = (
            build_constraint_system(grid, mask)
            if constrained
            else ConstraintSystem.empty(grid)
        )
        if svf is None:
            theta0 = template.coefficient_vector()
        else:
            theta0 = svf.refined().coefficient_vector()
            if constrained:
                theta0 = system.project_nullspace(
                    theta0, tol_abs=0.5 * solver_cfg.feasibility_tol
                )
        objective = RegistrationObjective(template, i1, i2, obj_cfg, euler)
        theta, solve_report = solve_constrained(objective, system, theta0, solver_cfg)
        svf = template.with_coefficients(theta)
        report.levels.append(
            {
                "level": level,
                "image_dims": list(i1.dims),
                "grid_cells": list(grid.cells),
                "n_constraints": int(system.n_constraints),
                "n_parameters": int(template.n_parameters),
                **solve_report.to_dict(),
            }
        )

    final_system = (
        build_constraint_system(grids[0], mask)
        if constrained
        else ConstraintSystem.empty(grids[0])
    )
    report.final_constraint_residual = final_system.residual_inf(
        svf.coefficient_vector()
    )
    report.grid_cells = grids[0].cells
    report.grid_spacing = grids[0].spacing
    return svf, report
