import numpy as np
import numpy.testing as npt
import pytest
import scipy.sparse as sp

from divreg.constraint import ConstraintSystem, build_constraint_system
from divreg.errors import ConfigError, SolverError
from divreg.field import ControlGrid, DivConformingSVF
from divreg.flow import EulerConfig, exponential_euler
from divreg.io_image import (
    Image3D,
    PhantomSpec,
    make_ball_mask,
    make_ground_truth_svf,
    make_phantom,
)
from divreg.metrics import ObjectiveConfig
from divreg.solver import (
    GridSpec,
    SolverConfig,
    downsample_image,
    register_pyramid,
    solve_constrained,
)


def random_constraint_system(n=30, m=10, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, n))
    grid = ControlGrid(origin=(0, 0, 0), spacing=(1, 1, 1), cells=(2, 2, 2))
    return ConstraintSystem(grid, np.zeros((0, 3), dtype=int), sp.csr_matrix(A))


class TestSolveConstrained:
    def test_convex_quadratic_matches_kkt(self):
        rng = np.random.default_rng(1)
        n, m = 30, 10
        system = random_constraint_system(n, m, seed=2)
        A = system.matrix.toarray()
        M = rng.standard_normal((n, n))
        Q = M @ M.T + n * np.eye(n)
        c = rng.standard_normal(n)

        def objective(theta):
            return 0.5 * theta @ Q @ theta + c @ theta, Q @ theta + c

        kkt = np.block([[Q, A.T], [A, np.zeros((m, m))]])
        rhs = np.concatenate([-c, np.zeros(m)])
        x_star = np.linalg.solve(kkt, rhs)[:n]

        cfg = SolverConfig(max_iterations=300, gradient_tolerance=1e-12)
        theta, report = solve_constrained(objective, system, np.zeros(n), cfg)
        npt.assert_allclose(theta, x_star, atol=1e-8, rtol=0)
        assert max(report.constraint_trace) <= 1e-10
        assert report.max_constraint_residual <= 1e-10

    def test_rosenbrock_unconstrained(self):
        grid = ControlGrid(origin=(0, 0, 0), spacing=(1, 1, 1), cells=(2, 2, 2))
        system = ConstraintSystem(
            grid, np.zeros((0, 3), dtype=int), sp.csr_matrix((0, 10))
        )

        def rosen(x):
            f = np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2)
            g = np.zeros_like(x)
            g[:-1] = -400.0 * x[:-1] * (x[1:] - x[:-1] ** 2) - 2.0 * (1.0 - x[:-1])
            g[1:] += 200.0 * (x[1:] - x[:-1] ** 2)
            return f, g

        cfg = SolverConfig(max_iterations=2000, gradient_tolerance=1e-10, history=10)
        theta, report = solve_constrained(rosen, system, np.zeros(10), cfg)
        assert rosen(theta)[0] < 1e-8
        assert report.iterations < 2000

    def test_infeasible_start_rejected(self):
        system = random_constraint_system(seed=3)

        def objective(theta):
            return float(theta @ theta), 2.0 * theta

        with pytest.raises(SolverError, match="infeasible"):
            solve_constrained(objective, system, np.ones(30))

    def test_monotone_decrease(self):
        rng = np.random.default_rng(4)
        system = random_constraint_system(seed=5)
        Q = np.diag(rng.uniform(0.5, 5.0, size=30))
        c = rng.standard_normal(30)

        def objective(theta):
            return 0.5 * theta @ Q @ theta + c @ theta, Q @ theta + c

        _, report = solve_constrained(
            objective, system, np.zeros(30), SolverConfig(max_iterations=100)
        )
        trace = np.asarray(report.objective_trace)
        assert np.all(np.diff(trace) <= 1e-12)


class TestPyramidHelpers:
    def test_downsample_geometry(self):
        img = Image3D((1.0, 2.0, 3.0), (1.5, 1.5, 1.5), np.zeros((16, 17, 18)))
        small = downsample_image(img, 2)
        assert small.dims == (8, 9, 9)
        assert small.spacing == (3.0, 3.0, 3.0)
        assert small.origin == img.origin

    def test_grid_spec_validation(self):
        with pytest.raises(ConfigError):
            GridSpec(spacing=-1.0)
        with pytest.raises(ConfigError):
            GridSpec(parameterization="fourier")

    def test_solver_config_validation(self):
        with pytest.raises(ConfigError):
            SolverConfig(euler_steps=3)
        with pytest.raises(ConfigError):
            SolverConfig(pyramid_levels=0)


class TestRegisterPyramid:
    def phantom_pair(self, size=(24, 24, 24), seed=0):
        spec = PhantomSpec(
            kind="sphere-shells", size=size, spacing=(2.0, 2.0, 2.0), seed=seed
        )
        return make_phantom(spec)

    def test_identity_registration_returns_zero(self):
        img = self.phantom_pair()
        mask = make_ball_mask(img.geometry, radius_frac=0.5)
        cfg = SolverConfig(max_iterations=10, pyramid_levels=2, euler_steps=4)
        obj = ObjectiveConfig(similarity="ssd", similarity_weight=1.0, bending_weight=0.01)
        svf, report = register_pyramid(
            img, img, mask, obj, cfg, GridSpec(spacing=12.0)
        )
        assert np.max(np.abs(svf.coefficient_vector())) <= 1e-6
        assert report.final_constraint_residual <= 1e-10

    def test_constrained_requires_mask(self):
        img = self.phantom_pair()
        with pytest.raises(ConfigError, match="mask"):
            register_pyramid(img, img, None, constrained=True)

    def test_constraints_require_conforming(self):
        img = self.phantom_pair()
        mask = make_ball_mask(img.geometry, radius_frac=0.4)
        with pytest.raises(ConfigError, match="div_conforming"):
            register_pyramid(
                img, img, mask, grid_spec=GridSpec(parameterization="classical")
            )

    def test_small_recovery_constrained_vs_unconstrained(self):
        # Small-scale version of the synthetic-recovery protocol: warp one
        # phantom by the inverse ground-truth flow, register back, and check
        # both recovery quality and the feasibility of the result.
        img = self.phantom_pair(size=(24, 24, 24), seed=1)
        geom = img.geometry
        grid = ControlGrid(origin=(-2, -2, -2), spacing=(10.0,) * 3, cells=(5, 5, 5))
        _, gt = make_ground_truth_svf(grid, seed=3, amplitude=2.5)
        inv_flow = exponential_euler(gt.negated(), EulerConfig(steps=32), geom)
        from divreg.flow import warp_image

        moving = warp_image(img, inv_flow, interp="trilinear")
        mask = make_ball_mask(geom, radius_frac=0.6)
        obj = ObjectiveConfig(
            similarity="ssd", similarity_weight=1.0, bending_weight=0.003
        )
        cfg = SolverConfig(
            max_iterations=30, pyramid_levels=2, euler_steps=8,
            gradient_tolerance=1e-7,
        )
        svf, report = register_pyramid(
            moving, img, mask, obj, cfg, GridSpec(spacing=8.0)
        )
        assert report.final_constraint_residual <= 1e-10

        fwd_true = exponential_euler(gt, EulerConfig(steps=64), geom)
        fwd_est = exponential_euler(svf, EulerConfig(steps=64), geom)
        inner = (slice(4, -4),) * 3
        err = np.linalg.norm(
            (fwd_est.displacement - fwd_true.displacement)[inner], axis=-1
        )
        gt_mag = np.linalg.norm(fwd_true.displacement[inner], axis=-1)
        # Recovery: residual well below the deformation itself.
        assert np.sqrt(np.mean(err**2)) < 0.5 * np.sqrt(np.mean(gt_mag**2))

        unconstrained, _ = register_pyramid(
            moving, img, None, obj, cfg, GridSpec(spacing=8.0), constrained=False
        )
        system = build_constraint_system(svf.grid, mask)
        res_c = system.residual_inf(svf.coefficient_vector())
        res_u = system.residual_inf(unconstrained.coefficient_vector())
        assert res_c <= 1e-10
        assert res_u > 1e-3
