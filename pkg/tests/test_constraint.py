import numpy as np
import numpy.testing as npt
import pytest

from divreg.constraint import (
    ConstraintSystem,
    MaskRegion,
    active_index_set,
    assemble_constraints,
    build_constraint_system,
    classical_knot_constraints,
    project_classical_at_knots,
    project_divergence_free,
)
from divreg.errors import GeometryError
from divreg.field import ClassicalSVF, ControlGrid, DivConformingSVF


def make_grid(cells=(8, 8, 8), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return ControlGrid(origin=origin, spacing=spacing, cells=cells, divergence_order=2)


def make_mask(dims=(16, 16, 16), spacing=(0.5, 0.5, 0.5), origin=(0.25, 0.25, 0.25)):
    """Voxel grid of centers covering the unit-spacing 8-cell grid domain."""
    return MaskRegion(origin=origin, spacing=spacing, mask=np.zeros(dims, dtype=bool))


def ball_mask(dims, spacing, origin, center, radius):
    idx = np.stack(np.meshgrid(*(np.arange(n) for n in dims), indexing="ij"), axis=-1)
    centers = np.asarray(origin) + idx * np.asarray(spacing)
    inside = np.linalg.norm(centers - np.asarray(center), axis=-1) <= radius
    return MaskRegion(origin=origin, spacing=spacing, mask=inside)


def brute_force_active(grid, mask):
    """Direct box-overlap scan over all divergence-lattice indices."""
    k = grid.divergence_order
    shape = grid.lattice_shape((k, k, k))
    occ = np.argwhere(mask.mask)
    centers = np.asarray(mask.origin) + occ * np.asarray(mask.spacing)
    half = 0.5 * np.asarray(mask.spacing)
    out = []
    for sx in range(shape[0]):
        for sy in range(shape[1]):
            for sz in range(shape[2]):
                s = np.array([sx, sy, sz])
                lo = np.asarray(grid.origin) + (s - k) * np.asarray(grid.spacing)
                hi = np.asarray(grid.origin) + (s + 1) * np.asarray(grid.spacing)
                hit = np.all((centers + half > lo) & (centers - half < hi), axis=1)
                if hit.any():
                    out.append((sx, sy, sz))
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)


class TestActiveIndexSet:
    def test_empty_mask(self):
        grid = make_grid()
        assert active_index_set(grid, make_mask()).shape == (0, 3)

    def test_full_domain_mask(self):
        grid = make_grid()
        mask = make_mask()
        mask = MaskRegion(mask.origin, mask.spacing, np.ones(mask.dims, dtype=bool))
        idx = active_index_set(grid, mask)
        k = grid.divergence_order
        # Every index whose support box meets the domain interior is active.
        assert len(idx) == np.prod(grid.lattice_shape((k, k, k)))

    def test_single_voxel_matches_brute_force(self):
        grid = make_grid()
        mask = make_mask()
        m = mask.mask.copy()
        m[5, 9, 2] = True
        mask = MaskRegion(mask.origin, mask.spacing, m)
        idx = active_index_set(grid, mask)
        oracle = brute_force_active(grid, mask)
        npt.assert_array_equal(idx, oracle)

    def test_random_mask_matches_brute_force(self):
        grid = make_grid((5, 4, 6), spacing=(1.25, 1.0, 0.75), origin=(-1.0, 0.5, 2.0))
        rng = np.random.default_rng(0)
        mask = MaskRegion(
            origin=(-0.8, 0.7, 2.1),
            spacing=(0.6, 0.5, 0.45),
            mask=rng.uniform(size=(9, 8, 10)) < 0.15,
        )
        npt.assert_array_equal(active_index_set(grid, mask), brute_force_active(grid, mask))

    def test_monotone_in_mask(self):
        grid = make_grid()
        small = ball_mask((16,) * 3, (0.5,) * 3, (0.25,) * 3, (4.0, 4.0, 4.0), 1.5)
        big = ball_mask((16,) * 3, (0.5,) * 3, (0.25,) * 3, (4.0, 4.0, 4.0), 2.5)
        idx_small = {tuple(i) for i in active_index_set(grid, small)}
        idx_big = {tuple(i) for i in active_index_set(grid, big)}
        assert idx_small <= idx_big

    def test_margin_property(self):
        # A mask whose faces sit mid-cell: dilating by less than the distance
        # to the nearest knot plane leaves the active set unchanged.
        grid = make_grid()
        mask = make_mask()
        m = mask.mask.copy()
        m[5:10, 5:10, 5:10] = True  # faces at 2.5 and 5.0 world units... voxel world extent
        base = MaskRegion(mask.origin, mask.spacing, m)
        m2 = mask.mask.copy()
        m2[5:10, 5:10, 5:10] = True
        # pad by half a voxel (0.25 world) by shifting origin of an equal mask
        dilated = MaskRegion(
            (mask.origin[0] - 0.2, mask.origin[1], mask.origin[2]),
            mask.spacing,
            m2,
        )
        npt.assert_array_equal(
            active_index_set(grid, base), active_index_set(grid, dilated)
        )
        # Sanity contrast: a dilation past the knot plane changes the set.
        far = MaskRegion(
            (mask.origin[0] - 0.8, mask.origin[1], mask.origin[2]), mask.spacing, m2
        )
        assert len(active_index_set(grid, far)) != len(active_index_set(grid, base)) or not np.array_equal(
            active_index_set(grid, far), active_index_set(grid, base)
        )

    def test_disjoint_frames_rejected(self):
        grid = make_grid()
        m = np.ones((4, 4, 4), dtype=bool)
        far_mask = MaskRegion(origin=(500.0, 500.0, 500.0), spacing=(0.5,) * 3, mask=m)
        with pytest.raises(GeometryError):
            active_index_set(grid, far_mask)


class TestAssembly:
    def test_unit_spacing_entries(self):
        grid = make_grid()
        idx = np.array([[3, 4, 5], [0, 0, 0]])
        system = assemble_constraints(grid, idx)
        vals = np.unique(system.matrix.data)
        npt.assert_array_equal(np.sort(vals), [-1.0, 1.0])

    def test_row_nnz_at_most_six(self):
        grid = make_grid((5, 5, 5), spacing=(1.0, 2.0, 0.5))
        mask = ball_mask((10,) * 3, (0.55, 1.1, 0.28), (0.3, 0.6, 0.2), (2.5, 5.0, 1.2), 1.4)
        system = build_constraint_system(grid, mask)
        assert system.n_constraints > 0
        nnz_per_row = np.diff(system.matrix.indptr)
        assert nnz_per_row.max() <= 6

    def test_matrix_times_theta_equals_psi(self):
        grid = make_grid((6, 6, 6), spacing=(1.0, 0.75, 1.25))
        rng = np.random.default_rng(1)
        svf = DivConformingSVF(
            grid,
            rng.standard_normal((9, 8, 8)),
            rng.standard_normal((8, 9, 8)),
            rng.standard_normal((8, 8, 9)),
        )
        k = grid.divergence_order
        all_idx = np.stack(
            np.meshgrid(*(np.arange(n) for n in grid.lattice_shape((k,) * 3)), indexing="ij"),
            axis=-1,
        ).reshape(-1, 3)
        system = assemble_constraints(grid, all_idx)
        lhs = system.matrix @ svf.coefficient_vector()
        rhs = svf.psi().ravel()
        npt.assert_allclose(lhs, rhs, atol=1e-14, rtol=0)

    def test_invalid_index_rejected(self):
        grid = make_grid()
        with pytest.raises(IndexError):
            assemble_constraints(grid, np.array([[99, 0, 0]]))

    def test_export_triplets(self, tmp_path):
        grid = make_grid((4, 4, 4))
        system = assemble_constraints(grid, np.array([[1, 2, 3]]))
        path = str(tmp_path / "constraints.txt")
        system.export_triplets(path)
        lines = open(path).read().strip().splitlines()
        assert lines[0].startswith("#")
        assert len(lines) == 1 + system.matrix.nnz


class TestProjection:
    def setup_method(self):
        self.grid = make_grid((4, 4, 4), spacing=(1.0, 1.25, 0.75))
        self.mask = ball_mask(
            (12,) * 3, (0.35,) * 3, (0.2, 0.3, 0.2), (2.0, 2.2, 1.8), 1.2
        )
        self.system = build_constraint_system(self.grid, self.mask)
        assert self.system.n_constraints > 0

    def dense_kkt_oracle(self, theta0):
        A = self.system.matrix.toarray()
        m, n = A.shape
        kkt = np.block([[np.eye(n), A.T], [A, np.zeros((m, m))]])
        rhs = np.concatenate([theta0, np.zeros(m)])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        return sol[:n]

    def test_matches_dense_kkt(self):
        rng = np.random.default_rng(2)
        theta0 = rng.standard_normal(self.system.n_parameters)
        proj = project_divergence_free(theta0, self.system)
        oracle = self.dense_kkt_oracle(theta0)
        npt.assert_allclose(proj, oracle, atol=1e-8, rtol=0)
        assert self.system.residual_inf(proj) <= 1e-10

    def test_feasible_point_fixed(self):
        rng = np.random.default_rng(3)
        theta0 = project_divergence_free(
            rng.standard_normal(self.system.n_parameters), self.system
        )
        again = project_divergence_free(theta0, self.system)
        npt.assert_allclose(again, theta0, atol=1e-12, rtol=0)

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        theta0 = rng.standard_normal(self.system.n_parameters)
        once = project_divergence_free(theta0, self.system)
        twice = project_divergence_free(once, self.system)
        npt.assert_allclose(once, twice, atol=1e-12, rtol=0)

    def test_optimality_among_feasible(self):
        rng = np.random.default_rng(5)
        theta0 = rng.standard_normal(self.system.n_parameters)
        proj = project_divergence_free(theta0, self.system)
        d0 = np.linalg.norm(proj - theta0)
        for _ in range(100):
            other = project_divergence_free(
                rng.standard_normal(self.system.n_parameters), self.system
            )
            assert d0 <= np.linalg.norm(other - theta0) + 1e-9

    def test_divergence_vanishes_on_mask(self):
        rng = np.random.default_rng(6)
        theta = project_divergence_free(
            rng.standard_normal(self.system.n_parameters), self.system
        )
        svf = DivConformingSVF.zeros(self.grid).with_coefficients(theta)
        pts = self.mask.sample_points(100_000, rng)
        assert np.max(np.abs(svf.divergence_many(pts))) <= 1e-12

    def test_empty_system_identity(self):
        system = ConstraintSystem.empty(self.grid)
        theta0 = np.arange(system.n_parameters, dtype=float)
        npt.assert_array_equal(project_divergence_free(theta0, system), theta0)


class TestClassicalKnotProjection:
    def test_zero_input_zero_output(self):
        grid = make_grid((4, 4, 4))
        svf = ClassicalSVF.zeros(grid)
        out = project_classical_at_knots(svf)
        assert not out.coeffs.any()

    def test_knot_divergence_vanishes(self):
        grid = make_grid((4, 4, 4), spacing=(1.0, 1.2, 0.8))
        rng = np.random.default_rng(7)
        svf = ClassicalSVF(grid, rng.standard_normal(grid.lattice_shape((3,) * 3) + (3,)))
        out = project_classical_at_knots(svf)
        shape = grid.lattice_shape((3, 3, 3))
        ks = np.stack(
            np.meshgrid(*(np.arange(n) for n in shape), indexing="ij"), axis=-1
        ).reshape(-1, 3)
        pts = np.asarray(grid.origin) + (ks - 3) * np.asarray(grid.spacing)
        div = np.trace(out.jacobian_many(pts), axis1=1, axis2=2)
        assert np.max(np.abs(div)) <= 1e-10

    def test_off_knot_divergence_generally_nonzero(self):
        grid = make_grid((4, 4, 4))
        rng = np.random.default_rng(8)
        svf = ClassicalSVF(
            grid, rng.standard_normal(grid.lattice_shape((3,) * 3) + (3,))
        )
        out = project_classical_at_knots(svf)
        pts = np.asarray(grid.origin) + rng.uniform(0.1, 0.9, size=(200, 3)) * (
            np.asarray(grid.domain_hi) - np.asarray(grid.origin)
        )
        div = np.trace(out.jacobian_many(pts), axis1=1, axis2=2)
        assert np.max(np.abs(div)) > 1e-6

    def test_constraint_rows_match_fd_divergence(self):
        grid = make_grid((4, 4, 4), spacing=(0.9, 1.0, 1.1))
        rng = np.random.default_rng(9)
        svf = ClassicalSVF(
            grid, rng.standard_normal(grid.lattice_shape((3,) * 3) + (3,))
        )
        A = classical_knot_constraints(grid)
        vals = A @ svf.coefficient_vector()
        shape = grid.lattice_shape((3, 3, 3))
        ks = np.stack(
            np.meshgrid(*(np.arange(n) for n in shape), indexing="ij"), axis=-1
        ).reshape(-1, 3)
        pts = np.asarray(grid.origin) + (ks - 3) * np.asarray(grid.spacing)
        div = np.trace(svf.jacobian_many(pts), axis1=1, axis2=2)
        npt.assert_allclose(vals, div, atol=1e-12, rtol=0)
