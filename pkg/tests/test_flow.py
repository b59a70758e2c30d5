import numpy as np
import numpy.testing as npt
import pytest

from divreg.constraint import build_constraint_system
from divreg.errors import ConfigError, GeometryError
from divreg.field import ControlGrid, DivConformingSVF
from divreg.flow import (
    DeformationField,
    EulerConfig,
    VoxelGeometry,
    exponential_euler,
    jacobian_determinant_fd,
    jacobian_determinant_map,
    warp_image,
    warp_points,
)
from divreg.io_image import (
    Image3D,
    PhantomSpec,
    full_domain_mask,
    sinusoid_texture_function,
)


def make_grid(cells=(6, 6, 6), spacing=(4.0, 4.0, 4.0)):
    return ControlGrid(origin=(0.0, 0.0, 0.0), spacing=spacing, cells=cells)


def smooth_conforming(grid, rng, scale):
    from scipy.ndimage import gaussian_filter

    z = DivConformingSVF.zeros(grid)
    return DivConformingSVF(
        grid,
        scale * gaussian_filter(rng.standard_normal(z.coeffs_x.shape), 1.0),
        scale * gaussian_filter(rng.standard_normal(z.coeffs_y.shape), 1.0),
        scale * gaussian_filter(rng.standard_normal(z.coeffs_z.shape), 1.0),
    )


def feasible_conforming(grid, rng, scale):
    svf = smooth_conforming(grid, rng, scale)
    system = build_constraint_system(grid, full_domain_mask(grid))
    theta = system.project_nullspace(svf.coefficient_vector())
    return svf.with_coefficients(theta)


def interior_geometry(grid, dims=(12, 12, 12), shrink=0.3):
    lo = grid.domain_lo + shrink * (grid.domain_hi - grid.domain_lo)
    hi = grid.domain_hi - shrink * (grid.domain_hi - grid.domain_lo)
    spacing = (hi - lo) / (np.asarray(dims) - 1)
    return VoxelGeometry(origin=tuple(lo), spacing=tuple(spacing), dims=dims)


class TestEulerConfig:
    def test_power_of_two_required(self):
        EulerConfig(steps=1)
        EulerConfig(steps=64)
        with pytest.raises(ConfigError):
            EulerConfig(steps=12)
        with pytest.raises(ConfigError):
            EulerConfig(steps=0)

    def test_scaling_squaring_reserved(self):
        with pytest.raises(ConfigError, match="reserved"):
            EulerConfig(steps=8, integrator="scaling_squaring")


class TestExponential:
    def test_zero_field_identity(self):
        grid = make_grid()
        svf = DivConformingSVF.zeros(grid)
        geom = interior_geometry(grid)
        out = exponential_euler(svf, EulerConfig(steps=8), geom)
        npt.assert_array_equal(out.displacement, 0.0)
        assert not out.out_of_domain.any()

    def test_constant_field_exact_translation(self):
        grid = make_grid()
        z = DivConformingSVF.zeros(grid)
        c = np.array([0.75, -.5, 0.25])
        svf = DivConformingSVF(
            grid,
            np.full_like(z.coeffs_x, c[0]),
            np.full_like(z.coeffs_y, c[1]),
            np.full_like(z.coeffs_z, c[2]),
        )
        geom = interior_geometry(grid, dims=(8, 8, 8))
        out = exponential_euler(svf, EulerConfig(steps=16), geom)
        npt.assert_allclose(out.displacement, np.broadcast_to(c, out.displacement.shape), atol=1e-12)

    def test_inverse_consistency_first_order(self):
        grid = make_grid()
        rng = np.random.default_rng(0)
        svf = smooth_conforming(grid, rng, scale=1.2)
        geom = interior_geometry(grid)
        pts = geom.voxel_centers()
        residuals = []
        for steps in (8, 16, 32, 64):
            cfg = EulerConfig(steps=steps)
            fwd, f1 = warp_points(pts, svf, cfg)
            back, f2 = warp_points(fwd, svf.negated(), cfg)
            assert not f1.any() and not f2.any()
            residuals.append(np.max(np.linalg.norm(back - pts, axis=1)))
        ratios = np.array(residuals[:-1]) / np.array(residuals[1:])
        assert np.all(ratios > 1.5) and np.all(ratios < 3.0), ratios


class TestJacobianMap:
    def test_zero_field_unit_determinant(self):
        grid = make_grid()
        svf = DivConformingSVF.zeros(grid)
        geom = interior_geometry(grid)
        jm = jacobian_determinant_map(svf, EulerConfig(steps=8), geom)
        npt.assert_array_equal(jm.values, 1.0)
        assert jm.min_step_det == 1.0

    def test_feasible_field_error_halves_with_tau(self):
        grid = make_grid()
        rng = np.random.default_rng(1)
        svf = feasible_conforming(grid, rng, scale=2.0)
        geom = interior_geometry(grid, dims=(10, 10, 10))
        maes = []
        for steps in (16, 32, 64, 128):
            jm = jacobian_determinant_map(svf, EulerConfig(steps=steps), geom)
            assert not jm.out_of_domain.any()
            maes.append(np.mean(np.abs(jm.values - 1.0)))
        ratios = np.array(maes[:-1]) / np.array(maes[1:])
        assert np.all(ratios > 1.5) and np.all(ratios < 3.0), (maes, ratios)

    def test_chain_product_vs_finite_difference(self):
        grid = make_grid()
        rng = np.random.default_rng(2)
        svf = smooth_conforming(grid, rng, scale=1.5)
        geom = interior_geometry(grid, dims=(20, 20, 20), shrink=0.25)
        cfg = EulerConfig(steps=64)
        jm = jacobian_determinant_map(svf, cfg, geom)
        fd = jacobian_determinant_fd(exponential_euler(svf, cfg, geom))
        inner = (slice(1, -1),) * 3  # border rows are one-sided differences
        npt.assert_allclose(jm.values[inner], fd[inner], rtol=1e-2)

    def test_determinant_positive_for_moderate_fields(self):
        grid = make_grid()
        rng = np.random.default_rng(3)
        svf = smooth_conforming(grid, rng, scale=1.5)
        jm = jacobian_determinant_map(svf, EulerConfig(steps=32), interior_geometry(grid))
        assert jm.min_step_det > 0.0


class TestWarpPoints:
    def test_zero_and_constant(self):
        grid = make_grid()
        z = DivConformingSVF.zeros(grid)
        pts = interior_geometry(grid).voxel_centers()[::17]
        out, flags = warp_points(pts, z, EulerConfig(steps=4))
        npt.assert_array_equal(out, pts)
        assert not flags.any()
        c = np.array([1.0, 0.5, -0.75])
        svf = DivConformingSVF(
            grid,
            np.full_like(z.coeffs_x, c[0]),
            np.full_like(z.coeffs_y, c[1]),
            np.full_like(z.coeffs_z, c[2]),
        )
        out, _ = warp_points(pts, svf, EulerConfig(steps=8))
        npt.assert_allclose(out, pts + c, atol=1e-12)

    def test_round_trip_residual_small(self):
        grid = make_grid()
        rng = np.random.default_rng(4)
        svf = smooth_conforming(grid, rng, scale=1.0)
        pts = interior_geometry(grid).voxel_centers()[::7]
        cfg = EulerConfig(steps=64)
        fwd, _ = warp_points(pts, svf, cfg)
        back, _ = warp_points(fwd, svf.negated(), cfg)
        # First-order integrator: residual is O(tau), small but nonzero.
        res = np.max(np.linalg.norm(back - pts, axis=1))
        assert res < 0.1

    def test_exit_flags_not_clamped(self):
        grid = make_grid()
        z = DivConformingSVF.zeros(grid)
        svf = DivConformingSVF(
            grid,
            np.full_like(z.coeffs_x, 100.0),
            np.zeros_like(z.coeffs_y),
            np.zeros_like(z.coeffs_z),
        )
        pts = np.array([[12.0, 12.0, 12.0]])
        out, flags = warp_points(pts, svf, EulerConfig(steps=4))
        assert flags[0]
        assert out[0, 0] > grid.domain_hi[0]


class TestWarpImage:
    def make_image(self, geom_dims=(16, 16, 16)):
        spec = PhantomSpec(
            kind="sinusoid-texture", size=geom_dims, spacing=(1.5, 1.5, 1.5),
            origin=(0.0, 0.0, 0.0), seed=5, smooth_sigma=0.0,
        )
        from divreg.io_image import make_phantom

        return spec, make_phantom(spec)

    def test_identity_bitwise_trilinear(self):
        spec, img = self.make_image()
        geom = img.geometry
        ident = DeformationField(
            geom, np.zeros(geom.dims + (3,)), np.zeros(geom.dims, dtype=bool)
        )
        warped = warp_image(img, ident, interp="trilinear")
        npt.assert_array_equal(warped.data, img.data)

    def test_integer_translation_exact(self):
        spec, img = self.make_image()
        geom = img.geometry
        shift_vox = np.array([2, 0, 1])
        disp = np.broadcast_to(
            shift_vox * np.asarray(geom.spacing), geom.dims + (3,)
        ).copy()
        deform = DeformationField(geom, disp, np.zeros(geom.dims, dtype=bool))
        warped = warp_image(img, deform, interp="trilinear")
        valid = img.data[2:, :, 1:]
        npt.assert_allclose(warped.data[:-2, :, :-1], valid, atol=1e-12)

    def test_cubic_beats_trilinear_on_smooth_phantom(self):
        spec, img = self.make_image(geom_dims=(24, 24, 24))
        geom = img.geometry
        grid = ControlGrid(
            origin=(0.0, 0.0, 0.0), spacing=(9.0, 9.0, 9.0), cells=(4, 4, 4)
        )
        rng = np.random.default_rng(6)
        svf = smooth_conforming(grid, rng, scale=0.8)
        deform = exponential_euler(svf, EulerConfig(steps=16), geom)
        f = sinusoid_texture_function(spec)
        target_pts = geom.voxel_centers() + deform.displacement.reshape(-1, 3)
        exact = f(target_pts).reshape(geom.dims)
        inner = (slice(3, -3),) * 3
        err_tri = np.abs(warp_image(img, deform, "trilinear").data - exact)[inner]
        err_cub = np.abs(warp_image(img, deform, "cubic").data - exact)[inner]
        assert err_cub.mean() < err_tri.mean()
        assert err_cub.max() < err_tri.max()

    def test_geometry_mismatch_rejected(self):
        spec, img = self.make_image()
        other = VoxelGeometry(origin=(5.0, 0.0, 0.0), spacing=img.spacing, dims=img.dims)
        deform = DeformationField(
            other, np.zeros(other.dims + (3,)), np.zeros(other.dims, dtype=bool)
        )
        with pytest.raises(GeometryError):
            warp_image(img, deform)

    def test_pad_value_default_is_minimum(self):
        spec, img = self.make_image()
        geom = img.geometry
        disp = np.full(geom.dims + (3,), 1e4)
        deform = DeformationField(geom, disp, np.zeros(geom.dims, dtype=bool))
        warped = warp_image(img, deform, interp="trilinear")
        npt.assert_array_equal(warped.data, img.data.min())
