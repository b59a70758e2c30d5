"""Image dissimilarity terms, bending energy, and the registration objective.

All similarity functions return ``(value, gradient)`` where the gradient is
taken with respect to the *warped* intensities, voxel by voxel.  The
registration objective chains these through the Euler exponential by exact
reverse accumulation: the per-voxel similarity gradient is turned into a
spatial cotangent via the interpolant gradient, transported backwards
through every Euler step with ``(I + tau J)^T``, and sprayed onto the spline
coefficients at each stored trajectory point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import ConfigError, GeometryError
from .field import _SplineFieldBase
from .flow import EulerConfig, VoxelGeometry, sample_trilinear
from .io_image import Image3D

_ENTROPY_FLOOR = 1e-12


@dataclass(frozen=True)
class ObjectiveConfig:
    """Similarity/regularisation weights; defaults follow the reference setup
    (similarity 0.95, bending 0.05, 3-level pyramid elsewhere)."""

    similarity: str = "nmi"
    similarity_weight: float = 0.95
    bending_weight: float = 0.05
    lncc_window_sigma: float = 6.0  # mm
    nmi_bins: int = 64

    def __post_init__(self) -> None:
        if self.similarity not in ("ssd", "lncc", "nmi"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.similarity_weight < 0 or self.bending_weight < 0:
            raise ConfigError("weights must be nonnegative")
        if self.nmi_bins < 8:
            raise ConfigError(f"nmi_bins must be >= 8, got {self.nmi_bins}")
        if self.lncc_window_sigma <= 0:
            raise ConfigError("lncc_window_sigma must be positive")


def _check_same_geometry(ref: Image3D, warped: Image3D) -> None:
    if not ref.geometry.matches(warped.geometry):
        raise GeometryError("ref and warped images must share a voxel geometry")


# ---------------------------------------------------------------------------
# SSD
# ---------------------------------------------------------------------------

def ssd_value_grad(ref: Image3D, warped: Image3D) -> tuple[float, np.ndarray]:
    """Mean squared intensity difference and its per-voxel gradient."""
    _check_same_geometry(ref, warped)
    diff = warped.data - ref.data
    n = diff.size
    return float(np.mean(diff * diff)), 2.0 * diff / n


# ---------------------------------------------------------------------------
# LNCC
# ---------------------------------------------------------------------------

def _local_filter(arr: np.ndarray, sigma_vox: np.ndarray) -> np.ndarray:
    # 'reflect' keeps the smoothing operator symmetric, which the adjoint in
    # the gradient formula relies on.
    return ndimage.gaussian_filter(arr, sigma=sigma_vox, mode="reflect")


def lncc_value_grad(
    ref: Image3D, warped: Image3D, sigma_mm: float
) -> tuple[float, np.ndarray]:
    """One minus the mean squared local correlation under a Gaussian window.

    Local variances are floored at 1e-5 * (image range)^2, so perfectly flat
    neighbourhoods contribute zero correlation instead of noise.
    """
    _check_same_geometry(ref, warped)
    if sigma_mm <= 0:
        raise ConfigError("LNCC window sigma must be positive")
    sigma_vox = sigma_mm / np.asarray(ref.spacing)
    r = ref.data
    w = warped.data
    n = r.size
    mu_r = _local_filter(r, sigma_vox)
    mu_w = _local_filter(w, sigma_vox)
    var_r = np.maximum(_local_filter(r * r, sigma_vox) - mu_r**2, 0.0)
    var_w = np.maximum(_local_filter(w * w, sigma_vox) - mu_w**2, 0.0)
    cov = _local_filter(r * w, sigma_vox) - mu_r * mu_w
    floor_r = 1e-5 * max(np.ptp(r), _TINY_RANGE) ** 2
    floor_w = 1e-5 * max(np.ptp(w), _TINY_RANGE) ** 2
    vr = np.maximum(var_r, floor_r)
    vw = np.maximum(var_w, floor_w)
    rho2 = cov * cov / (vr * vw)
    value = 1.0 - float(np.mean(rho2))

    a1 = cov / (vr * vw)
    a2 = np.where(var_w > floor_w, cov * cov / (vr * vw * vw), 0.0)
    grad = (-2.0 / n) * (
        r * _local_filter(a1, sigma_vox)
        - _local_filter(a1 * mu_r, sigma_vox)
        - w * _local_filter(a2, sigma_vox)
        + _local_filter(a2 * mu_w, sigma_vox)
    )
    return value, grad


_TINY_RANGE = 1e-30


# ---------------------------------------------------------------------------
# NMI (cubic-kernel Parzen joint histogram)
# ---------------------------------------------------------------------------

def _bin_coordinates(x: np.ndarray, bins: int, rng: tuple[float, float]):
    lo, hi = rng
    span = hi - lo
    if span <= 0:
        warnings.warn("constant image in NMI; entropy floor applied")
        span = 1.0
    alpha = (bins - 3) / span
    t = (x - lo) * alpha
    clipped = np.clip(t, 0.0, bins - 3.0)
    return 1.0 + clipped, alpha, (t == clipped)


def _parzen_weights(c: np.ndarray):
    """Cubic kernel weights of each sample on its four neighbouring bins."""
    base = np.floor(c).astype(np.int64)
    offs = np.arange(-1, 3)
    bins_idx = base[:, None] + offs[None, :]
    arg = bins_idx - c[:, None]
    w = _kernels_bspline3(arg)
    dw = _kernels_bspline3_derivative(arg)
    return bins_idx, w, dw


def _kernels_bspline3(t: np.ndarray) -> np.ndarray:
    a = np.abs(t)
    inner = (4.0 - 3.0 * t * t * (2.0 - a)) / 6.0
    outer = (2.0 - a) ** 3 / 6.0
    return np.where(a < 1.0, inner, np.where(a < 2.0, outer, 0.0))


def _kernels_bspline3_derivative(t: np.ndarray) -> np.ndarray:
    a = np.abs(t + 0.5)
    b2p = np.where(a < 0.5, 0.75 - (t + 0.5) ** 2, np.where(a < 1.5, 0.5 * (1.5 - a) ** 2, 0.0))
    a = np.abs(t - 0.5)
    b2m = np.where(a < 0.5, 0.75 - (t - 0.5) ** 2, np.where(a < 1.5, 0.5 * (1.5 - a) ** 2, 0.0))
    return b2p - b2m


def _entropy(p: np.ndarray) -> float:
    p = p[p > _ENTROPY_FLOOR]
    return float(-(p * np.log(p)).sum())


def nmi_value_grad(
    ref: Image3D,
    warped: Image3D,
    bins: int = 64,
    ref_range: tuple[float, float] | None = None,
    warped_range: tuple[float, float] | None = None,
) -> tuple[float, np.ndarray]:
    """Negative normalised mutual information with its analytic gradient.

    NMI = (H_ref + H_warped) / H_joint over a joint histogram built with a
    cubic Parzen kernel on both intensity axes; marginals are read off the
    joint.  Intensity ranges are frozen per call (or passed in explicitly,
    as the pyramid driver does per level) so the bin mapping is a constant
    linear map inside the gradient.
    """
    _check_same_geometry(ref, warped)
    if bins < 8:
        raise ConfigError(f"nmi bins must be >= 8, got {bins}")
    r = ref.data.ravel()
    w = warped.data.ravel()
    n = r.size
    if ref_range is None:
        ref_range = (float(r.min()), float(r.max()))
    if warped_range is None:
        warped_range = (float(w.min()), float(w.max()))
    cr, _, _ = _bin_coordinates(r, bins, ref_range)
    cw, alpha_w, active = _bin_coordinates(w, bins, warped_range)
    ia, wa, _ = _parzen_weights(cr)
    ib, wb, dwb = _parzen_weights(cw)
    ia = np.clip(ia, 0, bins - 1)
    ib = np.clip(ib, 0, bins - 1)

    joint = np.zeros(bins * bins)
    for i in range(4):
        row = ia[:, i] * bins
        for j in range(4):
            joint += np.bincount(
                row + ib[:, j], weights=wa[:, i] * wb[:, j], minlength=bins * bins
            )
    joint = joint.reshape(bins, bins) / n
    p_r = joint.sum(axis=1)
    p_w = joint.sum(axis=0)
    h_r = _entropy(p_r)
    h_w = _entropy(p_w)
    h_j = _entropy(joint.ravel())
    if h_j <= _ENTROPY_FLOOR:
        warnings.warn("degenerate joint histogram in NMI; entropy floor applied")
        h_j = _ENTROPY_FLOOR
    nmi = (h_r + h_w) / h_j

    log_pr = np.log(np.maximum(p_r, _ENTROPY_FLOOR))
    log_pw = np.log(np.maximum(p_w, _ENTROPY_FLOOR))
    log_pj = np.log(np.maximum(joint, _ENTROPY_FLOOR))
    # dNMI/dp(a,b); the +1 terms cancel under the kernel-derivative sums.
    dmat = (
        -(log_pr[:, None] + 1.0) - (log_pw[None, :] + 1.0)
    ) / h_j + (h_r + h_w) * (log_pj + 1.0) / h_j**2

    grad_nmi = np.zeros(n)
    dflat = dmat.ravel()
    for i in range(4):
        row = ia[:, i] * bins
        for j in range(4):
            grad_nmi += wa[:, i] * dwb[:, j] * dflat[row + ib[:, j]]
    # d p_joint / d w carries -alpha from d/dc of the kernel argument (b - c).
    grad_nmi *= -alpha_w / n
    grad_nmi[~active] = 0.0
    return -nmi, (-grad_nmi).reshape(ref.data.shape)


# ---------------------------------------------------------------------------
# Bending energy
# ---------------------------------------------------------------------------

_SECOND_DERIV_PAIRS = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]


def _collocation_matrix(grid, dim: int, order: int, deriv: int, coords: np.ndarray):
    """Dense (n_points, n_coeffs) 1D collocation of basis values at coords."""
    from .field import _axis_basis

    count = grid.cells[dim] + order
    idx, w = _axis_basis(
        coords, grid.origin[dim], grid.spacing[dim], order, count, deriv
    )
    mat = np.zeros((len(coords), count))
    np.put_along_axis(mat, idx, w, axis=1)
    return mat


def bending_energy_value_grad(
    svf: _SplineFieldBase, geometry: VoxelGeometry
) -> tuple[float, np.ndarray]:
    """Mean squared second derivatives over voxel centres (mixed terms doubled).

    Quadratic in the parameters, evaluated per component by separable 1D
    collocation along each axis; the gradient is the adjoint contraction.
    """
    grid = svf.grid
    axes_coords = [
        geometry.origin[d] + np.arange(geometry.dims[d]) * geometry.spacing[d]
        for d in range(3)
    ]
    n_quad = int(np.prod(geometry.dims))
    value = 0.0
    grad_pieces = []
    cache: dict[tuple[int, int, int], np.ndarray] = {}

    def colloc(dim, order, deriv):
        key = (dim, order, deriv)
        if key not in cache:
            cache[key] = _collocation_matrix(grid, dim, order, deriv, axes_coords[dim])
        return cache[key]

    for c in range(3):
        orders = svf.component_orders(c)
        coeffs = svf.component_coeffs(c)
        grad_c = np.zeros_like(coeffs)
        for a, b in _SECOND_DERIV_PAIRS:
            mult = 1.0 if a == b else 2.0
            derivs = [0, 0, 0]
            derivs[a] += 1
            derivs[b] += 1
            mats = [colloc(d, orders[d], derivs[d]) for d in range(3)]
            field = np.einsum(
                "abc,ia->ibc", coeffs, mats[0], optimize=True
            )
            field = np.einsum("ibc,jb->ijc", field, mats[1], optimize=True)
            field = np.einsum("ijc,kc->ijk", field, mats[2], optimize=True)
            value += mult * float(np.sum(field * field)) / n_quad
            back = np.einsum("ijk,kc->ijc", field, mats[2], optimize=True)
            back = np.einsum("ijc,jb->ibc", back, mats[1], optimize=True)
            back = np.einsum("ibc,ia->abc", back, mats[0], optimize=True)
            grad_c += (2.0 * mult / n_quad) * back
        grad_pieces.append(grad_c.ravel())
    return value, svf._assemble_flat(grad_pieces)


# ---------------------------------------------------------------------------
# Full symmetric objective
# ---------------------------------------------------------------------------

class RegistrationObjective:
    """Symmetric similarity + bending energy as a function of flat parameters.

    value(theta)/value_grad(theta) evaluate

        w_sim * [ L(I1 o exp(v), I2) + L(I1, I2 o exp(-v)) ] + w_bend * B(v)

    with exact reverse accumulation through the Euler steps by default; the
    cheaper endpoint approximation (spline spray at the final positions
    only) is available for speed comparisons.
    """

    def __init__(
        self,
        template: _SplineFieldBase,
        img1: Image3D,
        img2: Image3D,
        obj_cfg: ObjectiveConfig,
        euler_cfg: EulerConfig,
        adjoint: str = "exact",
    ):
        if not img1.geometry.matches(img2.geometry):
            raise GeometryError("images must share a voxel geometry")
        if adjoint not in ("exact", "endpoint"):
            raise ConfigError(f"unknown adjoint mode {adjoint!r}")
        self.template = template
        self.img1 = img1
        self.img2 = img2
        self.cfg = obj_cfg
        self.euler = euler_cfg
        self.adjoint = adjoint
        self.geometry = img1.geometry
        self._pts0 = self.geometry.voxel_centers()
        # Frozen per objective: intensity ranges for the NMI bin mapping.
        self._ranges = {
            id(img1): (float(img1.data.min()), float(img1.data.max())),
            id(img2): (float(img2.data.min()), float(img2.data.max())),
        }
        self.n_evaluations = 0

    # -- similarity dispatch -------------------------------------------------

    def _dissimilarity(self, ref: Image3D, warped_vals: np.ndarray, moving: Image3D):
        warped = Image3D(ref.origin, ref.spacing, warped_vals.reshape(ref.dims))
        if self.cfg.similarity == "ssd":
            return ssd_value_grad(ref, warped)
        if self.cfg.similarity == "lncc":
            return lncc_value_grad(ref, warped, self.cfg.lncc_window_sigma)
        return nmi_value_grad(
            ref,
            warped,
            bins=self.cfg.nmi_bins,
            ref_range=self._ranges[id(ref)],
            warped_range=self._ranges[id(moving)],
        )

    # -- forward/backward passes ----------------------------------------------

    def _halves(self, svf):
        # (field, moving, ref, sign of d v_field / d theta)
        return (
            (svf, self.img1, self.img2, 1.0),
            (svf.negated(), self.img2, self.img1, -1.0),
        )

    def value(self, theta: np.ndarray) -> float:
        svf = self.template.with_coefficients(theta)
        self.n_evaluations += 1
        total = 0.0
        for field, moving, ref, _ in self._halves(svf):
            disp, _, _, _ = _integrate_points(field, self._pts0, self.euler)
            warped = sample_trilinear(
                moving.data, self.geometry, self._pts0 + disp, float(moving.data.min())
            )
            total += self.cfg.similarity_weight * self._dissimilarity(
                ref, warped, moving
            )[0]
        if self.cfg.bending_weight > 0:
            total += self.cfg.bending_weight * bending_energy_value_grad(
                svf, self.geometry
            )[0]
        return total

    def value_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        svf = self.template.with_coefficients(theta)
        self.n_evaluations += 1
        total = 0.0
        grad = np.zeros_like(np.asarray(theta, dtype=np.float64))
        for field, moving, ref, sign in self._halves(svf):
            value, dtheta_field = self._half_value_grad(field, moving, ref)
            total += self.cfg.similarity_weight * value
            grad += sign * self.cfg.similarity_weight * dtheta_field
        if self.cfg.bending_weight > 0:
            bv, bg = bending_energy_value_grad(svf, self.geometry)
            total += self.cfg.bending_weight * bv
            grad += self.cfg.bending_weight * bg
        return total, grad

    # Above this many bytes of stored trajectory, the adjoint re-integrates
    # chunk by chunk instead of keeping every step of every voxel in memory.
    _TRAJ_BYTES_LIMIT = 512 * 1024 * 1024

    def _half_value_grad(self, field, moving, ref):
        c0, c1, c2, orders, origin, spacing = field._kernel_components()
        pad_lo, pad_hi = field.grid.padded_bounds(field.max_order)
        pts = self._pts0
        n = len(pts)
        steps = self.euler.steps
        tau = self.euler.tau
        store = self.adjoint == "exact"
        traj_bytes = steps * n * 24
        whole = store and traj_bytes <= self._TRAJ_BYTES_LIMIT
        traj = np.empty((steps, n, 3)) if whole else np.empty((1, 1, 3))
        disp = np.empty((n, 3))
        flags = np.zeros(n, dtype=bool)
        det = np.empty(1)
        _kernels.integrate_field(
            c0, c1, c2, orders, origin, spacing, pts, steps, tau,
            pad_lo, pad_hi, False, whole, traj, disp, flags, det,
        )
        final = pts + disp
        pad = float(moving.data.min())
        warped, spatial_grad = sample_trilinear(
            moving.data, self.geometry, final, pad, with_gradient=True
        )
        value, g_img = self._dissimilarity(ref, warped, moving)
        cot = g_img.reshape(-1)[:, None] * spatial_grad
        g0 = np.zeros_like(c0)
        g1 = np.zeros_like(c1)
        g2 = np.zeros_like(c2)
        if not store:
            return value, field.scatter_velocity_adjoint(final, cot)
        if whole:
            _kernels.adjoint_field(
                c0, c1, c2, orders, origin, spacing, traj, cot, tau, g0, g1, g2
            )
        else:
            # Two-pass: re-run the forward per chunk to rebuild trajectories.
            chunk = max(1, self._TRAJ_BYTES_LIMIT // (steps * 24))
            traj_c = np.empty((steps, chunk, 3))
            for i in range(0, n, chunk):
                sl = slice(i, min(i + chunk, n))
                m = sl.stop - sl.start
                _kernels.integrate_field(
                    c0, c1, c2, orders, origin, spacing, pts[sl], steps, tau,
                    pad_lo, pad_hi, False, True, traj_c[:, :m],
                    disp[sl], flags[sl], det,
                )
                _kernels.adjoint_field(
                    c0, c1, c2, orders, origin, spacing,
                    np.ascontiguousarray(traj_c[:, :m]), cot[sl], tau, g0, g1, g2,
                )
        dtheta = field._assemble_flat([g0.ravel(), g1.ravel(), g2.ravel()])
        return value, dtheta


def _integrate_points(field, pts, euler_cfg, chunk: int = 65536):
    from .flow import _integrate

    return _integrate(field, pts, euler_cfg, want_det=False, chunk=chunk)


def objective_value_grad(
    theta: np.ndarray,
    template: _SplineFieldBase,
    img1: Image3D,
    img2: Image3D,
    obj_cfg: ObjectiveConfig,
    euler_cfg: EulerConfig,
) -> tuple[float, np.ndarray]:
    """One-shot wrapper around :class:`RegistrationObjective`."""
    return RegistrationObjective(template, img1, img2, obj_cfg, euler_cfg).value_grad(
        theta
    )
