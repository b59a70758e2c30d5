"""Classical and divergence-conforming 3D B-spline stationary velocity fields.

Index conventions
-----------------
A :class:`ControlGrid` covers the box ``[origin, origin + cells * spacing]``
per axis.  For basis order ``q`` along an axis with ``n`` cells, the stored
lattice holds ``n + q`` coefficients; storage index ``s`` corresponds to the
logical knot ``i = s - q`` located at ``origin + (s - q) * spacing``, so the
lattice pads the domain with ``q`` extra knots on the low side.  These are
exactly the basis functions whose open support intersects the domain.

A divergence-conforming field of divergence order ``k`` uses order ``k + 1``
for each velocity component along its own axis and order ``k`` along the two
others.  Its divergence is then the scalar order-``k`` spline with
coefficients ``psi = dx(phi_x)/sx + dy(phi_y)/sy + dz(phi_z)/sz`` where
``d*`` are forward differences in storage index (backward differences in the
logical indexing).  With the padded lattices above, every difference has
both operands stored, and the psi lattice has shape ``cells + k`` exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field as dc_field
from math import comb

import numpy as np

from . import _kernels
from .bspline import (
    MAX_ORDER,
    KnotAxis,
    _eval_centered_arr,
    validate_order,
)
from .errors import ConfigError, DomainError, FormatError

_DUMMY_JAC = np.empty((1, 3, 3))


@dataclass(frozen=True)
class ControlGrid:
    """Regular knot lattice geometry shared by all field parameterisations."""

    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    cells: tuple[int, int, int]
    divergence_order: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        object.__setattr__(self, "cells", tuple(int(v) for v in self.cells))
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"grid spacing must be positive, got {self.spacing}")
        if any(n < 2 for n in self.cells):
            raise ConfigError(f"grid needs at least 2 cells per axis, got {self.cells}")
        k = validate_order(self.divergence_order, minimum=2)
        if k + 1 > MAX_ORDER:
            raise ConfigError(
                f"divergence order {k} needs component order {k + 1} > {MAX_ORDER}"
            )

    @property
    def domain_lo(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def domain_hi(self) -> np.ndarray:
        return self.domain_lo + np.asarray(self.cells) * np.asarray(self.spacing)

    def axis(self, dim: int, order: int) -> KnotAxis:
        """Stored knot axis for basis order ``order`` along ``dim``."""
        return KnotAxis(
            spacing=self.spacing[dim],
            knot_count=self.cells[dim] + order,
            origin=self.origin[dim] - order * self.spacing[dim],
            index_offset=order,
        )

    def lattice_shape(self, orders: tuple[int, int, int]) -> tuple[int, int, int]:
        return tuple(self.cells[d] + orders[d] for d in range(3))

    def padded_bounds(self, max_order: int) -> tuple[np.ndarray, np.ndarray]:
        """Box outside which all bases of order <= max_order vanish."""
        sp = np.asarray(self.spacing)
        lo = self.domain_lo - max_order * sp
        hi = self.domain_hi + max_order * sp
        return lo, hi

    def refined(self) -> "ControlGrid":
        """Grid with halved knot spacing covering the same domain."""
        return ControlGrid(
            origin=self.origin,
            spacing=tuple(s / 2.0 for s in self.spacing),
            cells=tuple(2 * n for n in self.cells),
            divergence_order=self.divergence_order,
        )


# ---------------------------------------------------------------------------
# Tensor-product evaluation kernels
# ---------------------------------------------------------------------------

def _axis_basis(
    coords: np.ndarray,
    origin: float,
    spacing: float,
    order: int,
    count: int,
    deriv: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point storage indices and basis weights along one axis.

    Returns ``(idx, w)`` of shape ``(N, order + 1)``: the storage indices of
    the bases whose support can contain each coordinate and their (possibly
    differentiated) values.  Out-of-lattice indices are clipped with their
    weights zeroed, which realises extension by zero beyond the padded grid.
    """
    t = (np.asarray(coords, dtype=np.float64) - origin) / spacing
    base = np.floor(t).astype(np.int64)
    frac = t - base
    offs = np.arange(order + 1)
    arg = frac[:, None] - offs[None, :] + 0.5 * (order - 1)
    if deriv == 0:
        w = _eval_centered_arr(order, arg)
    elif deriv == 1:
        w = (
            _eval_centered_arr(order - 1, arg + 0.5)
            - _eval_centered_arr(order - 1, arg - 0.5)
        ) / spacing
    elif deriv == 2:
        w = (
            _eval_centered_arr(order - 2, arg + 1.0)
            - 2.0 * _eval_centered_arr(order - 2, arg)
            + _eval_centered_arr(order - 2, arg - 1.0)
        ) / spacing**2
    else:
        raise ConfigError(f"unsupported derivative order {deriv}")
    idx = base[:, None] + offs[None, :]
    valid = (idx >= 0) & (idx < count)
    if not valid.all():
        w = np.where(valid, w, 0.0)
        idx = np.clip(idx, 0, count - 1)
    return idx, w


class _PointBasis:
    """Cached per-axis basis weights for one point set against one grid."""

    def __init__(self, grid: ControlGrid, pts: np.ndarray):
        self.grid = grid
        self.pts = np.ascontiguousarray(pts, dtype=np.float64)
        if self.pts.ndim != 2 or self.pts.shape[1] != 3:
            raise ConfigError(f"points must have shape (N, 3), got {self.pts.shape}")
        self._cache: dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]] = {}

    def axis(self, dim: int, order: int, deriv: int = 0):
        key = (dim, order, deriv)
        if key not in self._cache:
            self._cache[key] = _axis_basis(
                self.pts[:, dim],
                self.grid.origin[dim],
                self.grid.spacing[dim],
                order,
                self.grid.cells[dim] + order,
                deriv,
            )
        return self._cache[key]

    def gather(self, coeffs: np.ndarray, orders: tuple[int, int, int]) -> np.ndarray:
        """Local coefficient blocks, shape (N, qx+1, qy+1, qz+1)."""
        ix = self.axis(0, orders[0])[0]
        iy = self.axis(1, orders[1])[0]
        iz = self.axis(2, orders[2])[0]
        return coeffs[ix[:, :, None, None], iy[:, None, :, None], iz[:, None, None, :]]

    def contract(
        self,
        block: np.ndarray,
        orders: tuple[int, int, int],
        derivs: tuple[int, int, int] = (0, 0, 0),
    ) -> np.ndarray:
        wx = self.axis(0, orders[0], derivs[0])[1]
        wy = self.axis(1, orders[1], derivs[1])[1]
        wz = self.axis(2, orders[2], derivs[2])[1]
        tmp = np.einsum("nabc,nc->nab", block, wz)
        tmp = np.einsum("nab,nb->na", tmp, wy)
        return np.einsum("na,na->n", tmp, wx)

    def scatter(
        self,
        values: np.ndarray,
        shape: tuple[int, int, int],
        orders: tuple[int, int, int],
        derivs: tuple[int, int, int] = (0, 0, 0),
    ) -> np.ndarray:
        """Adjoint of gather+contract: accumulate values onto the lattice."""
        ix, wx = self.axis(0, orders[0], derivs[0])
        iy, wy = self.axis(1, orders[1], derivs[1])
        iz, wz = self.axis(2, orders[2], derivs[2])
        w3 = (
            (wx * values[:, None])[:, :, None, None]
            * wy[:, None, :, None]
            * wz[:, None, None, :]
        )
        flat = (
            (ix[:, :, None, None] * shape[1] + iy[:, None, :, None]) * shape[2]
            + iz[:, None, None, :]
        )
        out = np.bincount(
            flat.ravel(), weights=w3.ravel(), minlength=shape[0] * shape[1] * shape[2]
        )
        return out.reshape(shape)


def evaluate_component(
    grid: ControlGrid,
    coeffs: np.ndarray,
    orders: tuple[int, int, int],
    pts: np.ndarray,
    derivs: tuple[int, int, int] = (0, 0, 0),
) -> np.ndarray:
    """Evaluate one scalar tensor-product spline at arbitrary points."""
    basis = _PointBasis(grid, pts)
    return basis.contract(basis.gather(coeffs, orders), orders, derivs)


# ---------------------------------------------------------------------------
# Field parameterisations
# ---------------------------------------------------------------------------


def _as_points(p) -> tuple[np.ndarray, bool]:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape == (3,):
        return arr[None, :], True
    return arr, False


class _SplineFieldBase:
    """Shared evaluation machinery; subclasses define component layout."""

    grid: ControlGrid

    def component_orders(self, comp: int) -> tuple[int, int, int]:
        raise NotImplementedError

    def component_coeffs(self, comp: int) -> np.ndarray:
        raise NotImplementedError

    @property
    def max_order(self) -> int:
        return max(max(self.component_orders(c)) for c in range(3))

    def inside_padded(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = self.grid.padded_bounds(self.max_order)
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def check_inside(self, pts: np.ndarray) -> None:
        inside = self.inside_padded(pts)
        if not inside.all():
            bad = pts[~inside][0]
            raise DomainError(
                f"point {tuple(bad)} outside the padded grid domain "
                f"{self.grid.padded_bounds(self.max_order)}"
            )

    def _kernel_components(self):
        """Contiguous per-component coefficient arrays + order matrix (cached)."""
        cached = getattr(self, "_kernel_cache", None)
        if cached is None:
            arrays = tuple(
                np.ascontiguousarray(self.component_coeffs(c), dtype=np.float64)
                for c in range(3)
            )
            orders = np.array(
                [self.component_orders(c) for c in range(3)], dtype=np.int64
            )
            cached = arrays + (
                orders,
                np.asarray(self.grid.origin, dtype=np.float64),
                np.asarray(self.grid.spacing, dtype=np.float64),
            )
            object.__setattr__(self, "_kernel_cache", cached)
        return cached

    def velocity_many(self, pts: np.ndarray) -> np.ndarray:
        """Velocity (N, 3) at points (N, 3); zero outside the padded grid."""
        c0, c1, c2, orders, origin, spacing = self._kernel_components()
        pts = np.ascontiguousarray(pts, dtype=np.float64)
        vel = np.empty((len(pts), 3))
        _kernels.vel_jac_field(
            c0, c1, c2, orders, origin, spacing, pts, False, vel, _DUMMY_JAC
        )
        return vel

    def jacobian_many(self, pts: np.ndarray) -> np.ndarray:
        return self.velocity_and_jacobian_many(pts)[1]

    def velocity_and_jacobian_many(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Velocity (N, 3) and Jacobian d v_c / d x_d as (N, 3, 3)."""
        c0, c1, c2, orders, origin, spacing = self._kernel_components()
        pts = np.ascontiguousarray(pts, dtype=np.float64)
        vel = np.empty((len(pts), 3))
        jac = np.empty((len(pts), 3, 3))
        _kernels.vel_jac_field(
            c0, c1, c2, orders, origin, spacing, pts, True, vel, jac
        )
        return vel, jac

    def scatter_velocity_adjoint(self, pts: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Accumulate d(sum_n cotangent_n . v(p_n)) / d(theta) as a flat vector."""
        basis = _PointBasis(self.grid, pts)
        pieces = []
        for c in range(3):
            orders = self.component_orders(c)
            shape = self.grid.lattice_shape(orders)
            pieces.append(basis.scatter(cotangent[:, c], shape, orders).ravel())
        return self._assemble_flat(pieces)

    def _assemble_flat(self, pieces: list[np.ndarray]) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class DivConformingSVF(_SplineFieldBase):
    """Velocity field whose divergence is exactly an order-k scalar spline."""

    grid: ControlGrid
    coeffs_x: np.ndarray
    coeffs_y: np.ndarray
    coeffs_z: np.ndarray

    def __post_init__(self) -> None:
        for c, arr in enumerate((self.coeffs_x, self.coeffs_y, self.coeffs_z)):
            expected = self.grid.lattice_shape(self.component_orders(c))
            if arr.shape != expected:
                raise ConfigError(
                    f"component {'xyz'[c]} coefficients must have shape {expected}, "
                    f"got {arr.shape}"
                )

    @classmethod
    def zeros(cls, grid: ControlGrid) -> "DivConformingSVF":
        k = grid.divergence_order
        arrays = []
        for c in range(3):
            orders = tuple(k + 1 if d == c else k for d in range(3))
            arrays.append(np.zeros(grid.lattice_shape(orders)))
        return cls(grid, *arrays)

    def component_orders(self, comp: int) -> tuple[int, int, int]:
        k = self.grid.divergence_order
        return tuple(k + 1 if d == comp else k for d in range(3))

    def component_coeffs(self, comp: int) -> np.ndarray:
        return (self.coeffs_x, self.coeffs_y, self.coeffs_z)[comp]

    # -- divergence ---------------------------------------------------------

    def psi(self) -> np.ndarray:
        """Divergence-spline coefficients on the ``cells + k`` lattice."""
        sx, sy, sz = self.grid.spacing
        return (
            np.diff(self.coeffs_x, axis=0) / sx
            + np.diff(self.coeffs_y, axis=1) / sy
            + np.diff(self.coeffs_z, axis=2) / sz
        )

    def divergence_many(self, pts: np.ndarray) -> np.ndarray:
        k = self.grid.divergence_order
        return evaluate_component(self.grid, self.psi(), (k, k, k), pts)

    # -- parameter vector ---------------------------------------------------

    def coefficient_vector(self) -> np.ndarray:
        """Flat parameters: X block, then Y, then Z, each in C order."""
        return np.concatenate(
            [self.coeffs_x.ravel(), self.coeffs_y.ravel(), self.coeffs_z.ravel()]
        )

    def with_coefficients(self, theta: np.ndarray) -> "DivConformingSVF":
        shapes = [self.component_coeffs(c).shape for c in range(3)]
        sizes = [int(np.prod(s)) for s in shapes]
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (sum(sizes),):
            raise ConfigError(
                f"parameter vector must have length {sum(sizes)}, got {theta.shape}"
            )
        parts = np.split(theta, np.cumsum(sizes)[:-1])
        return DivConformingSVF(
            self.grid, *(p.reshape(s).copy() for p, s in zip(parts, shapes))
        )

    def _assemble_flat(self, pieces: list[np.ndarray]) -> np.ndarray:
        return np.concatenate(pieces)

    def negated(self) -> "DivConformingSVF":
        return DivConformingSVF(
            self.grid, -self.coeffs_x, -self.coeffs_y, -self.coeffs_z
        )

    def refined(self) -> "DivConformingSVF":
        """Same continuous field on the half-spacing grid (exact on the domain)."""
        fine_grid = self.grid.refined()
        arrays = []
        for c in range(3):
            arr = self.component_coeffs(c)
            orders = self.component_orders(c)
            for d in range(3):
                arr = _refine_axis(arr, d, orders[d], self.grid.cells[d])
            arrays.append(arr)
        return DivConformingSVF(fine_grid, *arrays)

    @property
    def n_parameters(self) -> int:
        return sum(self.component_coeffs(c).size for c in range(3))


@dataclass(frozen=True)
class ClassicalSVF(_SplineFieldBase):
    """Standard vector 3D B-spline field; all components share one order."""

    grid: ControlGrid
    coeffs: np.ndarray  # shape (nx + order, ny + order, nz + order, 3)
    order: int = 3

    def __post_init__(self) -> None:
        validate_order(self.order, minimum=1)
        expected = self.grid.lattice_shape((self.order,) * 3) + (3,)
        if self.coeffs.shape != expected:
            raise ConfigError(
                f"classical coefficients must have shape {expected}, got {self.coeffs.shape}"
            )

    @classmethod
    def zeros(cls, grid: ControlGrid, order: int = 3) -> "ClassicalSVF":
        return cls(grid, np.zeros(grid.lattice_shape((order,) * 3) + (3,)), order)

    def component_orders(self, comp: int) -> tuple[int, int, int]:
        return (self.order,) * 3

    def component_coeffs(self, comp: int) -> np.ndarray:
        return self.coeffs[..., comp]

    def coefficient_vector(self) -> np.ndarray:
        return self.coeffs.ravel().copy()

    def with_coefficients(self, theta: np.ndarray) -> "ClassicalSVF":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.coeffs.size,):
            raise ConfigError(
                f"parameter vector must have length {self.coeffs.size}, got {theta.shape}"
            )
        return ClassicalSVF(self.grid, theta.reshape(self.coeffs.shape).copy(), self.order)

    def _assemble_flat(self, pieces: list[np.ndarray]) -> np.ndarray:
        shape = self.coeffs.shape
        out = np.empty(shape)
        for c in range(3):
            out[..., c] = pieces[c].reshape(shape[:3])
        return out.ravel()

    def negated(self) -> "ClassicalSVF":
        return ClassicalSVF(self.grid, -self.coeffs, self.order)

    def refined(self) -> "ClassicalSVF":
        fine_grid = self.grid.refined()
        out = []
        for c in range(3):
            arr = self.coeffs[..., c]
            for d in range(3):
                arr = _refine_axis(arr, d, self.order, self.grid.cells[d])
            out.append(arr)
        return ClassicalSVF(fine_grid, np.stack(out, axis=-1), self.order)

    @property
    def n_parameters(self) -> int:
        return self.coeffs.size


def _refine_axis(coeffs: np.ndarray, dim: int, order: int, cells: int) -> np.ndarray:
    """Knot-halving subdivision along one axis.

    Coarse basis s expands as B_s = 2^-q sum_j C(q+1, j) B'_{ 2s - q + j }
    on the fine lattice; fine indices falling outside the stored range only
    carry support outside the covered domain and are dropped.
    """
    q = order
    coarse = np.moveaxis(coeffs, dim, 0)
    n_fine = 2 * cells + q
    fine = np.zeros((n_fine,) + coarse.shape[1:])
    scale = 2.0**-q
    for s in range(coarse.shape[0]):
        for j in range(q + 2):
            f = 2 * s - q + j
            if 0 <= f < n_fine:
                fine[f] += scale * comb(q + 1, j) * coarse[s]
    return np.moveaxis(fine, 0, dim)


# ---------------------------------------------------------------------------
# Spec-level single-point operations
# ---------------------------------------------------------------------------

def eval_velocity(svf: _SplineFieldBase, p) -> np.ndarray:
    """Velocity at one point (or an (N, 3) batch) with strict domain checks."""
    pts, single = _as_points(p)
    svf.check_inside(pts)
    out = svf.velocity_many(pts)
    return out[0] if single else out


def eval_divergence(svf, p) -> float | np.ndarray:
    """Analytic divergence; only defined for divergence-conforming fields."""
    if not isinstance(svf, DivConformingSVF):
        raise ConfigError(
            "divergence of a classical 3D B-spline field is not a B-spline; "
            "analytic divergence is only available for DivConformingSVF"
        )
    pts, single = _as_points(p)
    svf.check_inside(pts)
    out = svf.divergence_many(pts)
    return float(out[0]) if single else out


def eval_jacobian(svf: _SplineFieldBase, p) -> np.ndarray:
    """Analytic velocity Jacobian at one point (or an (N, 3) batch)."""
    pts, single = _as_points(p)
    svf.check_inside(pts)
    out = svf.jacobian_many(pts)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Serialization: binary container + JSON sidecar
# ---------------------------------------------------------------------------

_MAGIC = b"DCSV"
_VERSION = 1
_KIND_CONFORMING = 0
_KIND_CLASSICAL = 1
_HEADER = struct.Struct("<4sIBB2x3q3d3d")


def write_svf(svf: _SplineFieldBase, path: str) -> None:
    """Write the binary container and a JSON metadata sidecar (path + '.json')."""
    if isinstance(svf, DivConformingSVF):
        kind, order = _KIND_CONFORMING, svf.grid.divergence_order
        arrays = [svf.coeffs_x, svf.coeffs_y, svf.coeffs_z]
    elif isinstance(svf, ClassicalSVF):
        kind, order = _KIND_CLASSICAL, svf.order
        arrays = [svf.coeffs]
    else:
        raise ConfigError(f"cannot serialise field of type {type(svf).__name__}")
    g = svf.grid
    header = _HEADER.pack(
        _MAGIC, _VERSION, kind, order, *g.cells, *g.origin, *g.spacing
    )
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
    sidecar = {
        "format": "divreg-svf",
        "version": _VERSION,
        "kind": "div_conforming" if kind == _KIND_CONFORMING else "classical",
        "order": order,
        "cells": list(g.cells),
        "origin": list(g.origin),
        "spacing": list(g.spacing),
        "array_shapes": [list(a.shape) for a in arrays],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


def read_svf(path: str) -> DivConformingSVF | ClassicalSVF:
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
        magic, version, kind, order, cx, cy, cz, ox, oy, oz, sx, sy, sz = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported container version {version}")
        grid = ControlGrid(
            origin=(ox, oy, oz),
            spacing=(sx, sy, sz),
            cells=(cx, cy, cz),
            divergence_order=order if kind == _KIND_CONFORMING else 2,
        )
        data = f.read()
    if kind == _KIND_CONFORMING:
        svf = DivConformingSVF.zeros(grid)
        shapes = [svf.component_coeffs(c).shape for c in range(3)]
    elif kind == _KIND_CLASSICAL:
        shapes = [grid.lattice_shape((order,) * 3) + (3,)]
    else:
        raise FormatError(f"{path}: unknown field kind {kind}")
    expected = sum(int(np.prod(s)) for s in shapes) * 8
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload has {len(data)} bytes, expected {expected}"
        )
    flat = np.frombuffer(data, dtype="<f8").astype(np.float64)
    if kind == _KIND_CONFORMING:
        sizes = np.cumsum([int(np.prod(s)) for s in shapes])[:-1]
        parts = np.split(flat, sizes)
        return DivConformingSVF(
            grid, *(p.reshape(s).copy() for p, s in zip(parts, shapes))
        )
    return ClassicalSVF(grid, flat.reshape(shapes[0]).copy(), order)
