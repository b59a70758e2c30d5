"""Active index sets, sparse divergence constraints, and projections.

A divergence-lattice index is *active* when the open tensor-product support
box of its order-k basis functions overlaps at least one masked voxel with
positive measure (voxels are closed boxes of one spacing centred at voxel
centres, supports are open boxes).  One sparse constraint row per active
index drives the corresponding divergence-spline coefficient to zero, which
by the bounding property of B-splines makes the continuous divergence vanish
on the whole masked region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, GeometryError, SolverError
from .field import ClassicalSVF, ControlGrid, DivConformingSVF, _PointBasis


@dataclass(frozen=True)
class MaskRegion:
    """Binary voxel occupancy with its grid geometry (world mm frame)."""

    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    mask: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        if self.mask.ndim != 3:
            raise ConfigError(f"mask must be 3D, got shape {self.mask.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"mask spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.mask.shape

    @property
    def n_inside(self) -> int:
        return int(self.mask.sum())

    @property
    def is_empty(self) -> bool:
        return not self.mask.any()

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform random points over the union of masked voxel boxes."""
        idx = np.argwhere(self.mask)
        if len(idx) == 0:
            raise ConfigError("cannot sample points from an empty mask")
        pick = idx[rng.integers(0, len(idx), size=n)]
        centers = np.asarray(self.origin) + pick * np.asarray(self.spacing)
        jitter = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.asarray(self.spacing)
        return centers + jitter


# Tolerance (in voxel-index units) for open-vs-closed comparisons on voxel
# boundaries; sub-voxel, so it can only decide exact-touch degeneracies.
_EDGE_EPS = 1e-9


def active_index_set(grid: ControlGrid, mask: MaskRegion) -> np.ndarray:
    """Divergence-lattice storage indices whose support box meets the mask.

    Returns an (M, 3) int array in lexicographic order.  An empty mask gives
    an empty set; a non-empty mask that lies entirely outside the grid's
    padded domain is treated as a frame mismatch.
    """
    k = grid.divergence_order
    if mask.is_empty:
        return np.zeros((0, 3), dtype=np.int64)

    lo_pad, hi_pad = grid.padded_bounds(k + 1)
    occ = np.argwhere(mask.mask)
    centers_lo = np.asarray(mask.origin) + occ.min(axis=0) * np.asarray(mask.spacing)
    centers_hi = np.asarray(mask.origin) + occ.max(axis=0) * np.asarray(mask.spacing)
    if np.any(centers_hi + 0.5 * np.asarray(mask.spacing) < lo_pad) or np.any(
        centers_lo - 0.5 * np.asarray(mask.spacing) > hi_pad
    ):
        raise GeometryError(
            "mask lies entirely outside the control grid domain; "
            "check that mask and grid share a physical frame"
        )

    # Per axis: voxel index window overlapping each basis support with
    # positive measure.  Support of storage index s is the open interval
    # ]origin + (s - k) h, origin + (s + 1) h[.
    windows = []
    for d in range(3):
        count = grid.cells[d] + k
        h = grid.spacing[d]
        half = 0.5 * mask.spacing[d]
        s = np.arange(count)
        sup_lo = grid.origin[d] + (s - k) * h
        sup_hi = grid.origin[d] + (s + 1) * h
        # center + half > sup_lo  and  center - half < sup_hi
        c0 = mask.origin[d]
        j_lo = np.ceil((sup_lo - half - c0) / mask.spacing[d] + _EDGE_EPS).astype(int)
        j_hi = np.floor((sup_hi + half - c0) / mask.spacing[d] - _EDGE_EPS).astype(int)
        j_lo = np.clip(j_lo, 0, mask.dims[d])
        j_hi = np.clip(j_hi, -1, mask.dims[d] - 1)
        windows.append((j_lo, j_hi))

    cum = np.zeros(tuple(n + 1 for n in mask.dims), dtype=np.int64)
    cum[1:, 1:, 1:] = mask.mask.cumsum(0).cumsum(1).cumsum(2)

    (xl, xh), (yl, yh), (zl, zh) = windows
    counts = _box_counts(cum, xl, xh, yl, yh, zl, zh)
    return np.argwhere(counts > 0).astype(np.int64)


def _box_counts(cum, xl, xh, yl, yh, zl, zh):
    """Inclusive 3D box sums over the mask for every index combination."""
    empty = (
        (xh < xl)[:, None, None]
        | (yh < yl)[None, :, None]
        | (zh < zl)[None, None, :]
    )

    def g(ix, iy, iz):
        return cum[np.ix_(np.clip(ix, 0, cum.shape[0] - 1),
                          np.clip(iy, 0, cum.shape[1] - 1),
                          np.clip(iz, 0, cum.shape[2] - 1))]

    ix_hi, ix_lo = xh + 1, xl
    iy_hi, iy_lo = yh + 1, yl
    iz_hi, iz_lo = zh + 1, zl
    total = (
        g(ix_hi, iy_hi, iz_hi)
        - g(ix_lo, iy_hi, iz_hi)
        - g(ix_hi, iy_lo, iz_hi)
        - g(ix_hi, iy_hi, iz_lo)
        + g(ix_lo, iy_lo, iz_hi)
        + g(ix_lo, iy_hi, iz_lo)
        + g(ix_hi, iy_lo, iz_lo)
        - g(ix_lo, iy_lo, iz_lo)
    )
    return np.where(empty, 0, total)


class NullspaceProjector:
    """Orthogonal projection onto ker(A) for a sparse wide matrix A.

    Solves the Schur complement system ``A A^T lam = A v`` by conjugate
    gradient with Jacobi preconditioning, applies iterative refinement until
    the constraint residual reaches ``tol_abs``, and falls back to LSMR (the
    regularisation-free least-norm multiplier) for rank-deficient or badly
    conditioned systems.
    """

    def __init__(self, matrix: sp.csr_matrix):
        self.matrix = matrix.tocsr()
        if matrix.shape[0] > 0:
            gram = (self.matrix @ self.matrix.T).tocsr()
            diag = gram.diagonal()
            self._gram = gram
            self._precond = spla.LinearOperator(
                gram.shape, matvec=lambda x, d=1.0 / np.where(diag > 0, diag, 1.0): d * x
            )
        else:
            self._gram = None
            self._precond = None

    def project(self, v: np.ndarray, tol_rel: float = 1e-12) -> np.ndarray:
        """Project ``v``; guarantees ||A out||_inf <= tol_rel * max(1, ||v||_inf)."""
        if self.matrix.shape[0] == 0:
            return np.asarray(v, dtype=np.float64).copy()
        v = np.asarray(v, dtype=np.float64)
        scale = float(np.max(np.abs(v))) if v.size else 0.0
        if scale == 0.0:
            return v.copy()
        A = self.matrix
        vn = v / scale
        out = vn.copy()
        bound = tol_rel * max(1.0, scale) / scale  # residual bound on vn
        target = 0.01 * bound
        stalled = False
        for _ in range(4):
            b = A @ out
            res = float(np.max(np.abs(b)))
            if res <= target:
                return out * scale
            lam, info = spla.cg(
                self._gram, b, rtol=1e-13, atol=0.25 * target, M=self._precond,
                maxiter=5000,
            )
            if info != 0:
                stalled = True
                break
            out = out - A.T @ lam
        res = float(np.max(np.abs(A @ out)))
        if stalled or res > bound:
            lam = spla.lsmr(
                A.T, vn, atol=1e-14, btol=1e-14, conlim=0.0, maxiter=20000
            )[0]
            out = vn - A.T @ lam
            for _ in range(3):
                b = A @ out
                if float(np.max(np.abs(b))) <= target:
                    break
                # Minimal-norm correction with A c = b lies in range(A^T).
                out = out - spla.lsmr(A, b, atol=1e-14, btol=1e-14, conlim=0.0)[0]
            res = float(np.max(np.abs(A @ out)))
            if res > bound:
                raise SolverError(
                    "null-space projection did not converge: relative residual "
                    f"{res:.3e} exceeds {bound:.3e}"
                )
        return out * scale


class ConstraintSystem:
    """Sparse rows driving the active divergence coefficients to zero.

    ``matrix @ theta`` equals the vector of active psi values for any flat
    parameter vector of the matching :class:`DivConformingSVF` layout.
    """

    def __init__(self, grid: ControlGrid, active_indices: np.ndarray, matrix: sp.csr_matrix):
        self.grid = grid
        self.active_indices = active_indices
        self.matrix = matrix
        self._projector = NullspaceProjector(matrix)

    @property
    def n_constraints(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_parameters(self) -> int:
        return self.matrix.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.n_constraints == 0

    def residual(self, theta: np.ndarray) -> np.ndarray:
        return self.matrix @ theta

    def residual_inf(self, theta: np.ndarray) -> float:
        if self.is_empty:
            return 0.0
        return float(np.max(np.abs(self.matrix @ theta)))

    def project_nullspace(self, v: np.ndarray, tol_rel: float = 1e-12) -> np.ndarray:
        """Orthogonal projection of ``v`` onto the feasible subspace."""
        return self._projector.project(v, tol_rel)

    def export_triplets(self, path: str) -> None:
        """Write 'row col value' text triplets plus a JSON index manifest."""
        coo = self.matrix.tocoo()
        with open(path, "w") as f:
            f.write(f"# rows {coo.shape[0]} cols {coo.shape[1]} nnz {coo.nnz}\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                f.write(f"{r} {c} {v!r}\n")
        manifest = {
            "n_constraints": int(self.n_constraints),
            "n_parameters": int(self.n_parameters),
            "active_indices": self.active_indices.tolist(),
        }
        with open(path + ".manifest.json", "w") as f:
            json.dump(manifest, f)
            f.write("\n")

    @classmethod
    def empty(cls, grid: ControlGrid) -> "ConstraintSystem":
        n_params = DivConformingSVF.zeros(grid).n_parameters
        return cls(
            grid,
            np.zeros((0, 3), dtype=np.int64),
            sp.csr_matrix((0, n_params)),
        )


def assemble_constraints(grid: ControlGrid, indices: np.ndarray) -> ConstraintSystem:
    """Build the sparse psi rows for the given divergence-lattice indices."""
    k = grid.divergence_order
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    div_shape = grid.lattice_shape((k, k, k))
    if len(indices) and (
        indices.min() < 0 or np.any(indices >= np.asarray(div_shape))
    ):
        raise IndexError(
            f"constraint indices outside divergence lattice {div_shape}"
        )

    template = DivConformingSVF.zeros(grid)
    shapes = [template.component_coeffs(c).shape for c in range(3)]
    offsets = np.cumsum([0] + [int(np.prod(s)) for s in shapes])

    m = len(indices)
    rows = np.repeat(np.arange(m), 6)
    cols = np.empty(6 * m, dtype=np.int64)
    data = np.empty(6 * m)
    sx, sy, sz = indices[:, 0], indices[:, 1], indices[:, 2]
    # With the padded lattices both difference operands always exist; the
    # shifted index stays within the component array by construction.
    for c, shift in enumerate(((1, 0, 0), (0, 1, 0), (0, 0, 1))):
        plus = np.ravel_multi_index(
            (sx + shift[0], sy + shift[1], sz + shift[2]), shapes[c]
        )
        minus = np.ravel_multi_index((sx, sy, sz), shapes[c])
        inv = 1.0 / grid.spacing[c]
        cols[2 * c::6] = offsets[c] + plus
        data[2 * c::6] = inv
        cols[2 * c + 1::6] = offsets[c] + minus
        data[2 * c + 1::6] = -inv
    matrix = sp.csr_matrix(
        (data, (rows, cols)), shape=(m, int(offsets[-1]))
    )
    return ConstraintSystem(grid, indices, matrix)


def build_constraint_system(grid: ControlGrid, mask: MaskRegion) -> ConstraintSystem:
    return assemble_constraints(grid, active_index_set(grid, mask))


def project_divergence_free(
    theta0: np.ndarray, system: ConstraintSystem, tol: float = 1e-12
) -> np.ndarray:
    """Closest parameter vector (Euclidean) satisfying all psi constraints."""
    return system.project_nullspace(np.asarray(theta0, dtype=np.float64), tol)


# ---------------------------------------------------------------------------
# Classical-field knot-point projection (ground-truth generation)
# ---------------------------------------------------------------------------

def classical_knot_constraints(grid: ControlGrid, order: int = 3) -> sp.csr_matrix:
    """Rows of pointwise divergence at every stored knot of a classical field.

    Row entries are the analytic d v_c / d x_c basis products evaluated at
    the knot positions, laid out against the classical flat parameter vector
    (C-order lattice with the component as the fastest axis).
    """
    shape = grid.lattice_shape((order,) * 3)
    ks = np.stack(
        np.meshgrid(*(np.arange(n) for n in shape), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    pts = np.asarray(grid.origin) + (ks - order) * np.asarray(grid.spacing)
    basis = _PointBasis(grid, pts)
    orders = (order,) * 3
    n_pts = len(pts)
    blocks = []
    for c in range(3):
        derivs = tuple(1 if d == c else 0 for d in range(3))
        ix, wx = basis.axis(0, order, derivs[0])
        iy, wy = basis.axis(1, order, derivs[1])
        iz, wz = basis.axis(2, order, derivs[2])
        w3 = wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]
        lat = (
            (ix[:, :, None, None] * shape[1] + iy[:, None, :, None]) * shape[2]
            + iz[:, None, None, :]
        )
        cols = (lat * 3 + c).reshape(n_pts, -1)
        rows = np.broadcast_to(np.arange(n_pts)[:, None], cols.shape)
        blocks.append((rows.ravel(), cols.ravel(), w3.reshape(n_pts, -1).ravel()))
    rows = np.concatenate([b[0] for b in blocks])
    cols = np.concatenate([b[1] for b in blocks])
    data = np.concatenate([b[2] for b in blocks])
    keep = data != 0.0
    n_params = int(np.prod(shape)) * 3
    return sp.csr_matrix(
        (data[keep], (rows[keep], cols[keep])), shape=(n_pts, n_params)
    )


def project_classical_at_knots(svf0: ClassicalSVF, tol_abs: float = 1e-11) -> ClassicalSVF:
    """Nearest classical field whose divergence vanishes at every knot."""
    A = classical_knot_constraints(svf0.grid, svf0.order)
    theta0 = svf0.coefficient_vector()
    if not (A @ theta0).any():
        return svf0.with_coefficients(theta0)
    theta = NullspaceProjector(A).project(theta0, tol_abs)
    return svf0.with_coefficients(theta)
