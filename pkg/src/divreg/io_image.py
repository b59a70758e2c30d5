"""Volume and mask I/O (NIfTI-1 subset), phantoms, and synthetic ground truth.

The NIfTI support is deliberately a strict subset: single-file ``.nii``,
datatypes uint8/float32/float64, no compression, no extensions, sform-only
axis-aligned orientation.  Anything else is rejected with an error naming
the offending header field, which keeps round-trips bit-exact and testable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .constraint import MaskRegion, project_classical_at_knots, build_constraint_system
from .errors import ConfigError, FormatError
from .field import ClassicalSVF, ControlGrid, DivConformingSVF
from .flow import VoxelGeometry


@dataclass(frozen=True)
class Image3D:
    """Scalar volume on an axis-aligned voxel grid (world mm frame)."""

    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 3:
            raise ConfigError(f"image data must be 3D, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"image spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("image intensities must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def geometry(self) -> VoxelGeometry:
        return VoxelGeometry(self.origin, self.spacing, self.dims)


# ---------------------------------------------------------------------------
# NIfTI-1 subset
# ---------------------------------------------------------------------------

_HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert _HEADER_DTYPE.itemsize == 348

_DTYPE_CODES = {2: np.uint8, 16: np.float32, 64: np.float64}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}
_INTENT_VECTOR = 1007


def write_nifti(
    volume: np.ndarray,
    path: str,
    spacing=(1.0, 1.0, 1.0),
    origin=(0.0, 0.0, 0.0),
    dtype=np.float64,
) -> None:
    """Write a scalar (nx,ny,nz) or vector (nx,ny,nz,3) volume as .nii."""
    arr = np.asarray(volume)
    vector = arr.ndim == 4
    if vector and arr.shape[3] != 3:
        raise ConfigError(f"vector volumes must have 3 components, got {arr.shape}")
    if arr.ndim not in (3, 4):
        raise ConfigError(f"volume must be 3D or 4D, got shape {arr.shape}")
    dtype = np.dtype(dtype)
    if dtype not in _CODE_FOR_DTYPE:
        raise ConfigError(f"unsupported write dtype {dtype}")
    hdr = np.zeros((), dtype=_HEADER_DTYPE)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 5 if vector else 3
    dim[1:4] = arr.shape[:3]
    if vector:
        dim[5] = 3
    hdr["dim"] = dim
    hdr["datatype"] = _CODE_FOR_DTYPE[dtype]
    hdr["bitpix"] = dtype.itemsize * 8
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    if vector:
        hdr["intent_code"] = _INTENT_VECTOR
    hdr["sform_code"] = 1
    for i, name in enumerate(("srow_x", "srow_y", "srow_z")):
        row = np.zeros(4, dtype=np.float32)
        row[i] = spacing[i]
        row[3] = origin[i]
        hdr[name] = row
    hdr["magic"] = b"n+1"
    data = np.ascontiguousarray(arr, dtype=dtype)
    if vector:
        data = data[:, :, :, None, :]  # file axis order (x,y,z,t,u)
    with open(path, "wb") as f:
        f.write(hdr.tobytes())
        f.write(b"\x00" * 4)  # pad to vox_offset 352
        f.write(data.ravel(order="F").astype(dtype.newbyteorder("<")).tobytes())


def write_image(img: Image3D, path: str, dtype=np.float64) -> None:
    write_nifti(img.data, path, spacing=img.spacing, origin=img.origin, dtype=dtype)


def _parse_header(raw: bytes, path: str):
    if len(raw) < 348:
        raise FormatError(f"{path}: truncated header, {len(raw)} < 348 bytes")
    hdr = np.frombuffer(raw[:348], dtype=_HEADER_DTYPE)[0]
    swapped = False
    if int(hdr["sizeof_hdr"]) != 348:
        hdr = np.frombuffer(raw[:348], dtype=_HEADER_DTYPE.newbyteorder(">"))[0]
        swapped = True
        if int(hdr["sizeof_hdr"]) != 348:
            raise FormatError(f"{path}: sizeof_hdr is not 348 in either byte order")
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic != b"n+1":
        raise FormatError(f"{path}: magic {magic!r} is not 'n+1' (single-file NIfTI-1)")
    return hdr, swapped


def read_nifti(path: str) -> tuple[np.ndarray, tuple, tuple]:
    """Read the subset; returns (array, spacing, origin).

    Scalar volumes come back as (nx,ny,nz); vector volumes as (nx,ny,nz,3).
    """
    with open(path, "rb") as f:
        raw = f.read()
    hdr, swapped = _parse_header(raw, path)
    code = int(hdr["datatype"])
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unsupported datatype code {code}")
    dtype = np.dtype(_DTYPE_CODES[code])
    ndim = int(hdr["dim"][0])
    if ndim == 3:
        shape = tuple(int(v) for v in hdr["dim"][1:4]) + (1, 1)
    elif ndim in (4, 5):
        shape = tuple(int(v) for v in hdr["dim"][1:6])
        if shape[3] != 1 or shape[4] not in (1, 3):
            raise FormatError(f"{path}: unsupported dim layout {hdr['dim'][:6]}")
    else:
        raise FormatError(f"{path}: unsupported dim[0] = {ndim}")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise FormatError(f"{path}: scl_slope/scl_inter rescaling not supported")
    spacing = tuple(float(v) for v in hdr["pixdim"][1:4])
    if any(s <= 0 for s in spacing):
        raise FormatError(f"{path}: pixdim must be positive, got {spacing}")
    if int(hdr["sform_code"]) < 1:
        raise FormatError(f"{path}: sform_code must be >= 1 (sform-only subset)")
    srow = np.stack([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]]).astype(np.float64)
    rot = srow[:, :3]
    if not np.allclose(rot, np.diag(np.diag(rot)), atol=1e-4 * max(spacing)):
        raise FormatError(f"{path}: srow matrix is not axis-aligned diagonal")
    diag = np.diag(rot)
    if np.any(diag <= 0):
        raise FormatError(f"{path}: negative/zero srow diagonal not supported")
    if not np.allclose(diag, spacing, rtol=1e-4):
        raise FormatError(f"{path}: srow diagonal disagrees with pixdim")
    origin = tuple(float(v) for v in srow[:, 3])
    offset = int(hdr["vox_offset"])
    n_items = int(np.prod(shape))
    need = offset + n_items * dtype.itemsize
    if len(raw) < need:
        raise FormatError(
            f"{path}: truncated data section ({len(raw)} bytes, need {need})"
        )
    file_dtype = dtype.newbyteorder(">" if swapped else "<")
    flat = np.frombuffer(raw[offset : offset + n_items * dtype.itemsize], dtype=file_dtype)
    arr = flat.reshape(shape, order="F").astype(dtype)
    arr = arr[:, :, :, 0]
    if arr.shape[3] == 1:
        arr = arr[:, :, :, 0]
    return np.ascontiguousarray(arr), spacing, origin


def read_image(path: str) -> Image3D:
    arr, spacing, origin = read_nifti(path)
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected a scalar volume, got shape {arr.shape}")
    return Image3D(origin=origin, spacing=spacing, data=arr.astype(np.float64))


def read_mask(path: str) -> MaskRegion:
    arr, spacing, origin = read_nifti(path)
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected a scalar mask volume, got {arr.shape}")
    return MaskRegion(origin=origin, spacing=spacing, mask=arr != 0)


def write_mask(mask: MaskRegion, path: str) -> None:
    write_nifti(
        mask.mask.astype(np.uint8), path, spacing=mask.spacing, origin=mask.origin,
        dtype=np.uint8,
    )


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic synthetic volume recipe."""

    kind: str = "sphere-shells"
    size: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    smooth_sigma: float = 0.8  # voxels; 0 disables
    texture_amplitude: float = 0.08
    modality_pair: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("sphere-shells", "sinusoid-texture", "checker-smooth"):
            raise ConfigError(f"unknown phantom kind {self.kind!r}")

    @property
    def geometry(self) -> VoxelGeometry:
        return VoxelGeometry(self.origin, self.spacing, self.size)


SHELL_RADII = (0.2, 0.35, 0.5, 0.68)  # fractions of the min half-extent
SHELL_LEVELS = (1.0, 0.72, 0.45, 0.22)


def _coords(spec: PhantomSpec) -> np.ndarray:
    idx = np.indices(spec.size).astype(np.float64)
    return np.asarray(spec.origin)[:, None, None, None] + idx * np.asarray(spec.spacing)[
        :, None, None, None
    ]


def _extent(spec: PhantomSpec) -> np.ndarray:
    return (np.asarray(spec.size) - 1) * np.asarray(spec.spacing)


def sphere_shell_occupancy(spec: PhantomSpec) -> np.ndarray:
    """Raw shell label volume (no smoothing, no texture): outermost first."""
    xyz = _coords(spec)
    center = np.asarray(spec.origin) + 0.5 * _extent(spec)
    r = np.sqrt(((xyz - center[:, None, None, None]) ** 2).sum(axis=0))
    rmax = 0.5 * _extent(spec).min()
    out = np.zeros(spec.size)
    for frac, level in sorted(zip(SHELL_RADII, SHELL_LEVELS), reverse=True):
        out[r <= frac * rmax] = level
    return out


def sinusoid_texture_function(spec: PhantomSpec):
    """Analytic multi-frequency texture; usable as an interpolation oracle."""
    rng = np.random.default_rng(spec.seed)
    ext = _extent(spec)
    waves = []
    for scale, amp in ((4.0, 0.25), (9.0, 0.12), (17.0, 0.06)):
        freq = 2.0 * np.pi * scale / ext
        phase = rng.uniform(0, 2 * np.pi, size=3)
        waves.append((freq, phase, amp))

    def f(pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        rel = pts - np.asarray(spec.origin)
        out = np.full(pts.shape[:-1], 0.5)
        for freq, phase, amp in waves:
            out = out + amp * np.prod(np.sin(rel * freq + phase), axis=-1)
        return out

    return f


def _modality_transfer(x: np.ndarray) -> np.ndarray:
    """Smooth, monotone, strongly non-affine intensity remapping."""
    lo, hi = x.min(), x.max()
    t = (x - lo) / (hi - lo if hi > lo else 1.0)
    return np.exp(-4.0 * t)


def make_phantom(spec: PhantomSpec):
    """Deterministic phantom; with ``modality_pair`` returns (m1, m2)."""
    if spec.kind == "sphere-shells":
        vol = sphere_shell_occupancy(spec)
        if spec.texture_amplitude > 0:
            f = sinusoid_texture_function(spec)
            pts = spec.geometry.voxel_centers().reshape(spec.size + (3,))
            vol = vol + spec.texture_amplitude * (f(pts) - 0.5)
    elif spec.kind == "sinusoid-texture":
        f = sinusoid_texture_function(spec)
        pts = spec.geometry.voxel_centers().reshape(spec.size + (3,))
        vol = f(pts)
    else:  # checker-smooth
        xyz = _coords(spec)
        lam = _extent(spec) / 6.0
        s = np.prod(
            np.sin(np.pi * (xyz - np.asarray(spec.origin)[:, None, None, None])
                   / lam[:, None, None, None]),
            axis=0,
        )
        vol = 0.5 + 0.5 * np.tanh(3.0 * s)
    if spec.smooth_sigma > 0:
        vol = ndimage.gaussian_filter(vol, spec.smooth_sigma, mode="nearest")
    img1 = Image3D(origin=spec.origin, spacing=spec.spacing, data=vol)
    if not spec.modality_pair:
        return img1
    img2 = Image3D(origin=spec.origin, spacing=spec.spacing, data=_modality_transfer(vol))
    return img1, img2


def make_ball_mask(
    geometry: VoxelGeometry, center_frac=(0.5, 0.5, 0.5), radius_frac: float = 0.35
) -> MaskRegion:
    """Ball-shaped mask centred at a fractional position of the volume."""
    idx = np.indices(geometry.dims).astype(np.float64)
    centers = np.asarray(geometry.origin)[:, None, None, None] + idx * np.asarray(
        geometry.spacing
    )[:, None, None, None]
    ext = (np.asarray(geometry.dims) - 1) * np.asarray(geometry.spacing)
    c = np.asarray(geometry.origin) + np.asarray(center_frac) * ext
    r = radius_frac * 0.5 * ext.min()
    inside = np.sqrt(((centers - c[:, None, None, None]) ** 2).sum(axis=0)) <= r
    return MaskRegion(origin=geometry.origin, spacing=geometry.spacing, mask=inside)


# ---------------------------------------------------------------------------
# Synthetic ground-truth velocity fields
# ---------------------------------------------------------------------------

def full_domain_mask(grid: ControlGrid) -> MaskRegion:
    """One voxel per grid cell, exactly tiling the covered domain."""
    origin = tuple(
        grid.origin[d] + 0.5 * grid.spacing[d] for d in range(3)
    )
    return MaskRegion(
        origin=origin, spacing=grid.spacing, mask=np.ones(grid.cells, dtype=bool)
    )


def _smooth_random_lattice(shape, rng, sigma=1.5):
    out = rng.standard_normal(shape)
    return ndimage.gaussian_filter(out, sigma=sigma, mode="nearest")


def _scaled_to_amplitude(svf, amplitude, probe_pts):
    vmax = np.max(np.linalg.norm(svf.velocity_many(probe_pts), axis=1))
    if vmax == 0:
        return svf
    return svf.with_coefficients(svf.coefficient_vector() * (amplitude / vmax))


def make_ground_truth_svf(
    grid: ControlGrid,
    seed: int,
    amplitude: float,
    max_exit_fraction: float = 0.01,
) -> tuple[ClassicalSVF, DivConformingSVF]:
    """Two-step synthetic ground truth.

    Returns a quasi-divergence-free classical cubic field (random smooth
    field projected so its divergence vanishes at every knot) and an exactly
    feasible divergence-conforming field (coefficient-space projection
    against the full-domain constraint system).  If more than
    ``max_exit_fraction`` of probe trajectories leave the padded domain the
    amplitude is reduced and the fields are regenerated.
    """
    from .flow import EulerConfig, exponential_euler  # deferred: io <-> flow

    rng = np.random.default_rng(seed)
    probe_geom = VoxelGeometry(
        origin=grid.origin,
        spacing=tuple((hi - lo) / 23 for lo, hi in zip(grid.domain_lo, grid.domain_hi)),
        dims=(24, 24, 24),
    )
    probe_pts = probe_geom.voxel_centers()
    cfg = EulerConfig(steps=16)

    amp = float(amplitude)
    for _ in range(6):
        lat = grid.lattice_shape((3, 3, 3)) + (3,)
        classical = ClassicalSVF(
            grid, _smooth_random_lattice(lat, np.random.default_rng(seed)), order=3
        )
        classical = _scaled_to_amplitude(classical, amp, probe_pts)
        classical = project_classical_at_knots(classical)

        z = DivConformingSVF.zeros(grid)
        conforming = DivConformingSVF(
            grid,
            _smooth_random_lattice(z.coeffs_x.shape, rng),
            _smooth_random_lattice(z.coeffs_y.shape, rng),
            _smooth_random_lattice(z.coeffs_z.shape, rng),
        )
        system = build_constraint_system(grid, full_domain_mask(grid))
        theta = system.project_nullspace(conforming.coefficient_vector())
        conforming = conforming.with_coefficients(theta)
        conforming = _scaled_to_amplitude(conforming, amp, probe_pts)

        ok = True
        for svf in (classical, conforming):
            for signed in (svf, svf.negated()):
                flags = exponential_euler(signed, cfg, probe_geom).out_of_domain
                if flags.mean() > max_exit_fraction:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return classical, conforming
        amp *= 0.7
    raise ConfigError(
        f"could not generate in-domain ground truth at amplitude {amplitude}"
    )
