"""Exact 1D uniform B-spline basis functions of orders 0 to 3.

Centered basis closed forms:

    B0(t) = 1 on [-1/2, 1/2)                       (half-open cell)
    B1(t) = 1 - |t|            on [-1, 1]
    B2(t) = 3/4 - t^2          on |t| < 1/2
            (3/2 - |t|)^2 / 2  on 1/2 <= |t| < 3/2
    B3(t) = (4 - 3 t^2 (2 - |t|)) / 6  on |t| < 1
            (2 - |t|)^3 / 6            on 1 <= |t| < 2

Derivatives follow the half-shift recurrence

    d/dt B_k(t) = B_{k-1}(t + 1/2) - B_{k-1}(t - 1/2),   k >= 1,

which keeps every derivative inside the same basis family.  B0 uses a
half-open cell so that integer-shifted copies tile the line exactly once;
consequently B0(-1/2) = 1 and B0(+1/2) = 0.

Knot-shifted evaluation on a uniform axis with spacing ``du`` places the
basis attached to knot ``u_i`` at ``B_k((u - u_i)/du - (k+1)/2)``, giving
the open support ``]u_i, u_i + (k+1) du[`` (half-open for k = 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MAX_ORDER = 3


def validate_order(k: int, minimum: int = 0) -> int:
    """Check that ``k`` is a supported spline order and return it."""
    if not isinstance(k, (int, np.integer)):
        raise ConfigError(f"spline order must be an integer, got {k!r}")
    if k < minimum or k > MAX_ORDER:
        raise ConfigError(
            f"spline order {k} outside supported range [{minimum}, {MAX_ORDER}]"
        )
    return int(k)


@dataclass(frozen=True)
class KnotAxis:
    """Uniform 1D knot lattice.

    Stored knot ``s`` (0-based, ``0 <= s < knot_count``) sits at
    ``origin + s * spacing``.  ``index_offset`` records the shift between
    storage indices and the logical lattice indexing used elsewhere in the
    package: logical index ``i`` maps to storage ``s = i + index_offset``.
    Keeping the offset here avoids negative-index arithmetic at call sites.
    """

    spacing: float
    knot_count: int
    origin: float
    index_offset: int = 0

    def __post_init__(self) -> None:
        if self.spacing <= 0.0:
            raise ConfigError(f"knot spacing must be positive, got {self.spacing}")
        if self.knot_count < 1:
            raise ConfigError(f"knot_count must be >= 1, got {self.knot_count}")

    def knot_position(self, s: int) -> float:
        """Physical coordinate of stored knot ``s``."""
        self._check_index(s)
        return self.origin + s * self.spacing

    def support(self, s: int, k: int) -> tuple[float, float]:
        """Open support interval of basis ``s`` at order ``k``."""
        u0 = self.knot_position(s)
        return u0, u0 + (k + 1) * self.spacing

    def _check_index(self, s: int) -> None:
        if not 0 <= s < self.knot_count:
            raise IndexError(
                f"knot index {s} outside storage range [0, {self.knot_count})"
            )


def eval_centered(k: int, t) -> np.ndarray | float:
    """Evaluate the centered basis ``B_k`` at ``t`` (scalar or array)."""
    validate_order(k)
    t_arr = np.asarray(t, dtype=np.float64)
    out = _eval_centered_arr(k, t_arr)
    if np.isscalar(t) or t_arr.ndim == 0:
        return float(out)
    return out


def _eval_centered_arr(k: int, t: np.ndarray) -> np.ndarray:
    a = np.abs(t)
    if k == 0:
        return np.where((t >= -0.5) & (t < 0.5), 1.0, 0.0)
    if k == 1:
        return np.where(a < 1.0, 1.0 - a, 0.0)
    if k == 2:
        inner = 0.75 - t * t
        outer = 0.5 * (1.5 - a) ** 2
        return np.where(a < 0.5, inner, np.where(a < 1.5, outer, 0.0))
    inner = (4.0 - 3.0 * t * t * (2.0 - a)) / 6.0
    outer = (2.0 - a) ** 3 / 6.0
    return np.where(a < 1.0, inner, np.where(a < 2.0, outer, 0.0))


def eval_centered_derivative(k: int, t) -> np.ndarray | float:
    """First derivative of ``B_k`` via the half-shift recurrence (k >= 1)."""
    validate_order(k, minimum=1)
    t_arr = np.asarray(t, dtype=np.float64)
    out = _eval_centered_arr(k - 1, t_arr + 0.5) - _eval_centered_arr(k - 1, t_arr - 0.5)
    if np.isscalar(t) or t_arr.ndim == 0:
        return float(out)
    return out


def eval_centered_second_derivative(k: int, t) -> np.ndarray | float:
    """Second derivative of ``B_k``, requiring k >= 2."""
    validate_order(k, minimum=2)
    t_arr = np.asarray(t, dtype=np.float64)
    out = (
        _eval_centered_arr(k - 2, t_arr + 1.0)
        - 2.0 * _eval_centered_arr(k - 2, t_arr)
        + _eval_centered_arr(k - 2, t_arr - 1.0)
    )
    if np.isscalar(t) or t_arr.ndim == 0:
        return float(out)
    return out


def _knot_argument(axis: KnotAxis, s: int, k: int, u) -> np.ndarray:
    # The cell coordinate (u - origin)/spacing is computed once and shared by
    # every knot index, so neighbouring bases see bit-identical arguments and
    # partition of unity survives floating point at cell boundaries.
    axis._check_index(s)
    u_arr = np.asarray(u, dtype=np.float64)
    return (u_arr - axis.origin) / axis.spacing - s - 0.5 * (k + 1)


def eval_knot_basis(axis: KnotAxis, s: int, k: int, u) -> np.ndarray | float:
    """Evaluate basis ``B_k`` attached to stored knot ``s`` at coordinate ``u``.

    Nonzero exactly on the open interval ``]u_s, u_s + (k+1) spacing[``
    (half-open ``[u_s, u_s + spacing[`` for k = 0).
    """
    validate_order(k)
    arg = _knot_argument(axis, s, k, u)
    out = _eval_centered_arr(k, arg)
    if np.isscalar(u) or arg.ndim == 0:
        return float(out)
    return out


def eval_knot_basis_derivative(axis: KnotAxis, s: int, k: int, u) -> np.ndarray | float:
    """d/du of the knot basis; recurrence value scaled by 1/spacing."""
    validate_order(k, minimum=1)
    arg = _knot_argument(axis, s, k, u)
    out = (
        _eval_centered_arr(k - 1, arg + 0.5) - _eval_centered_arr(k - 1, arg - 0.5)
    ) / axis.spacing
    if np.isscalar(u) or arg.ndim == 0:
        return float(out)
    return out
