"""Resampling of sample grids on the sphere.

Three resamplers share one neighbor search:

* :func:`geodesic_resample` -- two-stage spherical linear interpolation. The
  two bracketing samples of each row are slerped along longitude, then the
  two row results are slerped along latitude. The slerp angle is the angular
  spacing of the samples, not the angle between feature vectors.
* :func:`bilinear_resample` -- the planar baseline (the small-angle limit of
  the geodesic weights).
* :func:`bicubic_resample` -- separable Catmull-Rom (``a = -0.5``).

Full ERP sources wrap across the longitude seam and clamp at the poles;
:class:`~faor.geometry.PatchGrid` windows clamp on both axes.

Every resampler is linear, so :func:`resampling_operator` can also express it
as a sparse ``(targets, H*W)`` matrix for the training path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import CoordGrid, ErpGrid, PatchGrid, SphericalCoord

__all__ = [
    "DEGENERATE_DELTA",
    "SlerpSegment",
    "NeighborSet",
    "slerp_weights",
    "slerp_pair",
    "find_neighbors",
    "geodesic_resample",
    "bilinear_resample",
    "bicubic_resample",
    "catmull_rom",
    "resample",
    "resample_at_positions",
    "resampling_operator",
    "lattice_positions",
    "RESAMPLERS",
]

#: Below this angular span (radians) the slerp weights switch to their linear limit.
DEGENERATE_DELTA = 1e-6

Source = ErpGrid | PatchGrid


@dataclass(frozen=True)
class SlerpSegment:
    delta: float
    t: float

    def __post_init__(self):
        if not (0.0 <= self.t <= 1.0):
            raise ValueError(f"t={self.t} outside [0, 1]")
        if not (0.0 <= self.delta <= math.pi):
            raise ValueError(f"delta={self.delta} outside [0, pi]")

    @property
    def degenerate(self) -> bool:
        return self.delta < DEGENERATE_DELTA


@dataclass(frozen=True)
class NeighborSet:
    """The four reference samples around one target.

    ``z0 = (row0, col0)``, ``z1 = (row0, col1)``, ``z2 = (row2, col0)``,
    ``z3 = (row2, col1)``.
    """

    row0: int
    row2: int
    col0: int
    col1: int
    lon_segment: SlerpSegment  # z0-z1 and z2-z3 (same span on a regular grid)
    lat_segment: SlerpSegment  # z01-z23

    @property
    def indices(self) -> tuple[tuple[int, int], ...]:
        return (
            (self.row0, self.col0),
            (self.row0, self.col1),
            (self.row2, self.col0),
            (self.row2, self.col1),
        )


def slerp_weights(t, delta):
    """Weights ``sin((1-t)d)/sin d`` and ``sin(t d)/sin d``.

    Spans below :data:`DEGENERATE_DELTA` use the limit ``(1-t, t)``. The
    weights are not renormalized; for finite spans they sum to slightly
    more than one.
    """
    t = np.asarray(t, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    small = delta < DEGENERATE_DELTA
    safe = np.where(small, 1.0, delta)
    s = np.sin(safe)
    wa = np.where(small, 1.0 - t, np.sin((1.0 - t) * safe) / s)
    wb = np.where(small, t, np.sin(t * safe) / s)
    return wa, wb


def slerp_pair(z_a, z_b, seg: SlerpSegment):
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise ValueError("vectors differ in length")
    if not (np.all(np.isfinite(z_a)) and np.all(np.isfinite(z_b))):
        raise ValueError("non-finite input vector")
    wa, wb = slerp_weights(seg.t, seg.delta)
    return float(wa) * z_a + float(wb) * z_b


# -- neighbor search ---------------------------------------------------------

def lattice_positions(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray]:
    """Source position of each target center on a rescaled lattice.

    Target ``i`` of ``n_dst`` lies at source position
    ``((2i + 1) n_src - n_dst) / (2 n_dst)``. Returns ``(floor, fraction)``
    computed in integer arithmetic, so shifting the target by a whole
    number of source samples gives an identical fraction.
    """
    num = (2 * np.arange(n_dst, dtype=np.int64) + 1) * n_src - n_dst
    den = 2 * n_dst
    base, rem = np.divmod(num, den)
    return base, rem / den


def _split(pos) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(pos, dtype=np.float64)
    base = np.floor(pos)
    return base.astype(np.int64), pos - base


def _bracket(base, frac, n: int, wraps: bool):
    """Indices ``(i0, i1)`` and fraction ``t`` of the two bracketing samples."""
    base = np.asarray(base, dtype=np.int64)
    frac = np.asarray(frac, dtype=np.float64)
    if wraps:
        i0 = np.mod(base, n)
        return i0, np.mod(i0 + 1, n), frac
    low = base < 0
    high = base >= n - 1
    i0 = np.where(low, 0, np.where(high, n - 1, base))
    i1 = np.where(low | high, i0, base + 1)
    t = np.where(low | high, 0.0, frac)
    return i0, i1, t


def _axis_positions(src: Source, targets: CoordGrid):
    """Return ``(row_base, row_frac, col_base, col_frac)`` for a target lattice."""
    if isinstance(src, ErpGrid) and targets.src_shape == src.shape:
        rb, rf = lattice_positions(src.height, len(targets.lats))
        cb, cf = lattice_positions(src.width, len(targets.lons))
        return rb, rf, cb, cf
    rb, rf = _split(src.row_position(targets.lats))
    cb, cf = _split(src.col_position(targets.lons))
    return rb, rf, cb, cf


def find_neighbors(grid: np.ndarray, src: Source, target: SphericalCoord) -> NeighborSet:
    """Locate the four samples bracketing a single target coordinate."""
    _check_grid(grid, src)
    rb, rf = _split(src.row_position(target.lat))
    cb, cf = _split(src.col_position(target.lon))
    r0, r2, tr = _bracket(rb, rf, src.height, False)
    c0, c1, tc = _bracket(cb, cf, src.width, src.wraps)
    return NeighborSet(
        int(r0), int(r2), int(c0), int(c1),
        SlerpSegment(src.lon_step if c0 != c1 else 0.0, float(tc)),
        SlerpSegment(src.lat_step if r0 != r2 else 0.0, float(tr)),
    )


def _check_grid(grid, src: Source) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 3 or grid.shape[:2] != src.shape:
        raise ValueError(f"grid of shape {grid.shape} does not match source {src.shape}")
    if grid.shape[2] < 1:
        raise ValueError("grid needs at least one channel")
    return grid


# -- per-axis tap tables -----------------------------------------------------

def catmull_rom(x, a: float = -0.5):
    """Cubic convolution kernel; ``a = -0.5`` gives Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _linear_taps(base, frac, n, wraps, delta, kind):
    i0, i1, t = _bracket(base, frac, n, wraps)
    if kind == "geodesic":
        # clamped pairs collapse onto one sample: zero angular span
        wa, wb = slerp_weights(t, np.where(i0 == i1, 0.0, delta))
    else:
        wa, wb = 1.0 - t, t
    return np.stack([i0, i1], axis=-1), np.stack([wa, wb], axis=-1)


def _cubic_taps(base, frac, n, wraps):
    offsets = np.arange(-1, 3)
    idx = np.asarray(base)[..., None] + offsets
    w = catmull_rom(np.asarray(frac)[..., None] - offsets)
    idx = np.mod(idx, n) if wraps else np.clip(idx, 0, n - 1)
    return idx, w


def _taps(kind, base, frac, n, wraps, delta):
    if kind == "bicubic":
        return _cubic_taps(base, frac, n, wraps)
    return _linear_taps(base, frac, n, wraps, delta, kind)


RESAMPLERS = ("geodesic", "bilinear", "bicubic")


def resample(grid, src: Source, targets: CoordGrid, kind: str = "geodesic") -> np.ndarray:
    """Resample an ``(H, W, D)`` array onto a target lattice.

    Columns are interpolated first (within each source row), then rows, which
    for ``kind="geodesic"`` is the longitude-then-latitude slerp order.
    """
    rb, rf, cb, cf = _axis_positions(src, targets)
    return resample_at_positions(grid, src, (rb, rf), (cb, cf), kind)


def resample_at_positions(grid, src: Source, rows, cols, kind: str = "geodesic") -> np.ndarray:
    """Like :func:`resample` with target positions given as ``(floor, fraction)``
    pairs in source index space, one pair of arrays per axis."""
    if kind not in RESAMPLERS:
        raise ValueError(f"unknown resampler {kind!r}")
    grid = _check_grid(grid, src)
    ci, cw = _taps(kind, cols[0], cols[1], src.width, src.wraps, src.lon_step)
    ri, rw = _taps(kind, rows[0], rows[1], src.height, False, src.lat_step)
    dtype = np.result_type(grid.dtype, np.float32)
    cw = cw.astype(dtype, copy=False)
    rw = rw.astype(dtype, copy=False)
    # stage 1: along each source row
    out_rows = cw[None, :, 0, None] * grid[:, ci[:, 0]]
    for k in range(1, ci.shape[1]):
        out_rows = out_rows + cw[None, :, k, None] * grid[:, ci[:, k]]
    # stage 2: across rows
    out = rw[:, 0, None, None] * out_rows[ri[:, 0]]
    for k in range(1, ri.shape[1]):
        out = out + rw[:, k, None, None] * out_rows[ri[:, k]]
    return out


def geodesic_resample(grid, src: Source, targets: CoordGrid) -> np.ndarray:
    return resample(grid, src, targets, "geodesic")


def bilinear_resample(grid, src: Source, targets: CoordGrid) -> np.ndarray:
    return resample(grid, src, targets, "bilinear")


def bicubic_resample(grid, src: Source, targets: CoordGrid) -> np.ndarray:
    return resample(grid, src, targets, "bicubic")


def resampling_operator(src: Source, rows, cols, kind: str = "geodesic") -> sp.csr_matrix:
    """Sparse matrix mapping a flattened ``(H*W, D)`` grid to scattered targets.

    ``rows`` and ``cols`` are fractional source positions (as returned by
    ``src.row_position`` / ``src.col_position``), one entry per target.
    """
    if kind not in RESAMPLERS:
        raise ValueError(f"unknown resampler {kind!r}")
    rb, rf = _split(np.ravel(rows))
    cb, cf = _split(np.ravel(cols))
    ri, rw = _taps(kind, rb, rf, src.height, False, src.lat_step)
    ci, cw = _taps(kind, cb, cf, src.width, src.wraps, src.lon_step)
    n = rb.shape[0]
    flat = ri[:, :, None] * src.width + ci[:, None, :]
    weights = rw[:, :, None] * cw[:, None, :]
    taps = flat.shape[1] * flat.shape[2]
    indptr = np.arange(0, n * taps + 1, taps)
    mat = sp.csr_matrix(
        (weights.reshape(-1), flat.reshape(-1), indptr),
        shape=(n, src.height * src.width),
    )
    mat.sum_duplicates()
    return mat
