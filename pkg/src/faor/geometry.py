"""Equirectangular (ERP) coordinate conventions.

Pixel ``(h, w)`` has its center at ``(h + 0.5, w + 0.5)``. Row 0 is the
northernmost row (positive latitude); column 0 starts at longitude -pi and
the last column is adjacent to column 0 across the seam.

All functions accept scalars or numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ErpGrid",
    "PatchGrid",
    "SphericalCoord",
    "CoordGrid",
    "DistortionMap",
    "pixel_to_spherical",
    "spherical_to_pixel",
    "distortion_map",
    "hr_coordinate_grid",
    "cos_latitude_weight",
    "latitude_weights",
    "round_half_away",
    "wrap_longitude",
]

TWO_PI = 2.0 * math.pi


def round_half_away(x: float) -> int:
    """Round to the nearest integer, ties away from zero (``round(2.5) == 3``)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def wrap_longitude(lon):
    """Normalize longitudes into ``[-pi, pi)``."""
    out = np.mod(np.asarray(lon, dtype=np.float64) + math.pi, TWO_PI) - math.pi
    # mod can land exactly on +pi after the subtraction for inputs just below -pi
    out = np.where(out >= math.pi, out - TWO_PI, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ErpGrid:
    """A full-sphere ERP lattice of ``height`` rows and ``width`` columns."""

    height: int
    width: int

    def __post_init__(self):
        if int(self.height) != self.height or int(self.width) != self.width:
            raise ValueError("grid dimensions must be integers")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"invalid grid {self.height}x{self.width}")

    # The resamplers treat ErpGrid and PatchGrid uniformly through these.
    @property
    def wraps(self) -> bool:
        return True

    @property
    def lat_step(self) -> float:
        return math.pi / self.height

    @property
    def lon_step(self) -> float:
        return TWO_PI / self.width

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def row_position(self, lat):
        """Fractional row index of latitude ``lat`` (0 = first row center)."""
        return (0.5 - np.asarray(lat, dtype=np.float64) / math.pi) * self.height - 0.5

    def col_position(self, lon):
        """Fractional column index of ``lon``, wrapped into ``[0, W)``."""
        col = (np.asarray(lon, dtype=np.float64) / TWO_PI + 0.5) * self.width - 0.5
        return np.mod(col, self.width)


@dataclass(frozen=True)
class PatchGrid:
    """A rectangular window of samples cut from an ERP image.

    Sample ``(i, j)`` sits at latitude ``lat0 - i * lat_step`` and longitude
    ``lon0 + j * lon_step``. Windows do not wrap: both axes clamp at the edges.
    Training patches are described this way, since their sample spacing
    depends on the random crop scale.
    """

    height: int
    width: int
    lat0: float
    lon0: float
    lat_step: float
    lon_step: float

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"invalid patch {self.height}x{self.width}")
        if not (self.lat_step > 0 and self.lon_step > 0):
            raise ValueError("sample steps must be positive")

    @property
    def wraps(self) -> bool:
        return False

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def lats(self) -> np.ndarray:
        return self.lat0 - np.arange(self.height) * self.lat_step

    @property
    def lons(self) -> np.ndarray:
        return self.lon0 + np.arange(self.width) * self.lon_step

    def row_position(self, lat):
        return (self.lat0 - np.asarray(lat, dtype=np.float64)) / self.lat_step

    def col_position(self, lon):
        return (np.asarray(lon, dtype=np.float64) - self.lon0) / self.lon_step


@dataclass(frozen=True)
class SphericalCoord:
    """Latitude/longitude pair(s) in radians."""

    lat: float | np.ndarray
    lon: float | np.ndarray

    def __post_init__(self):
        lat = np.asarray(self.lat, dtype=np.float64)
        lon = np.asarray(self.lon, dtype=np.float64)
        if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
            raise ValueError("coordinates must be finite")
        if np.any(np.abs(lat) >= math.pi / 2):
            raise ValueError("latitude must lie strictly inside (-pi/2, pi/2)")
        if np.any(lon < -math.pi) or np.any(lon >= math.pi):
            raise ValueError("longitude must lie in [-pi, pi)")


@dataclass(frozen=True)
class CoordGrid:
    """Pixel-center coordinates of a target lattice.

    ``lats`` index rows (north to south) and ``lons`` index columns. When the
    lattice was derived from a source grid by scaling, ``src_shape`` records
    that grid so resamplers can locate targets with exact integer arithmetic.
    """

    lats: np.ndarray
    lons: np.ndarray
    scale: float
    src_shape: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.lats) < 1 or len(self.lons) < 1:
            raise ValueError("coordinate grid must be non-empty")
        if len(self.lats) > 1 and np.any(np.diff(self.lats) >= 0):
            raise ValueError("lats must be strictly decreasing")
        if len(self.lons) > 1 and np.any(np.diff(self.lons) <= 0):
            raise ValueError("lons must be strictly increasing")

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.lats), len(self.lons))

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel ``(lat, lon)`` arrays of shape ``(rows, cols)``."""
        lat, lon = np.meshgrid(self.lats, self.lons, indexing="ij")
        return lat, lon


@dataclass(frozen=True)
class DistortionMap:
    """Per-pixel stretching ratio map with values in ``[0, 255]``."""

    values: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        return self.values / 255.0


def _check_finite(*xs):
    for x in xs:
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite coordinate")


def pixel_to_spherical(grid: ErpGrid, row, col) -> SphericalCoord:
    """Map (fractional) pixel indices to spherical coordinates.

    Columns wrap modulo ``W``; rows must lie in ``[0, H)``.
    """
    row = np.asarray(row, dtype=np.float64)
    col = np.asarray(col, dtype=np.float64)
    _check_finite(row, col)
    if np.any(row < 0) or np.any(row >= grid.height):
        raise ValueError(f"row outside [0, {grid.height})")
    col = np.mod(col, grid.width)
    lat = (0.5 - (row + 0.5) / grid.height) * math.pi
    lon = wrap_longitude(((col + 0.5) / grid.width - 0.5) * TWO_PI)
    if lat.ndim == 0:
        return SphericalCoord(float(lat), float(lon))
    return SphericalCoord(lat, lon)


def spherical_to_pixel(grid: ErpGrid, coord: SphericalCoord):
    """Inverse of :func:`pixel_to_spherical`; the column is returned in ``[0, W)``."""
    row = grid.row_position(coord.lat)
    col = grid.col_position(coord.lon)
    if np.ndim(row) == 0:
        return float(row), float(col)
    return row, col


def cos_latitude_weight(grid: ErpGrid, row: int) -> float:
    """Cosine-latitude weight of ``row``; shared by the WS metrics."""
    if not 0 <= row < grid.height:
        raise ValueError(f"row {row} outside [0, {grid.height})")
    # indexed from the vector so it matches distortion_map bit for bit
    return float(latitude_weights(grid.height)[row])


def latitude_weights(height: int) -> np.ndarray:
    """Vector of :func:`cos_latitude_weight` for every row of an ``H``-row grid."""
    h = np.arange(height, dtype=np.float64)
    return np.cos((h + 0.5 - height / 2) / height * np.pi)


def distortion_map(grid: ErpGrid) -> DistortionMap:
    """Stretching ratio map ``255 * cos((h + 0.5 - H/2) / H * pi)``, row-constant."""
    rows = 255.0 * latitude_weights(grid.height)
    return DistortionMap(np.repeat(rows[:, None], grid.width, axis=1))


def hr_coordinate_grid(grid: ErpGrid, scale: float) -> CoordGrid:
    """Pixel-center coordinates of the ``round(sH) x round(sW)`` ERP lattice."""
    if not (math.isfinite(scale) and scale > 0):
        raise ValueError("scale must be a positive finite number")
    hh = round_half_away(scale * grid.height)
    ww = round_half_away(scale * grid.width)
    if hh < 1 or ww < 1:
        raise ValueError(f"scale {scale} yields an empty {hh}x{ww} grid")
    hr = ErpGrid(hh, ww)
    lats = pixel_to_spherical(hr, np.arange(hh), np.zeros(hh)).lat
    lons = pixel_to_spherical(hr, np.zeros(ww), np.arange(ww)).lon
    return CoordGrid(np.atleast_1d(lats), np.atleast_1d(lons), float(scale), grid.shape)
