"""Spherical projection of lidar point clouds onto range images.

Conventions used throughout the package:
  * elevation theta = arcsin(z / r), azimuth phi = -atan2(y, x), both in
    radians; phi increases clockwise when viewed from above so that image
    columns run left to right in driving direction.
  * row 0 is the top image row (highest elevation), column 0 corresponds
    to phi = pi, and the azimuth axis wraps around.
  * two row assignment modes: "simple" divides the vertical field of view
    into h equal bins, "adaptive" snaps to the nearest entry of a
    per-row elevation table (required for sensors with non-uniform beam
    spacing).

Design decisions:
  * pixel collisions keep the point with minimum range (closest surface
    wins, everything behind it is shadowed).
  * the pixel of every input point is recorded, shadowed points
    included, so labels can later be transferred back to full clouds.
  * elevations outside the vertical field of view are clamped to the
    edge rows in simple mode; a per-point flag records the clamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError, ShapeError

SIMPLE = "simple"
ADAPTIVE = "adaptive"
PROJECTION_MODES = (SIMPLE, ADAPTIVE)

# Channel layout of RangeImage.channels.
CH_RANGE = 0
CH_X = 1
CH_Y = 2
CH_Z = 3
CH_REMISSION = 4
CH_OCCUPANCY = 5
NUM_CHANNELS = 6


@dataclass(frozen=True)
class PointCloud:
    """Cartesian points in the sensor frame plus per-point remission.

    xyz is (n, 3) float64, remission (n,) float64 in [0, 1]. Zero-range
    points are rejected: they carry no direction and cannot be projected.
    """

    xyz: np.ndarray
    remission: np.ndarray

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64)
        rem = np.asarray(self.remission, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ShapeError(f"xyz must be (n, 3), got {xyz.shape}")
        if rem.shape != (xyz.shape[0],):
            raise ShapeError(
                f"remission must be ({xyz.shape[0]},), got {rem.shape}"
            )
        if not np.isfinite(xyz).all():
            bad = int(np.flatnonzero(~np.isfinite(xyz).all(axis=1))[0])
            raise GeometryError(f"non-finite coordinates at point {bad}")
        if not np.isfinite(rem).all():
            bad = int(np.flatnonzero(~np.isfinite(rem))[0])
            raise GeometryError(f"non-finite remission at point {bad}")
        zero = (xyz == 0.0).all(axis=1)
        if zero.any():
            bad = int(np.flatnonzero(zero)[0])
            raise GeometryError(
                f"zero-range point at index {bad}; filter degenerate points "
                "before constructing a PointCloud"
            )
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "remission", rem)

    def __len__(self) -> int:
        return self.xyz.shape[0]


@dataclass(frozen=True)
class SensorModel:
    """Geometry of a rotating lidar, angles in radians.

    fov_up > fov_down; fov_up - fov_down is the vertical field of view.
    row_elevations, when given, lists the true beam elevation of every
    image row in strictly decreasing order (row 0 = highest beam) and
    enables the adaptive projection mode.
    """

    height: int
    width: int
    fov_up: float
    fov_down: float
    row_elevations: np.ndarray | None = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(
                f"image size must be positive, got {self.height}x{self.width}"
            )
        if not (self.fov_up > self.fov_down):
            raise ConfigError(
                f"fov_up ({self.fov_up}) must exceed fov_down ({self.fov_down})"
            )
        if self.row_elevations is not None:
            table = np.asarray(self.row_elevations, dtype=np.float64)
            if table.shape != (self.height,):
                raise ConfigError(
                    f"row_elevations must have {self.height} entries, "
                    f"got {table.shape}"
                )
            if not (np.diff(table) < 0).all():
                raise ConfigError(
                    "row_elevations must be strictly decreasing "
                    "(row 0 = highest beam)"
                )
            object.__setattr__(self, "row_elevations", table)

    @property
    def fov(self) -> float:
        return self.fov_up - self.fov_down

    def require_mode(self, mode: str) -> None:
        if mode not in PROJECTION_MODES:
            raise ConfigError(
                f"unknown projection mode {mode!r}, expected one of "
                f"{PROJECTION_MODES}"
            )
        if mode == ADAPTIVE and self.row_elevations is None:
            raise ConfigError(
                "adaptive projection requires a row_elevations table"
            )


@dataclass(frozen=True)
class SphericalCoords:
    """Per-point spherical coordinates; arrays share shape (n,)."""

    theta: np.ndarray  # elevation [rad]
    phi: np.ndarray    # azimuth [rad], in (-pi, pi]
    r: np.ndarray      # range [m], > 0


def cartesian_to_spherical(xyz: np.ndarray) -> SphericalCoords:
    """Convert (n, 3) cartesian points to range / elevation / azimuth."""
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.ndim == 1:
        xyz = xyz[None, :]
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ShapeError(f"expected (n, 3) points, got {xyz.shape}")
    r = np.linalg.norm(xyz, axis=1)
    if (r == 0.0).any():
        bad = int(np.flatnonzero(r == 0.0)[0])
        raise GeometryError(f"zero-range point at index {bad}")
    theta = np.arcsin(np.clip(xyz[:, 2] / r, -1.0, 1.0))
    phi = -np.arctan2(xyz[:, 1], xyz[:, 0])
    return SphericalCoords(theta=theta, phi=phi, r=r)


def spherical_to_cartesian(s: SphericalCoords) -> np.ndarray:
    """Inverse of cartesian_to_spherical, returns (n, 3)."""
    cos_t = np.cos(s.theta)
    x = s.r * cos_t * np.cos(-s.phi)
    y = s.r * cos_t * np.sin(-s.phi)
    z = s.r * np.sin(s.theta)
    return np.stack([x, y, z], axis=1)


def azimuth_to_column(phi: np.ndarray, width: int) -> np.ndarray:
    """Column index for azimuth phi; the azimuth axis wraps modulo width."""
    v = np.floor(0.5 * (1.0 - np.asarray(phi) / np.pi) * width).astype(np.int64)
    return np.mod(v, width)


def project_simple(
    s: SphericalCoords, m: SensorModel
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row/column of each point under uniform vertical binning.

    Returns (u, v, clamped). Elevations outside [fov_down, fov_up] are
    clamped to the edge rows; `clamped` flags those points.
    """
    v = azimuth_to_column(s.phi, m.width)
    u_raw = np.floor(
        (1.0 - (s.theta - m.fov_down) / m.fov) * m.height
    ).astype(np.int64)
    u = np.clip(u_raw, 0, m.height - 1)
    clamped = u_raw != u
    return u, v, clamped


def nearest_row(theta: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Row whose table elevation is nearest to theta; ties pick the
    smaller row index (the higher beam)."""
    theta = np.asarray(theta, dtype=np.float64)
    h = table.shape[0]
    asc = table[::-1]  # ascending elevations; asc index j -> row h-1-j
    pos = np.searchsorted(asc, theta)
    lo = np.clip(pos - 1, 0, h - 1)
    hi = np.clip(pos, 0, h - 1)
    d_lo = np.abs(asc[lo] - theta)
    d_hi = np.abs(asc[hi] - theta)
    # On a tie the smaller row index wins, which is the larger ascending
    # index, i.e. `hi`.
    j = np.where(d_hi <= d_lo, hi, lo)
    return h - 1 - j


def project_adaptive(
    s: SphericalCoords, m: SensorModel
) -> tuple[np.ndarray, np.ndarray]:
    """Row/column of each point using the per-row elevation table."""
    m.require_mode(ADAPTIVE)
    v = azimuth_to_column(s.phi, m.width)
    u = nearest_row(s.theta, m.row_elevations)
    return u, v


def resolve_pixel_winners(
    flat_pixel: np.ndarray, r: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the minimum-range point per occupied pixel.

    Returns (winner_indices, flat_pixels_of_winners), one entry per
    occupied pixel, ordered by flat pixel index. Range ties resolve to
    the point that appears first in the input, which makes the result
    deterministic for any input ordering.
    """
    order = np.lexsort((np.arange(len(r)), r, flat_pixel))
    sorted_flat = flat_pixel[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_flat[1:] != sorted_flat[:-1]
    winners = order[first]
    return winners, flat_pixel[winners]


@dataclass
class RangeImage:
    """Dense image form of one scan.

    channels: (6, h, w) float32 in the order
        (range, x, y, z, remission, occupancy);
    unoccupied pixels are all zero.
    pixel_to_point: (h, w) int32, winning point index or -1.
    point_to_pixel: (n, 2) int32 rows (u, v), recorded for every input
        point including shadowed ones.
    clamped: (n,) bool, True where the elevation was clamped to an edge
        row (simple mode only).
    collision_free_count: number of points whose pixel received exactly
        one point.
    """

    channels: np.ndarray
    pixel_to_point: np.ndarray
    point_to_pixel: np.ndarray
    clamped: np.ndarray
    collision_free_count: int
    mode: str
    sensor: SensorModel = field(repr=False)

    @property
    def num_points(self) -> int:
        return self.point_to_pixel.shape[0]

    @property
    def occupancy(self) -> np.ndarray:
        return self.channels[CH_OCCUPANCY] > 0.0

    @property
    def ranges(self) -> np.ndarray:
        return self.channels[CH_RANGE]


def build_range_image(
    pc: PointCloud, m: SensorModel, mode: str = SIMPLE
) -> RangeImage:
    """Project a cloud and rasterize it, nearest point winning each pixel."""
    m.require_mode(mode)
    if len(pc) == 0:
        raise GeometryError("cannot build a range image from an empty cloud")
    s = cartesian_to_spherical(pc.xyz)
    if mode == SIMPLE:
        u, v, clamped = project_simple(s, m)
    else:
        u, v = project_adaptive(s, m)
        clamped = np.zeros(len(pc), dtype=bool)

    h, w = m.height, m.width
    flat = u * w + v
    winners, winner_flat = resolve_pixel_winners(flat, s.r)

    channels = np.zeros((NUM_CHANNELS, h, w), dtype=np.float32)
    pixel_to_point = np.full((h, w), -1, dtype=np.int32)
    wu, wv = winner_flat // w, winner_flat % w
    pixel_to_point[wu, wv] = winners
    channels[CH_RANGE, wu, wv] = s.r[winners]
    channels[CH_X, wu, wv] = pc.xyz[winners, 0]
    channels[CH_Y, wu, wv] = pc.xyz[winners, 1]
    channels[CH_Z, wu, wv] = pc.xyz[winners, 2]
    channels[CH_REMISSION, wu, wv] = pc.remission[winners]
    channels[CH_OCCUPANCY, wu, wv] = 1.0

    _, counts = np.unique(flat, return_counts=True)
    collision_free = int(np.sum(counts == 1))

    return RangeImage(
        channels=channels,
        pixel_to_point=pixel_to_point,
        point_to_pixel=np.stack([u, v], axis=1).astype(np.int32),
        clamped=clamped,
        collision_free_count=collision_free,
        mode=mode,
        sensor=m,
    )


def collision_free_fraction(ri: RangeImage) -> float:
    """Fraction of points that kept a private pixel; 1.0 means the
    projection was injective for this cloud."""
    n = ri.num_points
    if n == 0:
        raise GeometryError("collision-free fraction undefined for 0 points")
    return ri.collision_free_count / n


def label_image_from_points(
    ri: RangeImage, point_labels: np.ndarray, fill: int
) -> np.ndarray:
    """Per-pixel labels taken from each pixel's winning point.

    Unoccupied pixels receive `fill` (normally the ignore id).
    """
    point_labels = np.asarray(point_labels)
    if point_labels.shape != (ri.num_points,):
        raise ShapeError(
            f"expected {ri.num_points} point labels, got {point_labels.shape}"
        )
    out = np.full(ri.pixel_to_point.shape, fill, dtype=np.int32)
    occ = ri.pixel_to_point >= 0
    out[occ] = point_labels[ri.pixel_to_point[occ]]
    return out
