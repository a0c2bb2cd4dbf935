"""Ego-motion alignment of recurrent feature memory between frames.

The memory tensor produced at frame t-1 lives in that frame's image
coordinates. Before it can be fused with features of frame t it is
rearranged: every retained point of frame t-1 is transformed by the
relative ego pose, re-projected with the same projection mode, and the
feature vector at its old pixel is moved to the new pixel.

Two kinds of conflicts arise and are resolved explicitly:
  * several source pixels landing on one target pixel keep the entry
    with minimum transformed range (same closest-surface rule as the
    projection itself);
  * transformed elevations leaving the field of view are discarded
    instead of clamped, since clamping would smear features across the
    image edge. In adaptive mode "outside" means farther than 1.5x the
    local inter-row spacing from every table elevation. One consequence:
    a point whose elevation was clamped INTO the image at projection
    time leaves the image again under the warp, identity ego-motion or
    not, because its true elevation lies outside the modeled view.

Target pixels that receive no source entry keep a zero feature vector
and are flagged invalid so the network can learn to treat them as empty.

Moving objects violate the static-world assumption behind this warp: a
box travelling with its own velocity is misaligned by exactly its own
per-frame displacement. That error is accepted (and covered by a test
documenting it); the recurrent update is expected to cope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidPoseError, ShapeError
from .geometry import (
    ADAPTIVE,
    SIMPLE,
    PointCloud,
    RangeImage,
    SensorModel,
    azimuth_to_column,
    cartesian_to_spherical,
    nearest_row,
    resolve_pixel_winners,
)

_ORTHO_TOL = 1e-9

WARP_MAP_MAGIC = b"RSWM"
WARP_MAP_VERSION = 1
# Little-endian record per retained source pixel: source row, source
# column, target row, target column (-1/-1 when out of the field of
# view), transformed range.
_WARP_RECORD = np.dtype(
    [
        ("u", "<i4"),
        ("v", "<i4"),
        ("nu", "<i4"),
        ("nv", "<i4"),
        ("r", "<f4"),
    ]
)


@dataclass(frozen=True)
class RigidTransform:
    """Homogeneous 4x4 rigid transform (rotation + translation)."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float64)
        if mat.shape != (4, 4):
            raise ShapeError(f"pose must be 4x4, got {mat.shape}")
        if not np.isfinite(mat).all():
            raise InvalidPoseError("pose contains non-finite entries")
        if not np.allclose(mat[3], (0.0, 0.0, 0.0, 1.0), atol=_ORTHO_TOL):
            raise InvalidPoseError(f"bottom row must be [0 0 0 1], got {mat[3]}")
        rot = mat[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=_ORTHO_TOL):
            raise InvalidPoseError("rotation block is not orthonormal")
        if not np.isclose(np.linalg.det(rot), 1.0, atol=_ORTHO_TOL):
            raise InvalidPoseError(
                f"rotation determinant {np.linalg.det(rot)!r}, expected +1"
            )
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_parts(cls, rotation: np.ndarray, translation: np.ndarray) -> "RigidTransform":
        mat = np.eye(4)
        mat[:3, :3] = rotation
        mat[:3, 3] = translation
        return cls(mat)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.matrix @ other.matrix)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rot_t = self.matrix[:3, :3].T
        mat = np.eye(4)
        mat[:3, :3] = rot_t
        mat[:3, 3] = -rot_t @ self.matrix[:3, 3]
        return RigidTransform(mat)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.matrix[:3, :3].T + self.matrix[:3, 3]


def relative_transform(
    t_prev: RigidTransform, t_curr: RigidTransform
) -> RigidTransform:
    """Maps points of the previous sensor frame into the current one."""
    return t_curr.inverse() @ t_prev


def transform_points(pc: PointCloud, t: RigidTransform) -> PointCloud:
    return PointCloud(xyz=t.apply(pc.xyz), remission=pc.remission)


@dataclass
class WarpMap:
    """Pixel correspondence from the previous frame to the current one.

    One entry per retained source pixel, ordered by source pixel scan
    order. target_* are -1 where the transformed point left the field
    of view (valid is False there). dropped counts points that
    transformed onto the sensor origin and had to be discarded.
    """

    source_u: np.ndarray
    source_v: np.ndarray
    target_u: np.ndarray
    target_v: np.ndarray
    new_range: np.ndarray
    valid: np.ndarray
    height: int
    width: int
    dropped: int = 0

    def __len__(self) -> int:
        return self.source_u.shape[0]

    def winner_assignment(self) -> tuple[np.ndarray, np.ndarray]:
        """Resolve target collisions by minimum transformed range.

        Returns (source_flat, target_flat) index arrays, one pair per
        target pixel that receives an entry.
        """
        ok = self.valid
        src_flat = self.source_u[ok] * self.width + self.source_v[ok]
        dst_flat = self.target_u[ok] * self.width + self.target_v[ok]
        winners, dst_of_winner = resolve_pixel_winners(
            dst_flat, self.new_range[ok]
        )
        return src_flat[winners], dst_of_winner


@dataclass
class TemporalMemory:
    """Feature memory in image layout plus its validity mask."""

    features: np.ndarray   # (c, h, w) float32
    valid_mask: np.ndarray  # (h, w) bool

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ShapeError(
                f"memory features must be (c, h, w), got {self.features.shape}"
            )
        if self.valid_mask.shape != self.features.shape[1:]:
            raise ShapeError(
                f"valid_mask {self.valid_mask.shape} does not match "
                f"features {self.features.shape}"
            )

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "TemporalMemory":
        return cls(
            features=np.zeros((channels, height, width), dtype=np.float32),
            valid_mask=np.zeros((height, width), dtype=bool),
        )


def adaptive_fov_mask(theta: np.ndarray, table: np.ndarray) -> np.ndarray:
    """True where theta is close enough to some table elevation.

    "Close enough" is 1.5x the local inter-row gap of the nearest row;
    for edge rows the single adjacent gap counts. Beyond that the beam
    pattern has no corresponding row and snapping would fabricate a
    correspondence.
    """
    rows = nearest_row(theta, table)
    gaps = np.abs(np.diff(table))
    h = table.shape[0]
    local = np.empty(h, dtype=np.float64)
    if h == 1:
        local[:] = np.inf
    else:
        local[0] = gaps[0]
        local[-1] = gaps[-1]
        if h > 2:
            local[1:-1] = np.minimum(gaps[:-1], gaps[1:])
    dist = np.abs(table[rows] - theta)
    return dist <= 1.5 * local[rows]


def compute_warp_map(
    cloud_prev: PointCloud,
    pixmap_prev: np.ndarray,
    t_rel: RigidTransform,
    m: SensorModel,
    mode: str,
) -> WarpMap:
    """Where each retained pixel of the previous frame lands in the
    current frame.

    pixmap_prev is the point_to_pixel array of the previous range image;
    the minimum-range retained point per pixel is re-derived from it with
    the same collision rule the projection used, so the two stay
    consistent by construction.
    """
    m.require_mode(mode)
    pixmap_prev = np.asarray(pixmap_prev)
    if pixmap_prev.shape != (len(cloud_prev), 2):
        raise ShapeError(
            f"pixmap must be ({len(cloud_prev)}, 2), got {pixmap_prev.shape}"
        )
    flat = pixmap_prev[:, 0].astype(np.int64) * m.width + pixmap_prev[:, 1]
    ranges = np.linalg.norm(cloud_prev.xyz, axis=1)
    winners, winner_flat = resolve_pixel_winners(flat, ranges)

    src_u = (winner_flat // m.width).astype(np.int32)
    src_v = (winner_flat % m.width).astype(np.int32)

    moved = t_rel.apply(cloud_prev.xyz[winners])
    r_new = np.linalg.norm(moved, axis=1)
    nonzero = r_new > 0.0
    dropped = int(np.sum(~nonzero))
    if dropped:
        src_u, src_v = src_u[nonzero], src_v[nonzero]
        moved, r_new = moved[nonzero], r_new[nonzero]

    theta = np.arcsin(np.clip(moved[:, 2] / r_new, -1.0, 1.0))
    phi = -np.arctan2(moved[:, 1], moved[:, 0])
    tgt_v = azimuth_to_column(phi, m.width).astype(np.int32)

    if mode == SIMPLE:
        u_raw = np.floor(
            (1.0 - (theta - m.fov_down) / m.fov) * m.height
        ).astype(np.int64)
        in_fov = (u_raw >= 0) & (u_raw <= m.height - 1)
        tgt_u = np.where(in_fov, u_raw, -1).astype(np.int32)
    else:
        in_fov = adaptive_fov_mask(theta, m.row_elevations)
        rows = nearest_row(theta, m.row_elevations)
        tgt_u = np.where(in_fov, rows, -1).astype(np.int32)
    tgt_v = np.where(in_fov, tgt_v, -1).astype(np.int32)

    return WarpMap(
        source_u=src_u,
        source_v=src_v,
        target_u=tgt_u,
        target_v=tgt_v,
        new_range=r_new,
        valid=in_fov,
        height=m.height,
        width=m.width,
        dropped=dropped,
    )


def warp_memory(memory: TemporalMemory, wm: WarpMap) -> TemporalMemory:
    """Rearrange a memory tensor according to a warp map."""
    c, h, w = memory.features.shape
    if (h, w) != (wm.height, wm.width):
        raise ShapeError(
            f"memory is {h}x{w} but warp map was built for "
            f"{wm.height}x{wm.width}"
        )
    src_flat, dst_flat = wm.winner_assignment()
    out = np.zeros_like(memory.features)
    flat_feat = memory.features.reshape(c, h * w)
    out.reshape(c, h * w)[:, dst_flat] = flat_feat[:, src_flat]
    mask = np.zeros(h * w, dtype=bool)
    mask[dst_flat] = True
    return TemporalMemory(features=out, valid_mask=mask.reshape(h, w))


def align(
    memory: TemporalMemory,
    prev: RangeImage,
    cloud_prev: PointCloud,
    t_prev: RigidTransform,
    t_curr: RigidTransform,
) -> TemporalMemory:
    """Full alignment step: relative pose, warp map, memory rearrange."""
    wm = compute_warp_map(
        cloud_prev,
        prev.point_to_pixel,
        relative_transform(t_prev, t_curr),
        prev.sensor,
        prev.mode,
    )
    return warp_memory(memory, wm)


def write_warp_map(wm: WarpMap, path) -> None:
    """Serialize a warp map to the documented binary table."""
    records = np.empty(len(wm), dtype=_WARP_RECORD)
    records["u"] = wm.source_u
    records["v"] = wm.source_v
    records["nu"] = wm.target_u
    records["nv"] = wm.target_v
    records["r"] = wm.new_range
    with open(path, "wb") as fh:
        fh.write(WARP_MAP_MAGIC)
        fh.write(
            np.array(
                [WARP_MAP_VERSION, wm.height, wm.width, len(wm), wm.dropped],
                dtype="<u4",
            ).tobytes()
        )
        fh.write(records.tobytes())


def read_warp_map(path) -> WarpMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WARP_MAP_MAGIC:
            raise FormatError(f"{path}: not a warp map file (magic {magic!r})")
        header = np.frombuffer(fh.read(20), dtype="<u4")
        if header.shape != (5,):
            raise FormatError(f"{path}: truncated warp map header")
        version, height, width, count, dropped = (int(x) for x in header)
        if version != WARP_MAP_VERSION:
            raise FormatError(f"{path}: unsupported warp map version {version}")
        payload = fh.read()
    expected = count * _WARP_RECORD.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{path}: expected {expected} record bytes, found {len(payload)}"
        )
    records = np.frombuffer(payload, dtype=_WARP_RECORD)
    return WarpMap(
        source_u=records["u"].astype(np.int32),
        source_v=records["v"].astype(np.int32),
        target_u=records["nu"].astype(np.int32),
        target_v=records["nv"].astype(np.int32),
        new_range=records["r"].astype(np.float64),
        valid=records["nu"] >= 0,
        height=height,
        width=width,
        dropped=dropped,
    )
