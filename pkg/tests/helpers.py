"""Shared oracles and scene builders for the test suite.

The oracles re-derive expected results with deliberately different
bookkeeping (per-point python loops, dict grouping) than the vectorized
implementations they check.
"""

import numpy as np

from rangeseg.alignment import RigidTransform
from rangeseg.geometry import ADAPTIVE, SIMPLE, PointCloud, SensorModel

DEG = np.pi / 180.0


def ideal_ray_dirs(m: SensorModel) -> np.ndarray:
    """Unit directions of one ray per pixel, (h, w, 3).

    Rows use the elevation table when present, otherwise the centers of
    the uniform elevation bins; columns use azimuth bin centers.
    """
    if m.row_elevations is not None:
        thetas = m.row_elevations
    else:
        l = np.arange(m.height)
        thetas = m.fov_up - (l + 0.5) * m.fov / m.height
    v = np.arange(m.width)
    phis = np.pi * (1.0 - 2.0 * (v + 0.5) / m.width)
    t = thetas[:, None]
    p = phis[None, :]
    return np.stack(
        [
            np.cos(t) * np.cos(-p) * np.ones_like(p),
            np.cos(t) * np.sin(-p),
            np.sin(t) * np.ones_like(p),
        ],
        axis=2,
    )


def ideal_cloud(m: SensorModel, ranges) -> PointCloud:
    """Cloud with one point per pixel at the given ranges ((h, w) or scalar)."""
    dirs = ideal_ray_dirs(m)
    r = np.broadcast_to(np.asarray(ranges, dtype=np.float64), (m.height, m.width))
    xyz = (dirs * r[:, :, None]).reshape(-1, 3)
    return PointCloud(xyz=xyz, remission=np.zeros(len(xyz)))


def in_fov_cloud(
    rng: np.random.Generator, m: SensorModel, n: int = 500, margin: float = 0.02
) -> PointCloud:
    """Random cloud whose elevations stay strictly inside the sensor FOV."""
    theta = rng.uniform(m.fov_down + margin, m.fov_up - margin, size=n)
    phi = rng.uniform(-np.pi + 1e-6, np.pi, size=n)
    r = rng.uniform(2.0, 40.0, size=n)
    xyz = np.stack(
        [
            r * np.cos(theta) * np.cos(-phi),
            r * np.cos(theta) * np.sin(-phi),
            r * np.sin(theta),
        ],
        axis=1,
    )
    return PointCloud(xyz=xyz, remission=rng.uniform(0, 1, size=n))


def brute_force_winners(pixmap: np.ndarray, ranges: np.ndarray) -> dict:
    """pixel (u, v) -> index of its minimum-range point, first on ties."""
    best: dict = {}
    for i in range(len(ranges)):
        key = (int(pixmap[i, 0]), int(pixmap[i, 1]))
        if key not in best or ranges[i] < ranges[best[key]]:
            best[key] = i
    return best


def oracle_warp_entries(
    cloud: PointCloud,
    pixmap: np.ndarray,
    t_rel: RigidTransform,
    m: SensorModel,
    mode: str,
):
    """Expected warp-map entries, re-derived per point.

    Returns a list of (src_u, src_v, dst_u, dst_v, r_new) with dst = None
    for out-of-view entries, ordered by source pixel scan order, plus the
    number of dropped (zero-range after transform) entries.
    """
    ranges = np.asarray([np.linalg.norm(p) for p in cloud.xyz])
    best = brute_force_winners(pixmap, ranges)
    moved_all = t_rel.apply(cloud.xyz)  # same batched call as the pipeline

    if mode == ADAPTIVE:
        table = m.row_elevations
        gaps = np.abs(np.diff(table))

    entries = []
    dropped = 0
    for (u, v) in sorted(best.keys()):
        i = best[(u, v)]
        p = moved_all[i]
        r = np.linalg.norm(p)
        if r == 0.0:
            dropped += 1
            continue
        theta = np.arcsin(np.clip(p[2] / r, -1.0, 1.0))
        phi = -np.arctan2(p[1], p[0])
        col = int(np.floor(0.5 * (1.0 - phi / np.pi) * m.width)) % m.width
        if mode == SIMPLE:
            u_raw = int(np.floor((1.0 - (theta - m.fov_down) / m.fov) * m.height))
            if 0 <= u_raw <= m.height - 1:
                entries.append((u, v, u_raw, col, r))
            else:
                entries.append((u, v, None, None, r))
        else:
            dists = np.abs(table - theta)
            row = int(np.argmin(dists))
            if row == 0:
                local = gaps[0]
            elif row == m.height - 1:
                local = gaps[-1]
            else:
                local = min(gaps[row - 1], gaps[row])
            if dists[row] <= 1.5 * local:
                entries.append((u, v, row, col, r))
            else:
                entries.append((u, v, None, None, r))
    return entries, dropped


def random_rigid(rng: np.random.Generator, max_angle=0.3, max_shift=2.0):
    """Random small rigid transform."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    k = np.array(
        [
            [0, -axis[2], axis[1]],
            [axis[2], 0, -axis[0]],
            [-axis[1], axis[0], 0],
        ]
    )
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    # Re-orthonormalize so the constructor's strict check passes.
    q, _ = np.linalg.qr(rot)
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1
    t = rng.uniform(-max_shift, max_shift, size=3)
    return RigidTransform.from_parts(q, t)


def yaw_transform(angle: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform.from_parts(rot, np.asarray(translation, dtype=float))


def cylinder_room_cloud(m: SensorModel, ego_xy, radius=20.0) -> PointCloud:
    """Scan of a big cylindrical room (axis z) seen from ego_xy.

    Rays that would exit through the open top/bottom at the wall
    distance still hit the wall in xy; z just follows the elevation.
    Returns points in the sensor frame.
    """
    dirs = ideal_ray_dirs(m).reshape(-1, 3)
    o = np.array([ego_xy[0], ego_xy[1]])
    d_xy = dirs[:, :2]
    a = np.sum(d_xy * d_xy, axis=1)
    b = 2.0 * d_xy @ o
    c = o @ o - radius * radius
    disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
    t = (-b + disc) / (2.0 * a)
    xyz = dirs * t[:, None]
    return PointCloud(xyz=xyz, remission=np.zeros(len(xyz)))
