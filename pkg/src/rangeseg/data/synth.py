"""Synthetic ray-cast scenes: a ground plane and moving boxes.

One ray is cast per image pixel, along the exact elevation and azimuth
of that pixel's center (or the row's beam elevation when the sensor has
a non-uniform table). The nearest intersection with the ground plane or
any box wins; its object's class and remission label the point. That
construction makes adaptive projection injective by design: each ray can
only land in its own pixel, and range noise moves points along their ray
without changing direction.

Units: box velocities are meters per frame; noise_sigma is the standard
deviation of Gaussian range noise in meters.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import yaml

from ..alignment import RigidTransform
from ..errors import ConfigError, FormatError
from ..geometry import PointCloud, SensorModel, SphericalCoords, spherical_to_cartesian
from .formats import (
    SCHEMA_VERSION,
    ClassMapping,
    SequenceManifest,
    builtin_config_path,
    load_class_mapping,
    save_class_mapping,
    save_manifest,
    save_sensor,
    write_calib,
    write_labels,
    write_poses,
    write_scan,
)

_KIND_SCENE = "scene"
_EPS = 1e-9


@dataclass(frozen=True)
class Box:
    """Axis-aligned box rotated by yaw about z, moving at constant
    velocity (meters per frame)."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    class_id: int
    yaw: float = 0.0
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    remission: float = 0.5

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ConfigError(f"box size must be positive, got {self.size}")
        if not np.isfinite(self.velocity).all():
            raise ConfigError("box velocity must be finite")
        if self.class_id < 0:
            raise ConfigError("box class id must be non-negative")

    def center_at(self, frame: int) -> np.ndarray:
        return np.asarray(self.center) + frame * np.asarray(self.velocity)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Everything needed to generate one sequence deterministically."""

    sensor: SensorModel
    frames: int
    ground_z: float = 0.0
    ground_class: int = 0
    ground_remission: float = 0.4
    ego_start: tuple[float, float, float] = (0.0, 0.0, 1.5)
    ego_yaw_step: float = 0.0
    ego_step: tuple[float, float, float] = (0.0, 0.0, 0.0)
    boxes: tuple[Box, ...] = ()
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError(f"need at least one frame, got {self.frames}")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ConfigError(f"bad noise sigma {self.noise_sigma}")
        if not np.isfinite(self.ego_step).all() or not np.isfinite(
            self.ego_yaw_step
        ):
            raise ConfigError("ego trajectory parameters must be finite")
        if self.ground_class < 0:
            raise ConfigError("ground class id must be non-negative")

    def trajectory(self) -> list[RigidTransform]:
        """Ego pose per frame: accumulating yaw and constant step."""
        out = []
        start = np.asarray(self.ego_start, dtype=np.float64)
        step = np.asarray(self.ego_step, dtype=np.float64)
        for t in range(self.frames):
            a = t * self.ego_yaw_step
            rot = np.array(
                [
                    [np.cos(a), -np.sin(a), 0.0],
                    [np.sin(a), np.cos(a), 0.0],
                    [0.0, 0.0, 1.0],
                ]
            )
            out.append(RigidTransform.from_parts(rot, start + t * step))
        return out

    def class_ids(self) -> set[int]:
        return {self.ground_class} | {b.class_id for b in self.boxes}


def ray_directions(m: SensorModel) -> np.ndarray:
    """Unit direction per pixel, row-major (h*w, 3), aimed at the exact
    angles the projection assigns to that pixel."""
    if m.row_elevations is not None:
        theta_rows = np.asarray(m.row_elevations, dtype=np.float64)
    else:
        frac = 1.0 - (np.arange(m.height) + 0.5) / m.height
        theta_rows = m.fov_down + frac * m.fov
    phi_cols = np.pi * (1.0 - (2.0 * np.arange(m.width) + 1.0) / m.width)
    theta = np.repeat(theta_rows, m.width)
    phi = np.tile(phi_cols, m.height)
    if theta.size == 0:
        raise ConfigError("ray grid is empty")
    return spherical_to_cartesian(
        SphericalCoords(theta=theta, phi=phi, r=np.ones_like(theta))
    )


def _ray_box(
    origin: np.ndarray, dirs: np.ndarray, box: Box, frame: int
) -> np.ndarray:
    """Hit distance per ray, inf where the ray misses the box."""
    a = -box.yaw
    rot = np.array(
        [
            [np.cos(a), -np.sin(a), 0.0],
            [np.sin(a), np.cos(a), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    o = rot @ (origin - box.center_at(frame))
    d = dirs @ rot.T
    half = np.asarray(box.size) / 2.0

    t_near = np.full(len(dirs), -np.inf)
    t_far = np.full(len(dirs), np.inf)
    for axis in range(3):
        da = d[:, axis]
        oa = o[axis]
        parallel = np.abs(da) < _EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[axis] - oa) / da
            t2 = (half[axis] - oa) / da
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        inside = np.abs(oa) <= half[axis]
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)

    hit = (t_near <= t_far) & (t_far > _EPS)
    t = np.where(t_near > _EPS, t_near, t_far)
    return np.where(hit, t, np.inf)


def generate_synthetic(
    spec: SyntheticSceneSpec, seed: int
) -> list[tuple[PointCloud, np.ndarray, RigidTransform]]:
    """Ray-cast every frame; returns (cloud, per-point labels, pose)
    triplets with clouds in the sensor frame. Rays that hit nothing
    produce no point."""
    dirs = ray_directions(spec.sensor)
    rng = np.random.default_rng(seed)
    frames = []
    for t, pose in enumerate(spec.trajectory()):
        origin = pose.translation
        dirs_w = dirs @ pose.rotation.T

        best = np.full(len(dirs), np.inf)
        label = np.full(len(dirs), -1, dtype=np.int64)
        remission = np.zeros(len(dirs))

        dz = dirs_w[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_plane = (spec.ground_z - origin[2]) / dz
        plane_hit = np.isfinite(t_plane) & (t_plane > _EPS)
        best[plane_hit] = t_plane[plane_hit]
        label[plane_hit] = spec.ground_class
        remission[plane_hit] = spec.ground_remission

        for box in spec.boxes:
            t_box = _ray_box(origin, dirs_w, box, t)
            closer = t_box < best
            best[closer] = t_box[closer]
            label[closer] = box.class_id
            remission[closer] = box.remission

        hit = np.isfinite(best)
        r = best[hit]
        if spec.noise_sigma > 0:
            r = r + rng.normal(0.0, spec.noise_sigma, size=r.shape)
            r = np.maximum(r, 1e-3)
        # noise moves the point along its ray, so the sensor-frame
        # position is just the scaled sensor-frame direction
        cloud = PointCloud(
            xyz=dirs[hit] * r[:, None],
            remission=np.clip(remission[hit], 0.0, 1.0),
        )
        frames.append((cloud, label[hit].copy(), pose))
    return frames


# ---------------------------------------------------------------- #
# scene spec YAML
# ---------------------------------------------------------------- #


def load_scene_spec(path) -> SyntheticSceneSpec:
    with open(path) as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise FormatError(f"{path}: {e}") from None
    if not isinstance(doc, dict) or doc.get("kind") != _KIND_SCENE:
        raise FormatError(f"{path}: not a scene document")
    if doc.get("version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')!r}")
    try:
        sensor_doc = doc["sensor"]
        rows = sensor_doc.get("row_elevations_deg")
        sensor = SensorModel(
            height=int(sensor_doc["height"]),
            width=int(sensor_doc["width"]),
            fov_up=float(np.deg2rad(sensor_doc["fov_up_deg"])),
            fov_down=float(np.deg2rad(sensor_doc["fov_down_deg"])),
            row_elevations=None if rows is None else np.deg2rad(rows),
        )
        ground = doc.get("ground", {})
        ego = doc.get("ego", {})
        boxes = tuple(
            Box(
                center=tuple(float(v) for v in b["center"]),
                size=tuple(float(v) for v in b["size"]),
                class_id=int(b["class"]),
                yaw=float(b.get("yaw", 0.0)),
                velocity=tuple(float(v) for v in b.get("velocity", (0, 0, 0))),
                remission=float(b.get("remission", 0.5)),
            )
            for b in doc.get("boxes", ())
        )
        return SyntheticSceneSpec(
            sensor=sensor,
            frames=int(doc["frames"]),
            ground_z=float(ground.get("z", 0.0)),
            ground_class=int(ground.get("class", 0)),
            ground_remission=float(ground.get("remission", 0.4)),
            ego_start=tuple(float(v) for v in ego.get("start", (0, 0, 1.5))),
            ego_yaw_step=float(ego.get("yaw_step", 0.0)),
            ego_step=tuple(float(v) for v in ego.get("step", (0, 0, 0))),
            boxes=boxes,
            noise_sigma=float(doc.get("noise_sigma", 0.0)),
        )
    except KeyError as e:
        raise FormatError(f"{path}: missing required key {e}") from None
    except (TypeError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from None


def save_scene_spec(path, spec: SyntheticSceneSpec) -> None:
    m = spec.sensor
    doc = {
        "version": SCHEMA_VERSION,
        "kind": _KIND_SCENE,
        "frames": spec.frames,
        "noise_sigma": spec.noise_sigma,
        "sensor": {
            "height": int(m.height),
            "width": int(m.width),
            "fov_up_deg": float(np.rad2deg(m.fov_up)),
            "fov_down_deg": float(np.rad2deg(m.fov_down)),
            "row_elevations_deg": (
                None
                if m.row_elevations is None
                else [float(v) for v in np.rad2deg(m.row_elevations)]
            ),
        },
        "ground": {
            "z": spec.ground_z,
            "class": spec.ground_class,
            "remission": spec.ground_remission,
        },
        "ego": {
            "start": list(spec.ego_start),
            "yaw_step": spec.ego_yaw_step,
            "step": list(spec.ego_step),
        },
        "boxes": [
            {
                "center": list(b.center),
                "size": list(b.size),
                "yaw": b.yaw,
                "class": b.class_id,
                "velocity": list(b.velocity),
                "remission": b.remission,
            }
            for b in spec.boxes
        ],
    }
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


# ---------------------------------------------------------------- #
# writing a generated sequence to disk
# ---------------------------------------------------------------- #


def write_scene(
    spec: SyntheticSceneSpec,
    out_dir,
    seed: int,
    mapping: ClassMapping | None = None,
) -> str:
    """Generate and write a manifest-complete sequence; returns the
    manifest path."""
    if mapping is None:
        mapping = load_class_mapping(builtin_config_path("synthetic_classes.yaml"))
    unknown = spec.class_ids() - set(mapping.table.keys())
    if unknown:
        raise ConfigError(
            f"scene uses class ids {sorted(unknown)} absent from the mapping"
        )

    os.makedirs(os.path.join(out_dir, "scans"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    frames = generate_synthetic(spec, seed)

    scans, labels, poses = [], [], []
    for i, (cloud, ids, pose) in enumerate(frames):
        scan_rel = os.path.join("scans", f"{i:06d}.bin")
        label_rel = os.path.join("labels", f"{i:06d}.label")
        write_scan(os.path.join(out_dir, scan_rel), cloud)
        write_labels(os.path.join(out_dir, label_rel), ids)
        scans.append(scan_rel)
        labels.append(label_rel)
        poses.append(pose)

    write_poses(os.path.join(out_dir, "poses.txt"), poses)
    write_calib(os.path.join(out_dir, "calib.txt"), RigidTransform.identity())
    save_sensor(os.path.join(out_dir, "sensor.yaml"), spec.sensor)
    save_class_mapping(os.path.join(out_dir, "classes.yaml"), mapping)
    save_scene_spec(os.path.join(out_dir, "scene.yaml"), spec)

    manifest = SequenceManifest(
        base_dir=os.path.abspath(out_dir),
        sensor_path="sensor.yaml",
        class_map_path="classes.yaml",
        poses_path="poses.txt",
        calib_path="calib.txt",
        scans=tuple(scans),
        labels=tuple(labels),
    )
    manifest_path = os.path.join(out_dir, "manifest.yaml")
    save_manifest(manifest_path, manifest)
    return manifest_path
