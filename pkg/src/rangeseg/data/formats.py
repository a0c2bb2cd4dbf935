"""File formats for scans, labels, poses, and the YAML config family.

Binary layouts:
  * scan: packed little-endian float32 quadruples (x, y, z, remission),
    16 bytes per point, no header.
  * label: one little-endian uint32 per point, low 16 bits semantic id,
    high 16 bits instance id (stripped on read).

Text layouts:
  * poses: one line per frame, 12 reals, the top three rows of a 4x4
    pose matrix in row-major order.
  * calib: lines of "KEY: v0 v1 ... v11"; only the "Tr" line is used,
    the sensor-to-reference extrinsic as a 3x4 matrix.

Poses are recorded in the calibration reference frame; reading converts
them into the sensor frame by conjugation with Tr, so downstream code
only ever sees sensor-frame transforms. An absent calib means Tr is the
identity and poses pass through unchanged.

YAML documents all carry `version` and `kind` keys so a misrouted file
fails loudly instead of half-parsing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from ..alignment import RigidTransform
from ..errors import FormatError
from ..geometry import PointCloud, SensorModel, build_range_image, label_image_from_points

SCHEMA_VERSION = 1

_KIND_SENSOR = "sensor"
_KIND_CLASS_MAP = "class-mapping"
_KIND_MANIFEST = "sequence-manifest"


def builtin_config_path(name: str) -> str:
    """Filesystem path of a config file shipped with the package."""
    path = resources.files("rangeseg") / "configs" / name
    if not path.is_file():
        raise FormatError(f"no built-in config named {name!r}")
    return str(path)


# ---------------------------------------------------------------- #
# point cloud scans
# ---------------------------------------------------------------- #


def read_scan(path) -> PointCloud:
    """Read a packed binary scan.

    All-zero xyz records are sensor blind spots without geometry; they
    are dropped here because no projection can place them. Remission is
    clamped to [0, 1].
    """
    size = os.path.getsize(path)
    if size % 16 != 0:
        raise FormatError(
            f"{path}: truncated scan, {size} bytes is not a multiple of "
            f"16 (partial record starts at byte {size - size % 16})"
        )
    raw = np.fromfile(path, dtype="<f4")
    if not np.isfinite(raw).all():
        raise FormatError(f"{path}: scan contains non-finite values")
    rec = raw.reshape(-1, 4)
    keep = ~(rec[:, :3] == 0.0).all(axis=1)
    rec = rec[keep]
    return PointCloud(
        xyz=rec[:, :3].astype(np.float64),
        remission=np.clip(rec[:, 3].astype(np.float64), 0.0, 1.0),
    )


def write_scan(path, pc: PointCloud) -> None:
    rec = np.empty((len(pc), 4), dtype="<f4")
    rec[:, :3] = pc.xyz
    rec[:, 3] = pc.remission
    rec.tofile(path)


# ---------------------------------------------------------------- #
# labels and class mappings
# ---------------------------------------------------------------- #


@dataclass(frozen=True)
class ClassMapping:
    """Original dataset ids to dense train ids.

    names lists every train id in order; ignored train ids must form
    the tail of that list so the scored classes are exactly
    [0, scored_count). table maps each original semantic id to a train
    id; ids absent from the table are treated as data corruption, not
    silently passed through.
    """

    table: dict[int, int]
    names: tuple[str, ...]
    ignore: frozenset[int]

    def __post_init__(self):
        if not self.names:
            raise FormatError("class mapping needs at least one class name")
        c = len(self.names)
        values = set(self.table.values())
        if not values == set(range(c)):
            missing = sorted(set(range(c)) - values)
            extra = sorted(values - set(range(c)))
            raise FormatError(
                f"train ids must cover 0..{c - 1} exactly; "
                f"missing {missing}, out of range {extra}"
            )
        if any(k < 0 for k in self.table):
            raise FormatError("original ids must be non-negative")
        scored = c - len(self.ignore)
        if self.ignore != frozenset(range(scored, c)):
            raise FormatError(
                "ignored train ids must be the tail of the name list, got "
                f"{sorted(self.ignore)} with {c} classes"
            )

    @property
    def num_train_ids(self) -> int:
        return len(self.names)

    @property
    def scored_count(self) -> int:
        return len(self.names) - len(self.ignore)

    @property
    def scored_names(self) -> tuple[str, ...]:
        return self.names[: self.scored_count]

    def apply(self, semantic_ids: np.ndarray) -> np.ndarray:
        """Map original semantic ids to train ids; unmapped id -> error."""
        ids = np.asarray(semantic_ids, dtype=np.int64)
        if ids.size == 0:
            return ids.copy()
        top = max(self.table) if self.table else -1
        lut = np.full(max(top, int(ids.max())) + 1, -1, dtype=np.int64)
        for k, v in self.table.items():
            lut[k] = v
        if ids.min() < 0:
            raise FormatError(
                f"negative semantic id {int(ids.min())} cannot be mapped"
            )
        out = lut[ids]
        if (out < 0).any():
            bad = int(ids[out < 0][0])
            raise FormatError(
                f"semantic id {bad} has no entry in the class mapping"
            )
        return out

    def to_scored(self, train_ids: np.ndarray, ignore_id: int = -1) -> np.ndarray:
        """Replace ignored train ids by ignore_id for metric accumulation."""
        ids = np.asarray(train_ids)
        return np.where(ids >= self.scored_count, ignore_id, ids)


def read_labels(
    path, mapping: ClassMapping | None = None, expected_count: int | None = None
) -> np.ndarray:
    """Read per-point labels; upper instance bits are stripped before
    the mapping is applied."""
    size = os.path.getsize(path)
    if size % 4 != 0:
        raise FormatError(
            f"{path}: truncated label file, {size} bytes is not a "
            f"multiple of 4 (partial record starts at byte {size - size % 4})"
        )
    raw = np.fromfile(path, dtype="<u4")
    if expected_count is not None and raw.size != expected_count:
        raise FormatError(
            f"{path}: {raw.size} labels for {expected_count} points"
        )
    semantic = (raw & 0xFFFF).astype(np.int64)
    if mapping is None:
        return semantic
    return mapping.apply(semantic)


def write_labels(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.size and (arr.min() < 0 or arr.max() >= 2**32):
        raise FormatError("labels must fit an unsigned 32-bit integer")
    arr.astype("<u4").tofile(path)


# ---------------------------------------------------------------- #
# poses and calibration
# ---------------------------------------------------------------- #


def _parse_matrix_line(line: str, where: str) -> np.ndarray:
    parts = line.split()
    if len(parts) != 12:
        raise FormatError(f"{where}: expected 12 values, got {len(parts)}")
    try:
        vals = np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"{where}: {e}") from None
    mat = np.eye(4)
    mat[:3] = vals.reshape(3, 4)
    return mat


def read_calib(path) -> RigidTransform:
    """Extract the Tr extrinsic from a calibration file."""
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            if key.strip() == "Tr":
                mat = _parse_matrix_line(rest, f"{path}:{i}")
                try:
                    return RigidTransform(mat)
                except Exception as e:
                    raise FormatError(f"{path}:{i}: invalid Tr, {e}") from None
    raise FormatError(f"{path}: no Tr line found")


def write_calib(path, tr: RigidTransform) -> None:
    row = " ".join(f"{v:.17g}" for v in tr.matrix[:3].reshape(-1))
    with open(path, "w") as f:
        f.write(f"Tr: {row}\n")


def read_poses(poses_path, calib_path=None) -> list[RigidTransform]:
    """Read per-frame poses and convert them into the sensor frame."""
    tr = read_calib(calib_path) if calib_path is not None else None
    out = []
    with open(poses_path) as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            mat = _parse_matrix_line(line, f"{poses_path}:{i}")
            try:
                pose = RigidTransform(mat)
            except Exception as e:
                raise FormatError(
                    f"{poses_path}:{i}: invalid pose, {e}"
                ) from None
            if tr is not None:
                pose = tr.inverse() @ pose @ tr
            out.append(pose)
    return out


def write_poses(path, poses: list[RigidTransform]) -> None:
    with open(path, "w") as f:
        for p in poses:
            f.write(
                " ".join(f"{v:.17g}" for v in p.matrix[:3].reshape(-1)) + "\n"
            )


# ---------------------------------------------------------------- #
# YAML documents
# ---------------------------------------------------------------- #


def _load_doc(path, kind: str) -> dict:
    with open(path) as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise FormatError(f"{path}: {e}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a mapping document")
    if doc.get("kind") != kind:
        raise FormatError(
            f"{path}: kind is {doc.get('kind')!r}, expected {kind!r}"
        )
    if doc.get("version") != SCHEMA_VERSION:
        raise FormatError(
            f"{path}: unsupported version {doc.get('version')!r}"
        )
    return doc


def _require(doc: dict, key: str, path) -> object:
    if key not in doc:
        raise FormatError(f"{path}: missing required key {key!r}")
    return doc[key]


def _dump_doc(path, kind: str, body: dict) -> None:
    doc = {"version": SCHEMA_VERSION, "kind": kind}
    doc.update(body)
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def load_sensor(path) -> SensorModel:
    doc = _load_doc(path, _KIND_SENSOR)
    rows = doc.get("row_elevations_deg")
    return SensorModel(
        height=int(_require(doc, "height", path)),
        width=int(_require(doc, "width", path)),
        fov_up=float(np.deg2rad(_require(doc, "fov_up_deg", path))),
        fov_down=float(np.deg2rad(_require(doc, "fov_down_deg", path))),
        row_elevations=None if rows is None else np.deg2rad(rows),
    )


def save_sensor(path, m: SensorModel) -> None:
    body = {
        "height": int(m.height),
        "width": int(m.width),
        "fov_up_deg": float(np.rad2deg(m.fov_up)),
        "fov_down_deg": float(np.rad2deg(m.fov_down)),
        "row_elevations_deg": (
            None
            if m.row_elevations is None
            else [float(v) for v in np.rad2deg(m.row_elevations)]
        ),
    }
    _dump_doc(path, _KIND_SENSOR, body)


def load_class_mapping(path) -> ClassMapping:
    doc = _load_doc(path, _KIND_CLASS_MAP)
    table = _require(doc, "map", path)
    if not isinstance(table, dict):
        raise FormatError(f"{path}: 'map' must be a mapping")
    return ClassMapping(
        table={int(k): int(v) for k, v in table.items()},
        names=tuple(str(n) for n in _require(doc, "names", path)),
        ignore=frozenset(int(i) for i in doc.get("ignore", ())),
    )


def save_class_mapping(path, mapping: ClassMapping) -> None:
    body = {
        "names": list(mapping.names),
        "ignore": sorted(mapping.ignore),
        "map": {int(k): int(v) for k, v in sorted(mapping.table.items())},
    }
    _dump_doc(path, _KIND_CLASS_MAP, body)


# ---------------------------------------------------------------- #
# sequence manifests
# ---------------------------------------------------------------- #


@dataclass(frozen=True)
class SequenceManifest:
    """Paths of one recorded sequence, relative to the manifest file."""

    base_dir: str
    sensor_path: str
    class_map_path: str
    poses_path: str
    calib_path: str | None
    scans: tuple[str, ...]
    labels: tuple[str | None, ...]

    def __post_init__(self):
        if len(self.scans) != len(self.labels):
            raise FormatError(
                f"{len(self.scans)} scans but {len(self.labels)} label slots"
            )
        if not self.scans:
            raise FormatError("manifest lists no frames")

    def resolve(self, rel: str) -> str:
        return os.path.join(self.base_dir, rel)

    def __len__(self) -> int:
        return len(self.scans)


def load_manifest(path) -> SequenceManifest:
    doc = _load_doc(path, _KIND_MANIFEST)
    frames = _require(doc, "frames", path)
    if not isinstance(frames, list) or not frames:
        raise FormatError(f"{path}: 'frames' must be a non-empty list")
    scans, labels = [], []
    for i, fr in enumerate(frames):
        if not isinstance(fr, dict) or "scan" not in fr:
            raise FormatError(f"{path}: frame {i} has no 'scan' entry")
        scans.append(str(fr["scan"]))
        labels.append(None if fr.get("label") is None else str(fr["label"]))
    return SequenceManifest(
        base_dir=os.path.dirname(os.path.abspath(path)),
        sensor_path=str(_require(doc, "sensor", path)),
        class_map_path=str(_require(doc, "class_map", path)),
        poses_path=str(_require(doc, "poses", path)),
        calib_path=None if doc.get("calib") is None else str(doc["calib"]),
        scans=tuple(scans),
        labels=tuple(labels),
    )


def save_manifest(path, manifest: SequenceManifest) -> None:
    frames = [
        {"scan": s} if l is None else {"scan": s, "label": l}
        for s, l in zip(manifest.scans, manifest.labels)
    ]
    body = {
        "sensor": manifest.sensor_path,
        "class_map": manifest.class_map_path,
        "poses": manifest.poses_path,
        "calib": manifest.calib_path,
        "frames": frames,
    }
    _dump_doc(path, _KIND_MANIFEST, body)


@dataclass
class SequenceData:
    """A manifest's content loaded into memory, ready for the trainer
    or the evaluator."""

    frames: list  # of training.FrameSample
    sensor: SensorModel
    mapping: ClassMapping
    has_labels: list[bool] = field(default_factory=list)


def assemble_frames(
    manifest: SequenceManifest, mode: str, ignore_id: int = -1
) -> SequenceData:
    """Materialize a manifest into projected frames.

    Unoccupied pixels and unlabeled frames get ignore_id everywhere, so
    losses and metrics skip them without special cases downstream.
    """
    from ..training import FrameSample

    sensor = load_sensor(manifest.resolve(manifest.sensor_path))
    mapping = load_class_mapping(manifest.resolve(manifest.class_map_path))
    poses = read_poses(
        manifest.resolve(manifest.poses_path),
        None
        if manifest.calib_path is None
        else manifest.resolve(manifest.calib_path),
    )
    if len(poses) != len(manifest):
        raise FormatError(
            f"{len(poses)} poses for {len(manifest)} frames"
        )
    frames, has_labels = [], []
    for i in range(len(manifest)):
        cloud = read_scan(manifest.resolve(manifest.scans[i]))
        ri = build_range_image(cloud, sensor, mode)
        label_rel = manifest.labels[i]
        if label_rel is None:
            img = np.full((sensor.height, sensor.width), ignore_id, np.int64)
            has_labels.append(False)
        else:
            ids = read_labels(
                manifest.resolve(label_rel), mapping, expected_count=len(cloud)
            )
            img = label_image_from_points(ri, ids, fill=ignore_id)
            img = np.where(
                img >= mapping.scored_count, ignore_id, img
            )
            has_labels.append(True)
        frames.append(FrameSample(ri, img, poses[i], cloud))
    return SequenceData(
        frames=frames, sensor=sensor, mapping=mapping, has_labels=has_labels
    )
