"""Dataset ingestion, binary formats, config files, and the synthetic
ray-cast scene generator."""

from .formats import (
    ClassMapping,
    SequenceData,
    SequenceManifest,
    assemble_frames,
    builtin_config_path,
    load_class_mapping,
    load_manifest,
    load_sensor,
    read_calib,
    read_labels,
    read_poses,
    read_scan,
    save_class_mapping,
    save_manifest,
    save_sensor,
    write_calib,
    write_labels,
    write_poses,
    write_scan,
)
from .synth import (
    Box,
    SyntheticSceneSpec,
    generate_synthetic,
    load_scene_spec,
    save_scene_spec,
    write_scene,
)

__all__ = [
    "Box",
    "ClassMapping",
    "SequenceData",
    "SequenceManifest",
    "SyntheticSceneSpec",
    "assemble_frames",
    "builtin_config_path",
    "generate_synthetic",
    "load_class_mapping",
    "load_manifest",
    "load_scene_spec",
    "load_sensor",
    "read_calib",
    "read_labels",
    "read_poses",
    "read_scan",
    "save_class_mapping",
    "save_manifest",
    "save_scene_spec",
    "save_sensor",
    "write_calib",
    "write_labels",
    "write_poses",
    "write_scan",
]
