"""Command-line surface.

Four subcommands cover the full workflow:

  project   one scan -> range-image container dump plus collision stats
  synth     scene description -> on-disk sequence with manifest
  train     manifest(s) + run config -> checkpoint, metrics log, figures
  eval      manifest(s) + checkpoint -> IoU report, figures, labels

Every command prints its resolved configuration and seed before touching
data, and every report embeds a fingerprint of that configuration, so a
result file can always be traced to the exact run that wrote it.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric abort
while training, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import read_container, write_container
from .data import (
    assemble_frames,
    load_class_mapping,
    load_manifest,
    load_scene_spec,
    load_sensor,
    read_labels,
    read_scan,
    write_labels,
    write_scene,
)
from .data.formats import _load_doc
from .errors import (
    ConfigError,
    FormatError,
    GeometryError,
    InvalidPoseError,
    MetricError,
    NumericAbort,
    SequenceError,
    ShapeError,
)
from .evaluation import ConfusionMatrix, knn_backproject, majority_vote_baseline, miou
from .geometry import ADAPTIVE, SIMPLE, build_range_image, collision_free_fraction
from .network import (
    ModelConfig,
    SegmentationModel,
    SequenceState,
    load_model,
    recurrent_step,
)
from .report import (
    config_fingerprint,
    plot_confusion,
    plot_iou_bars,
    plot_loss_curve,
    plot_range_panels,
    write_iou_report,
    write_metrics_table,
)
from .training import Adam, TrainingConfig, train

# errors a user can cause with bad inputs or configs; everything else is
# a bug in this package and should surface as a traceback
_VALIDATION = (
    ConfigError,
    FormatError,
    GeometryError,
    InvalidPoseError,
    MetricError,
    SequenceError,
    ShapeError,
)


def _announce(resolved: dict) -> str:
    fp = config_fingerprint(resolved)
    print("resolved configuration:")
    print(json.dumps(resolved, indent=2, sort_keys=True))
    print(f"seed: {resolved.get('seed')}")
    print(f"config fingerprint: {fp}")
    return fp


# ----------------------------------------------------------------- #
# project
# ----------------------------------------------------------------- #


def cmd_project(args) -> int:
    cloud = read_scan(args.scan)
    sensor = load_sensor(args.sensor)
    resolved = {
        "command": "project",
        "scan": str(args.scan),
        "sensor": str(args.sensor),
        "mode": args.mode,
        "out": str(args.out),
        "seed": 0,
    }
    _announce(resolved)

    ri = build_range_image(cloud, sensor, args.mode)
    write_container(
        args.out,
        {
            "channels": np.array(ri.channels),
            "pixel_to_point": ri.pixel_to_point,
            "point_to_pixel": ri.point_to_pixel,
        },
        {"mode": args.mode, "n": len(cloud)},
    )
    print(f"n={len(cloud)} fraction={collision_free_fraction(ri):.4f}")
    print(f"dump: {args.out}")
    return 0


# ----------------------------------------------------------------- #
# synth
# ----------------------------------------------------------------- #


def cmd_synth(args) -> int:
    spec = load_scene_spec(args.scene)
    mapping = None
    if args.classes is not None:
        mapping = load_class_mapping(args.classes)
    resolved = {
        "command": "synth",
        "scene": str(args.scene),
        "classes": None if args.classes is None else str(args.classes),
        "out": str(args.out),
        "seed": args.seed,
        "frames": spec.frames,
    }
    _announce(resolved)
    manifest_path = write_scene(spec, args.out, args.seed, mapping)
    print(f"manifest: {manifest_path}")
    return 0


# ----------------------------------------------------------------- #
# train
# ----------------------------------------------------------------- #


def _load_run_config(path) -> tuple[dict, dict, str]:
    """Split a run-config document into (model section, training
    section, projection mode)."""
    if path is None:
        return {}, {}, ADAPTIVE
    doc = _load_doc(path, "training")
    model = doc.get("model") or {}
    training = doc.get("training") or {}
    if not isinstance(model, dict) or not isinstance(training, dict):
        raise ConfigError(
            f"{path}: 'model' and 'training' must be mappings"
        )
    mode = doc.get("mode", ADAPTIVE)
    if mode not in (SIMPLE, ADAPTIVE):
        raise ConfigError(f"{path}: unknown projection mode {mode!r}")
    return dict(model), dict(training), str(mode)


def _load_sequences(paths, mode: str, ignore_id: int):
    datas = []
    for p in paths:
        datas.append(assemble_frames(load_manifest(p), mode, ignore_id))
    first = datas[0].mapping
    for p, d in zip(paths[1:], datas[1:]):
        if d.mapping.names != first.names:
            raise ConfigError(
                f"{p}: class map {d.mapping.names} does not match the "
                f"first manifest's {first.names}"
            )
    return datas


def cmd_train(args) -> int:
    model_dict, train_dict, mode = _load_run_config(args.config)
    if args.mode is not None:
        mode = args.mode
    if args.update is not None:
        model_dict["update"] = args.update
    if args.seed is not None:
        train_dict["seed"] = args.seed
    cfg = TrainingConfig.from_dict(train_dict)  # schedule checks run here

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datas = _load_sequences(args.manifests, mode, cfg.ignore_id)
    mapping = datas[0].mapping
    model_dict["num_classes"] = mapping.scored_count
    mcfg = ModelConfig.from_dict(model_dict)

    resolved = {
        "command": "train",
        "manifests": [str(p) for p in args.manifests],
        "mode": mode,
        "seed": cfg.seed,
        "resume": None if args.resume is None else str(args.resume),
        "model": mcfg.to_dict(),
        "training": cfg.to_dict(),
    }
    fp = _announce(resolved)

    model = SegmentationModel(mcfg, seed=cfg.seed)
    opt = Adam(model.parameters(), cfg.optimizer)
    if args.resume is not None:
        arrays, _ = read_container(args.resume)
        model.load_state_arrays(arrays)
        opt.load_state_arrays(arrays)
        print(f"resumed at iteration {opt.iterations}")

    def progress(row):
        print(
            f"update {row.iteration} frame {row.frame} "
            f"loss {row.loss:.4f} lr {row.lr:.3g}"
        )

    result = train(
        model,
        [d.frames for d in datas],
        cfg,
        dump_dir=out,
        progress=progress,
        optimizer=opt,
    )

    arrays = model.state_arrays()
    arrays.update(opt.state_arrays())
    ckpt = out / "checkpoint.bin"
    write_container(
        ckpt,
        arrays,
        {
            "model_config": mcfg.to_dict(),
            "training_config": cfg.to_dict(),
            "mode": mode,
            "seed": cfg.seed,
            "config": fp,
            "iterations": opt.iterations,
            "class_names": list(mapping.names),
        },
    )
    write_metrics_table(
        out / "metrics.tsv", result.rows, fingerprint=fp, seed=cfg.seed
    )
    if result.rows:
        plot_loss_curve(result.rows, out / "loss.png")
    print(f"updates: {len(result.rows)} (total {opt.iterations})")
    print(f"checkpoint: {ckpt}")
    return 0


# ----------------------------------------------------------------- #
# eval
# ----------------------------------------------------------------- #


def _predicted_images(model, frames, *, use_alignment, empty_memory):
    state = SequenceState()
    preds = []
    for fr in frames:
        probs, state = recurrent_step(
            model,
            state,
            fr.image,
            fr.pose,
            fr.cloud,
            use_alignment=use_alignment,
            empty_memory=empty_memory,
        )
        preds.append(probs.argmax(axis=0))
    return preds


def _fuse_history(preds, frames, sensor, mode, history):
    fused = []
    for i in range(len(preds)):
        j0 = max(0, i - history)
        window = slice(j0, i + 1)
        fused.append(
            majority_vote_baseline(
                preds[window],
                [f.image for f in frames[window]],
                [f.cloud for f in frames[window]],
                [f.pose for f in frames[window]],
                sensor,
                mode,
                history=history,
            )
        )
    return fused


def cmd_eval(args) -> int:
    model, extra = load_model(args.checkpoint)
    mode = args.mode if args.mode is not None else extra.get("mode", ADAPTIVE)
    seed = args.seed if args.seed is not None else int(extra.get("seed", 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    resolved = {
        "command": "eval",
        "manifests": [str(p) for p in args.manifests],
        "checkpoint": str(args.checkpoint),
        "mode": mode,
        "seed": seed,
        "empty_memory": args.empty_memory,
        "no_tma": args.no_tma,
        "majority_vote": args.majority_vote,
        "knn": args.knn,
        "history": args.history,
        "k": args.k,
        "window": args.window,
        "model": extra.get("model_config"),
    }
    fp = _announce(resolved)

    num_classes = model.config.num_classes
    cm = ConfusionMatrix(num_classes=num_classes, ignore_id=-1)
    class_names = None
    panels_done = False
    want_points = args.knn or args.save_labels

    for mi, man_path in enumerate(args.manifests):
        manifest = load_manifest(man_path)
        data = assemble_frames(manifest, mode, ignore_id=-1)
        if data.mapping.scored_count != num_classes:
            raise ShapeError(
                f"class map scores {data.mapping.scored_count} classes but "
                f"checkpoint layer 'head/conv/weight' outputs {num_classes}"
            )
        if class_names is None:
            class_names = list(data.mapping.scored_names)

        preds = _predicted_images(
            model,
            data.frames,
            use_alignment=not args.no_tma,
            empty_memory=args.empty_memory,
        )
        if args.majority_vote:
            preds = _fuse_history(
                preds, data.frames, data.sensor, mode, args.history
            )

        for i, fr in enumerate(data.frames):
            point_pred = None
            if want_points:
                point_pred = knn_backproject(
                    fr.cloud, fr.image, preds[i], k=args.k, window=args.window
                )
            if args.save_labels:
                label_dir = out / "labels" / f"{mi:02d}"
                label_dir.mkdir(parents=True, exist_ok=True)
                write_labels(label_dir / f"{i:06d}.label", point_pred)
            if not data.has_labels[i]:
                continue
            if args.knn:
                raw = read_labels(
                    manifest.resolve(manifest.labels[i]),
                    data.mapping,
                    expected_count=len(fr.cloud),
                )
                cm.accumulate(data.mapping.to_scored(raw), point_pred)
            else:
                cm.accumulate(fr.labels, preds[i])
            if not panels_done:
                plot_range_panels(fr.image, preds[i], fr.labels, out / "panels.png")
                panels_done = True

    iou, mean = miou(cm)
    write_iou_report(
        out / "report.tsv", iou, mean, class_names, fingerprint=fp, seed=seed
    )
    plot_iou_bars(iou, class_names, mean, out / "iou.png")
    plot_confusion(cm, class_names, out / "confusion.png")
    for name, value in zip(class_names, iou):
        text = "-" if np.isnan(value) else f"{value:.6f}"
        print(f"{name}\t{text}")
    print(f"mIoU\t{mean:.6f}")
    print(f"report: {out / 'report.tsv'}")
    return 0


# ----------------------------------------------------------------- #
# parser and entry point
# ----------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rangeseg",
        description="recurrent range-image segmentation workflows",
    )
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("project", help="project one scan to a range image")
    pr.add_argument("scan", help="packed binary scan")
    pr.add_argument("--sensor", required=True, help="sensor description yaml")
    pr.add_argument("--mode", choices=[SIMPLE, ADAPTIVE], default=ADAPTIVE)
    pr.add_argument("--out", required=True, help="container dump path")
    pr.set_defaults(func=cmd_project)

    sy = sub.add_parser("synth", help="generate a synthetic sequence")
    sy.add_argument("scene", help="scene description yaml")
    sy.add_argument("--out", required=True, help="output directory")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--classes", default=None, help="class mapping yaml")
    sy.set_defaults(func=cmd_synth)

    tr = sub.add_parser("train", help="train a model on manifests")
    tr.add_argument("manifests", nargs="+", help="sequence manifest yaml(s)")
    tr.add_argument("--config", default=None, help="run config yaml")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--mode", choices=[SIMPLE, ADAPTIVE], default=None)
    tr.add_argument("--update", choices=["residual", "gru"], default=None)
    tr.add_argument("--resume", default=None, help="checkpoint to continue")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on manifests")
    ev.add_argument("manifests", nargs="+", help="sequence manifest yaml(s)")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--mode", choices=[SIMPLE, ADAPTIVE], default=None)
    ev.add_argument("--empty-memory", action="store_true")
    ev.add_argument("--no-tma", action="store_true")
    ev.add_argument("--majority-vote", action="store_true")
    ev.add_argument("--knn", action="store_true", help="score per point")
    ev.add_argument("--save-labels", action="store_true")
    ev.add_argument("--history", type=int, default=5)
    ev.add_argument("--k", type=int, default=5)
    ev.add_argument("--window", type=int, default=5)
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericAbort as e:
        print(f"error: {e}", file=sys.stderr)
        if e.dump_path is not None:
            print(f"batch dump: {e.dump_path}", file=sys.stderr)
        return 3
    except _VALIDATION as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
