"""Run reports: delimited metric files plus rendered figures.

Every writer here is deterministic for fixed inputs. Text files carry a
configuration fingerprint and the seed in comment lines instead of
timestamps, and figures are saved with pinned metadata, so repeating a
run reproduces every output byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # file output only, before pyplot import

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import ConfusionMatrix, iou_report_lines

# strips the creation-date PNG chunk matplotlib would otherwise write
_PNG_METADATA = {"Software": "rangeseg"}


def config_fingerprint(config: dict) -> str:
    """Short stable hash of a configuration dictionary.

    Canonical JSON (sorted keys, no float repr ambiguity beyond what
    json itself guarantees) hashed with sha256; 16 hex characters are
    plenty to match a report to the run that produced it.
    """
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _header_lines(fingerprint: str | None, seed: int | None) -> list[str]:
    lines = []
    if fingerprint is not None:
        lines.append(f"# config: {fingerprint}")
    if seed is not None:
        lines.append(f"# seed: {seed}")
    return lines


def write_metrics_table(path, rows, *, fingerprint=None, seed=None) -> None:
    """Tab-separated training log: one line per optimizer update."""
    out = _header_lines(fingerprint, seed)
    out.append("iteration\tframe\tloss\tlr")
    for r in rows:
        out.append(f"{r.iteration}\t{r.frame}\t{r.loss:.9g}\t{r.lr:.9g}")
    Path(path).write_text("\n".join(out) + "\n")


def write_iou_report(
    path, iou, mean, class_names=None, *, fingerprint=None, seed=None
) -> None:
    """Tab-separated per-class IoU plus the mIoU line."""
    out = _header_lines(fingerprint, seed)
    out.extend(iou_report_lines(iou, mean, class_names))
    Path(path).write_text("\n".join(out) + "\n")


def _save(fig, path) -> None:
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def plot_loss_curve(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4), dpi=120)
    its = [r.iteration for r in rows]
    ax.plot(its, [r.loss for r in rows], lw=1.2, color="#20639b")
    ax.set_xlabel("optimizer update")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(its, [r.lr for r in rows], lw=0.8, color="#ed553b", alpha=0.7)
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    _save(fig, path)


def plot_iou_bars(iou, class_names, mean, path) -> None:
    iou = np.asarray(iou, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(iou) + 1.2), dpi=120)
    y = np.arange(len(iou))
    shown = np.nan_to_num(iou)  # absent classes render as zero-length bars
    ax.barh(y, shown, color="#3caea3")
    ax.set_yticks(y)
    ax.set_yticklabels(
        class_names if class_names else [str(c) for c in range(len(iou))]
    )
    ax.invert_yaxis()
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("IoU")
    ax.axvline(mean, color="#ed553b", lw=1.0)
    ax.set_title(f"per-class IoU (mean {mean:.3f})")
    fig.tight_layout()
    _save(fig, path)


def plot_confusion(cm: ConfusionMatrix, class_names, path) -> None:
    """Row-normalized confusion matrix as a heat map."""
    counts = cm.counts.astype(np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    norm = np.divide(
        counts, totals, out=np.zeros_like(counts), where=totals > 0
    )
    n = cm.num_classes
    fig, ax = plt.subplots(
        figsize=(0.6 * n + 2.0, 0.6 * n + 1.6), dpi=120
    )
    im = ax.imshow(norm, cmap="viridis", vmin=0.0, vmax=1.0)
    names = class_names if class_names else [str(c) for c in range(n)]
    ax.set_xticks(range(n))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_yticks(range(n))
    ax.set_yticklabels(names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save(fig, path)


def plot_range_panels(ri, pred, gt, path) -> None:
    """Qualitative strip: range channel, predicted labels, ground truth."""
    from .geometry import CH_RANGE

    fig, axes = plt.subplots(3, 1, figsize=(8, 5), dpi=120)
    rng = np.array(ri.channels[CH_RANGE])
    rng[~ri.occupancy] = np.nan  # empty pixels stay blank
    panels = [
        (rng, "range [m]", "magma"),
        (np.where(np.asarray(pred) < 0, np.nan, pred), "prediction", "tab10"),
        (np.where(np.asarray(gt) < 0, np.nan, gt), "ground truth", "tab10"),
    ]
    for ax, (img, title, cmap) in zip(axes, panels):
        shown = ax.imshow(img, aspect="auto", interpolation="nearest", cmap=cmap)
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(shown, ax=ax, fraction=0.03)
    fig.tight_layout()
    _save(fig, path)
