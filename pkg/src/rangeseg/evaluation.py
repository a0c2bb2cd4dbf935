"""Post-processing and evaluation for range-image segmentation.

Three concerns live here because they share the label-image vocabulary:

* back-projecting pixel labels to every 3D point, including points that
  lost their pixel to a nearer one and therefore have no prediction of
  their own (a k-nearest-neighbor vote over the surrounding window),
* a non-learned temporal baseline that fuses the last few predicted
  label images by per-pixel majority vote after ego-motion warping,
* confusion-matrix accumulation and intersection-over-union reduction.

Labels are dense train ids in [0, C). The ignore id never enters the
confusion matrix on either axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignment import RigidTransform, compute_warp_map, relative_transform
from .errors import MetricError, ShapeError
from .geometry import PointCloud, RangeImage, SensorModel


# ---------------------------------------------------------------- #
# confusion matrix and IoU
# ---------------------------------------------------------------- #


@dataclass
class ConfusionMatrix:
    """Pairwise label counts: row = ground truth, col = prediction.

    Pairs whose ground truth equals ignore_id are skipped during
    accumulation; any other label outside [0, num_classes) is an error,
    silence there would corrupt every downstream metric.
    """

    num_classes: int
    ignore_id: int = -1
    counts: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise MetricError("confusion matrix needs at least one class")
        if 0 <= self.ignore_id < self.num_classes:
            raise MetricError(
                "ignore id must lie outside the scored class range"
            )
        self.counts = np.zeros(
            (self.num_classes, self.num_classes), dtype=np.int64
        )

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if gt.shape != pred.shape:
            raise ShapeError(
                f"gt has {gt.shape[0]} labels but pred has {pred.shape[0]}"
            )
        keep = gt != self.ignore_id
        gt, pred = gt[keep], pred[keep]
        c = self.num_classes
        if gt.size:
            if gt.min() < 0 or gt.max() >= c:
                bad = gt[(gt < 0) | (gt >= c)][0]
                raise MetricError(f"ground-truth label {bad} out of range")
            if pred.min() < 0 or pred.max() >= c:
                bad = pred[(pred < 0) | (pred >= c)][0]
                raise MetricError(f"predicted label {bad} out of range")
            np.add.at(self.counts, (gt, pred), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Combine two accumulations; associative, so shards can reduce
        in any grouping."""
        if other.num_classes != self.num_classes:
            raise MetricError(
                f"cannot merge {other.num_classes}-class counts into "
                f"{self.num_classes}-class counts"
            )
        out = ConfusionMatrix(self.num_classes, self.ignore_id)
        out.counts = self.counts + other.counts
        return out


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """Intersection over union per class; NaN where a class never
    appears in ground truth or prediction."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    out = np.full(cm.num_classes, np.nan)
    seen = denom > 0
    out[seen] = tp[seen] / denom[seen]
    return out


def miou(cm: ConfusionMatrix, strict: bool = False) -> tuple[np.ndarray, float]:
    """Per-class IoU and its mean.

    Classes absent from both ground truth and prediction are excluded
    from the mean by default; strict mode scores them 0 instead.
    """
    if cm.total == 0:
        raise MetricError("mIoU is undefined on an empty confusion matrix")
    iou = per_class_iou(cm)
    if strict:
        return np.nan_to_num(iou), float(np.nan_to_num(iou).mean())
    seen = ~np.isnan(iou)
    return iou, float(iou[seen].mean())


def iou_report_lines(
    iou: np.ndarray, mean: float, class_names: list[str] | None = None
) -> list[str]:
    """Tab-separated report rows: one (class, IoU) line per class, NaN
    printed as a dash, then the mean."""
    if class_names is not None and len(class_names) != len(iou):
        raise ShapeError(
            f"{len(class_names)} names for {len(iou)} classes"
        )
    lines = []
    for c, value in enumerate(iou):
        name = class_names[c] if class_names else str(c)
        text = "-" if np.isnan(value) else f"{value:.6f}"
        lines.append(f"{name}\t{text}")
    lines.append(f"mIoU\t{mean:.6f}")
    return lines


# ---------------------------------------------------------------- #
# KNN back-projection of pixel labels to points
# ---------------------------------------------------------------- #


def knn_backproject(
    pc: PointCloud,
    ri: RangeImage,
    pixel_labels: np.ndarray,
    k: int = 5,
    window: int = 5,
    unlabeled: int = 0,
) -> np.ndarray:
    """Label every point of the cloud from the pixel label image.

    Each point looks at the occupied pixels inside the window centered
    on its own pixel (columns wrap around the azimuth seam, rows do
    not), keeps the k whose stored range is closest to the point's own
    range, and takes the majority label; a tied vote falls back to the
    single nearest candidate's label. A point whose whole window is
    unoccupied gets its own pixel's label when that pixel is occupied,
    otherwise `unlabeled`.

    Shadowed points, the reason this exists, sit behind the retained
    surface at their pixel; the range test steers them to candidates on
    their own surface instead of the occluder.
    """
    if k < 1:
        raise MetricError(f"k must be positive, got {k}")
    if window < 1 or window % 2 == 0:
        raise MetricError(f"window must be odd and positive, got {window}")
    h, w = ri.sensor.height, ri.sensor.width
    pixel_labels = np.asarray(pixel_labels)
    if pixel_labels.shape != (h, w):
        raise ShapeError(
            f"label image must be ({h}, {w}), got {pixel_labels.shape}"
        )
    if ri.num_points != len(pc):
        raise ShapeError(
            f"range image indexes {ri.num_points} points, cloud has {len(pc)}"
        )

    n = len(pc)
    half = window // 2
    du, dv = np.meshgrid(
        np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij"
    )
    du, dv = du.reshape(-1), dv.reshape(-1)

    pu = ri.point_to_pixel[:, 0].astype(np.int64)
    pv = ri.point_to_pixel[:, 1].astype(np.int64)
    cu = pu[:, None] + du[None, :]
    cv = (pv[:, None] + dv[None, :]) % w
    in_rows = (cu >= 0) & (cu < h)
    cu_safe = np.clip(cu, 0, h - 1)
    occupied = ri.occupancy[cu_safe, cv] & in_rows

    r_point = np.linalg.norm(pc.xyz, axis=1)
    r_pixel = ri.ranges[cu_safe, cv]
    dist = np.abs(r_pixel - r_point[:, None])
    dist[~occupied] = np.inf

    # stable sort: ties in range distance resolve by window scan order,
    # keeping the result independent of array layout
    order = np.argsort(dist, axis=1, kind="stable")
    labels_sorted = np.take_along_axis(
        pixel_labels[cu_safe, cv], order, axis=1
    )
    n_valid = occupied.sum(axis=1)
    k_eff = np.minimum(k, n_valid)

    num_classes = int(pixel_labels.max()) + 1 if pixel_labels.size else 1
    position = np.arange(du.size)[None, :]
    in_vote = position < k_eff[:, None]
    votes = np.zeros((n, num_classes), dtype=np.int64)
    np.add.at(
        votes,
        (np.nonzero(in_vote)[0], labels_sorted[in_vote]),
        1,
    )

    best = votes.argmax(axis=1)
    top = votes.max(axis=1)
    tied = (votes == top[:, None]).sum(axis=1) > 1
    nearest = labels_sorted[:, 0]
    out = np.where(tied, nearest, best)

    none = n_valid == 0
    if none.any():
        own_occ = ri.occupancy[pu[none], pv[none]]
        own_label = pixel_labels[pu[none], pv[none]]
        out[none] = np.where(own_occ, own_label, unlabeled)
    return out.astype(np.int64)


# ---------------------------------------------------------------- #
# majority-vote temporal baseline
# ---------------------------------------------------------------- #


def majority_vote_baseline(
    label_images: list[np.ndarray],
    range_images: list[RangeImage],
    clouds: list[PointCloud],
    poses: list[RigidTransform],
    m: SensorModel,
    mode: str,
    history: int = 5,
) -> np.ndarray:
    """Fuse the current predicted label image with up to `history` past
    ones, each warped into the current frame by ego motion.

    The last list element is the current frame. Warped pixels vote where
    they land (collisions resolved by nearest transformed range, the
    same rule memory alignment uses); the current frame votes at every
    pixel; a tied vote keeps the current frame's label. No learning, so
    this is the floor any temporal model has to beat.
    """
    n = len(label_images)
    if not (n == len(range_images) == len(clouds) == len(poses)):
        raise ShapeError(
            "label_images, range_images, clouds and poses must align, got "
            f"{n}/{len(range_images)}/{len(clouds)}/{len(poses)} entries"
        )
    if n == 0:
        raise MetricError("majority vote needs at least the current frame")
    h, w = m.height, m.width
    current = np.asarray(label_images[-1])
    if current.shape != (h, w):
        raise ShapeError(
            f"label images must be ({h}, {w}), got {current.shape}"
        )

    first = max(0, n - 1 - history)
    warped_stack = []
    for j in range(first, n - 1):
        t_rel = relative_transform(poses[j], poses[-1])
        wm = compute_warp_map(
            clouds[j], range_images[j].point_to_pixel, t_rel, m, mode
        )
        src, dst = wm.winner_assignment()
        warped = np.full(h * w, -1, dtype=np.int64)
        warped[dst] = np.asarray(label_images[j]).reshape(-1)[src]
        warped_stack.append(warped.reshape(h, w))

    num_classes = int(max(int(np.asarray(li).max()) for li in label_images)) + 1
    votes = np.zeros((num_classes, h, w), dtype=np.int64)
    grid_u, grid_v = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for img in warped_stack + [current]:
        present = img >= 0
        np.add.at(
            votes, (img[present], grid_u[present], grid_v[present]), 1
        )

    best = votes.argmax(axis=0)
    top = votes.max(axis=0)
    tied = (votes == top[None]).sum(axis=0) > 1
    return np.where(tied, current, best)
