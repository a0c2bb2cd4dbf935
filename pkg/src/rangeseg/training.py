"""Sequence training: class-balanced loss, Adam with exponential decay,
per-sub-sequence augmentation, and truncated backpropagation through
time.

Frames within a sub-sequence are numbered from 1. An update schedule is
defined by three knobs: k1 frames between optimizer updates, k2 frames
of gradient history per update, and k3, the frame of the first update
(k3 >= k2, so the first window never reaches before the sequence
start). Loss is evaluated at the scheduled frames only; earlier frames
shape the prediction through the recurrent memory.

Truncation is enforced structurally: once a memory tensor can no longer
fall inside any future update's window, its recorded history is cut in
place, which both stops gradients and lets the old graph be freed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import RigidTransform, compute_warp_map, relative_transform
from .autodiff import (
    Parameter,
    Tensor,
    backward,
    warp_gather_multi,
    weighted_cross_entropy_op,
)
from .errors import ConfigError, NumericAbort, SequenceError
from .geometry import CH_Y, PointCloud, RangeImage
from .network import (
    SINGLE_FRAME,
    TEMPORAL,
    SegmentationModel,
    image_to_input,
)

# ----------------------------------------------------------------- #
# configuration
# ----------------------------------------------------------------- #


@dataclass(frozen=True)
class TbpttConfig:
    """Truncated-backpropagation schedule knobs."""

    k1: int = 5
    k2: int = 5
    k3: int = 10
    length: int = 25

    def __post_init__(self):
        if self.k1 < 1:
            raise ConfigError(f"k1 must be >= 1, got {self.k1}")
        if self.k2 < 1:
            raise ConfigError(f"k2 must be >= 1, got {self.k2}")
        if self.k3 < self.k2:
            raise ConfigError(
                f"first update frame k3={self.k3} must be >= history "
                f"depth k2={self.k2}"
            )
        if self.length < self.k3:
            raise ConfigError(
                f"sub-sequence length {self.length} shorter than first "
                f"update frame k3={self.k3}"
            )


def tbptt_schedule(cfg: TbpttConfig) -> list[tuple[int, tuple[int, int]]]:
    """Scheduled updates as (frame, (window_start, window_end)).

    Frames are numbered from 1; windows are inclusive. Updates sit at
    k3, k3+k1, ... up to the sub-sequence length; the window of the
    update at frame t covers [t-k2+1, t].
    """
    return [
        (t, (t - cfg.k2 + 1, t))
        for t in range(cfg.k3, cfg.length + 1, cfg.k1)
    ]


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 0.001
    decay: float = 5e-5
    weight_decay: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("base learning rate must be positive")
        if self.decay < 0 or self.weight_decay < 0:
            raise ConfigError("decay rates must be non-negative")


def single_frame_profile() -> OptimizerConfig:
    return OptimizerConfig(lr0=0.001, decay=5e-5)


def temporal_profile() -> OptimizerConfig:
    return OptimizerConfig(lr0=0.0001, decay=2.5e-5)


@dataclass(frozen=True)
class TrainingConfig:
    tbptt: TbpttConfig = field(default_factory=TbpttConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch: int = 4
    epochs: int = 1
    seed: int = 0
    flip_prob: float = 0.5
    crop_width: int | None = None
    freeze_backbone: bool = False
    ignore_id: int = -1

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 0:
            raise ConfigError("batch must be >= 1 and epochs >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must be within [0, 1]")

    def to_dict(self) -> dict:
        return {
            "k1": self.tbptt.k1,
            "k2": self.tbptt.k2,
            "k3": self.tbptt.k3,
            "length": self.tbptt.length,
            "lr0": self.optimizer.lr0,
            "decay": self.optimizer.decay,
            "weight_decay": self.optimizer.weight_decay,
            "batch": self.batch,
            "epochs": self.epochs,
            "seed": self.seed,
            "flip_prob": self.flip_prob,
            "crop_width": self.crop_width,
            "freeze_backbone": self.freeze_backbone,
            "ignore_id": self.ignore_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        cw = d.get("crop_width")
        return cls(
            tbptt=TbpttConfig(
                k1=int(d.get("k1", 5)),
                k2=int(d.get("k2", 5)),
                k3=int(d.get("k3", 10)),
                length=int(d.get("length", 25)),
            ),
            optimizer=OptimizerConfig(
                lr0=float(d.get("lr0", 0.001)),
                decay=float(d.get("decay", 5e-5)),
                weight_decay=float(d.get("weight_decay", 0.0005)),
            ),
            batch=int(d.get("batch", 4)),
            epochs=int(d.get("epochs", 1)),
            seed=int(d.get("seed", 0)),
            flip_prob=float(d.get("flip_prob", 0.5)),
            crop_width=None if cw is None else int(cw),
            freeze_backbone=bool(d.get("freeze_backbone", False)),
            ignore_id=int(d.get("ignore_id", -1)),
        )


# ----------------------------------------------------------------- #
# class weights and loss
# ----------------------------------------------------------------- #


def compute_class_weights(
    counts: np.ndarray, ignore_id: int = -1
) -> np.ndarray:
    """Inverse-log-frequency weights, clamped to [0.1, 20].

    w_c = -log(max(n_c, 1) / n) over the full histogram total n; rarer
    classes weigh more, unseen classes saturate at the upper clamp, the
    ignore class gets weight 0.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigError("class histogram must be a non-empty vector")
    if np.any(counts < 0):
        raise ConfigError("class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ConfigError("class histogram is all zero")
    w = -np.log(np.maximum(counts, 1.0) / total)
    w = np.clip(w, 0.1, 20.0)
    if 0 <= ignore_id < len(w):
        w[ignore_id] = 0.0
    return w


def label_histogram(
    sequences: list[list["FrameSample"]], num_classes: int
) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for seq in sequences:
        for fr in seq:
            flat = fr.labels.reshape(-1)
            flat = flat[(flat >= 0) & (flat < num_classes)]
            counts += np.bincount(flat, minlength=num_classes)
    return counts


def weighted_cross_entropy(
    probs: Tensor, labels: np.ndarray, weights: np.ndarray, ignore_id: int = -1
) -> Tensor:
    """Class-weighted mean negative log likelihood over valid pixels."""
    return weighted_cross_entropy_op(probs, labels, weights, ignore_id)


# ----------------------------------------------------------------- #
# augmentation
# ----------------------------------------------------------------- #


@dataclass(frozen=True)
class AugmentPlan:
    """One flip/crop decision, applied to every frame of a sub-sequence.

    The crop keeps full height and takes crop_width contiguous columns
    starting at offset, wrapping around the azimuth seam. The flip
    mirrors columns and negates the y channel (the only azimuth-odd
    input quantity).
    """

    flip: bool
    offset: int
    crop_width: int

    @classmethod
    def draw(
        cls,
        rng: np.random.Generator,
        width: int,
        crop_width: int | None,
        flip_prob: float,
    ) -> "AugmentPlan":
        cw = width if crop_width is None else crop_width
        if cw > width or cw < 1:
            raise ConfigError(
                f"crop width {cw} invalid for image width {width}"
            )
        return cls(
            flip=bool(rng.random() < flip_prob),
            offset=int(rng.integers(width)),
            crop_width=cw,
        )

    @classmethod
    def identity(cls, width: int) -> "AugmentPlan":
        return cls(flip=False, offset=0, crop_width=width)

    def column_map(self, width: int) -> np.ndarray:
        """Original column -> augmented column, -1 where cropped away."""
        if self.crop_width > width:
            raise ConfigError(
                f"crop width {self.crop_width} exceeds image width {width}"
            )
        m = np.full(width, -1, dtype=np.int64)
        src_cols = (np.arange(self.crop_width) + self.offset) % width
        dst_cols = np.arange(self.crop_width)
        if self.flip:
            dst_cols = self.crop_width - 1 - dst_cols
        m[src_cols] = dst_cols
        return m

    def _take(self, arr: np.ndarray) -> np.ndarray:
        w = arr.shape[-1]
        cols = (np.arange(self.crop_width) + self.offset) % w
        out = arr[..., cols]
        if self.flip:
            out = out[..., ::-1]
        return np.ascontiguousarray(out)

    def apply_channels(self, channels: np.ndarray) -> np.ndarray:
        out = self._take(channels)
        if self.flip:
            out[CH_Y] = -out[CH_Y]
        return out

    def apply_map(self, arr: np.ndarray) -> np.ndarray:
        """Column crop/flip of any (..., w) image that carries no
        azimuth-signed values (labels, feature maps, masks)."""
        return self._take(arr)

    apply_labels = apply_map

    def apply_assignment(
        self,
        src_flat: np.ndarray,
        dst_flat: np.ndarray,
        height: int,
        width: int,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Re-index a full-resolution warp assignment into augmented
        coordinates; pairs with either endpoint outside the crop drop."""
        cmap = self.column_map(width)
        su, sv = np.divmod(np.asarray(src_flat, dtype=np.int64), width)
        du, dv = np.divmod(np.asarray(dst_flat, dtype=np.int64), width)
        sv2 = cmap[sv]
        dv2 = cmap[dv]
        keep = (sv2 >= 0) & (dv2 >= 0)
        cw = self.crop_width
        return su[keep] * cw + sv2[keep], du[keep] * cw + dv2[keep]


# ----------------------------------------------------------------- #
# optimizer
# ----------------------------------------------------------------- #


class Adam:
    """Adam with L2 regularization folded into the gradient and an
    exponentially decayed learning rate.

    Parameter updates REBIND p.data to a fresh array instead of writing
    in place: recorded backward closures capture forward-time arrays,
    and those must stay intact when an update lands between a forward
    pass and a later backward through the same graph (overlapping
    truncation windows).
    """

    def __init__(self, params: list[Parameter], cfg: OptimizerConfig):
        self.cfg = cfg
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(names) != len(set(names)):
            raise ConfigError("optimizer needs uniquely named parameters")
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0
        self.iterations = 0

    def current_lr(self) -> float:
        return self.cfg.lr0 * math.exp(-self.cfg.decay * self.iterations)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the learning rate it used."""
        lr = self.current_lr()
        c = self.cfg
        self._t += 1
        bc1 = 1.0 - c.beta1**self._t
        bc2 = 1.0 - c.beta2**self._t
        for p in self.params:
            if not p.trainable or p.grad is None:
                continue
            g = p.grad + c.weight_decay * p.data
            m = self._m.get(p.name)
            v = self._v.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = c.beta1 * m + (1.0 - c.beta1) * g
            v = c.beta2 * v + (1.0 - c.beta2) * (g * g)
            self._m[p.name] = m
            self._v[p.name] = v
            step = lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data = p.data - step  # rebind, never in-place
        self.iterations += 1
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment estimates and step counters, keyed so they can share a
        checkpoint container with model weights without colliding."""
        out = {
            "optimizer/t": np.array([self._t, self.iterations], dtype=np.int64)
        }
        for name, m in self._m.items():
            out[f"optimizer/m/{name}"] = m
        for name, v in self._v.items():
            out[f"optimizer/v/{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Restore counters and any moments matching current parameter
        names; unrelated container keys are ignored."""
        t = arrays.get("optimizer/t")
        if t is None:
            raise ConfigError("container holds no optimizer state")
        self._t = int(t[0])
        self.iterations = int(t[1])
        names = {p.name for p in self.params}
        for name in names:
            m = arrays.get(f"optimizer/m/{name}")
            v = arrays.get(f"optimizer/v/{name}")
            if m is not None:
                self._m[name] = np.array(m, copy=True)
            if v is not None:
                self._v[name] = np.array(v, copy=True)


def set_backbone_frozen(model: SegmentationModel, frozen: bool) -> None:
    for name, p in model.named_parameters():
        if name.startswith("backbone/"):
            p.trainable = not frozen
            p.requires_grad = not frozen


# ----------------------------------------------------------------- #
# dataset shape
# ----------------------------------------------------------------- #


@dataclass
class FrameSample:
    """One frame of a training sequence: projected image, per-pixel
    labels, sensor pose, and the cloud the image came from."""

    image: RangeImage
    labels: np.ndarray
    pose: RigidTransform
    cloud: PointCloud

    def __post_init__(self):
        h, w = self.image.sensor.height, self.image.sensor.width
        if self.labels.shape != (h, w):
            raise ConfigError(
                f"label image {self.labels.shape} does not match sensor "
                f"({h}, {w})"
            )


@dataclass
class MetricsRow:
    iteration: int
    frame: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    iterations: int
    class_weights: np.ndarray


def required_width_divisor(model: SegmentationModel) -> int:
    return 8 if model.config.backbone.downsample_first else 4


# ----------------------------------------------------------------- #
# training loops
# ----------------------------------------------------------------- #


def _chunks(indices, size):
    for i in range(0, len(indices), size):
        yield indices[i : i + size]


def _dump_batch(dump_dir, it, frame, inputs, labels) -> str:
    path = Path(dump_dir or ".") / f"abort-dump-it{it}.npz"
    np.savez(path, inputs=inputs, labels=labels, frame=frame, iteration=it)
    return str(path)


class _SequencePairCache:
    """Full-resolution warp assignments between consecutive frames,
    computed once per frame pair and reused across epochs."""

    def __init__(self, sequences):
        self.sequences = sequences
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def assignment(self, si: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        key = (si, j)
        if key not in self._cache:
            seq = self.sequences[si]
            prev, cur = seq[j - 1], seq[j]
            wm = compute_warp_map(
                prev.cloud,
                prev.image.point_to_pixel,
                relative_transform(prev.pose, cur.pose),
                cur.image.sensor,
                cur.image.mode,
            )
            self._cache[key] = wm.winner_assignment()
        return self._cache[key]


def train(
    model: SegmentationModel,
    sequences: list[list[FrameSample]],
    cfg: TrainingConfig,
    *,
    class_weights: np.ndarray | None = None,
    dump_dir=None,
    progress=None,
    optimizer: Adam | None = None,
) -> TrainResult:
    """Train in place; returns per-update metrics.

    Temporal models train on batches of augmented sub-sequences with
    the truncated-backpropagation schedule; single-frame models train
    on shuffled batches of individual frames. A non-finite loss aborts
    with a diagnostic dump of the offending batch. Passing an optimizer
    whose counters were restored from a checkpoint resumes a run.
    """
    if not sequences or not any(sequences):
        raise SequenceError("training needs at least one non-empty sequence")
    rng = np.random.default_rng(cfg.seed)
    if class_weights is None:
        counts = label_histogram(sequences, model.config.num_classes)
        class_weights = compute_class_weights(counts, cfg.ignore_id)
    if len(class_weights) != model.config.num_classes:
        raise ConfigError(
            f"{len(class_weights)} class weights for "
            f"{model.config.num_classes} classes"
        )
    if cfg.freeze_backbone:
        set_backbone_frozen(model, True)
    opt = optimizer or Adam(model.parameters(), cfg.optimizer)

    width = sequences[0][0].image.sensor.width
    div = required_width_divisor(model)
    eff_width = cfg.crop_width if cfg.crop_width is not None else width
    if eff_width % div != 0:
        raise ConfigError(
            f"training width {eff_width} must be divisible by {div}"
        )
    if eff_width > width:
        raise ConfigError(
            f"crop width {eff_width} exceeds image width {width}"
        )

    rows: list[MetricsRow] = []
    if model.config.kind == SINGLE_FRAME:
        _train_single_frame(
            model, sequences, cfg, rng, opt, class_weights, rows,
            dump_dir, progress,
        )
    else:
        _train_temporal(
            model, sequences, cfg, rng, opt, class_weights, rows,
            dump_dir, progress,
        )
    return TrainResult(
        rows=rows, iterations=opt.iterations, class_weights=class_weights
    )


def _prepared_frame(fr: FrameSample, plan: AugmentPlan, scale: float):
    x = plan.apply_channels(np.array(fr.image.channels))
    return image_to_input(x, scale), plan.apply_labels(fr.labels)


def _train_single_frame(
    model, sequences, cfg, rng, opt, weights, rows, dump_dir, progress
):
    frames = [
        fr for seq in sequences for fr in seq
        if np.any(fr.labels != cfg.ignore_id)
    ]
    if not frames:
        raise SequenceError("every frame is fully unlabeled")
    width = frames[0].image.sensor.width
    for _ in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for chunk in _chunks(order, cfg.batch):
            xs, ls = [], []
            for i in chunk:
                plan = AugmentPlan.draw(rng, width, cfg.crop_width, cfg.flip_prob)
                x, lab = _prepared_frame(
                    frames[i], plan, model.config.input_scale
                )
                xs.append(x)
                ls.append(lab)
            labels = np.stack(ls)
            if not np.any(labels != cfg.ignore_id):
                continue  # crops can land entirely in unlabeled regions
            inputs = np.stack(xs)
            probs, _ = model.forward_frame(Tensor(inputs), None, training=True)
            loss = weighted_cross_entropy_op(
                probs, labels, weights, cfg.ignore_id
            )
            value = float(loss.data)
            if not np.isfinite(value):
                path = _dump_batch(dump_dir, opt.iterations, 1, inputs, labels)
                raise NumericAbort(
                    f"non-finite loss at iteration {opt.iterations}", path
                )
            opt.zero_grad()
            backward(loss)
            row = MetricsRow(opt.iterations, 1, value, opt.step())
            rows.append(row)
            if progress is not None:
                progress(row)


def _train_temporal(
    model, sequences, cfg, rng, opt, weights, rows, dump_dir, progress
):
    length = cfg.tbptt.length
    usable = [i for i, seq in enumerate(sequences) if len(seq) >= length]
    if not usable:
        raise SequenceError(
            f"no sequence is at least {length} frames long"
        )
    cache = _SequencePairCache(sequences)
    schedule = tbptt_schedule(cfg.tbptt)
    update_frames = [t for t, _ in schedule]
    width = sequences[0][0].image.sensor.width
    height = sequences[0][0].image.sensor.height

    for _ in range(cfg.epochs):
        windows = []
        for si in usable:
            n = len(sequences[si])
            shift = int(rng.integers(0, n - length + 1))
            windows.extend(
                (si, start) for start in range(shift, n - length + 1, length)
            )
        rng.shuffle(windows)
        for chunk in _chunks(windows, cfg.batch):
            _tbptt_batch(
                model, sequences, cache, chunk, cfg, rng, opt, weights,
                update_frames, height, width, rows, dump_dir, progress,
            )


def _tbptt_batch(
    model, sequences, cache, chunk, cfg, rng, opt, weights,
    update_frames, height, width, rows, dump_dir, progress,
):
    length = cfg.tbptt.length
    scale = model.config.input_scale
    plans = [
        AugmentPlan.draw(rng, width, cfg.crop_width, cfg.flip_prob)
        for _ in chunk
    ]
    prepared = []  # per sample: (inputs list, labels list, assignment list)
    for (si, start), plan in zip(chunk, plans):
        seq = sequences[si]
        xs, ls, assigns = [], [], [None]
        for s in range(length):
            x, lab = _prepared_frame(seq[start + s], plan, scale)
            xs.append(x)
            ls.append(lab)
            if s > 0:
                src, dst = cache.assignment(si, start + s)
                assigns.append(
                    plan.apply_assignment(src, dst, height, width)
                )
        prepared.append((xs, ls, assigns))

    memory = None
    pending: list[tuple[int, Tensor]] = []  # undetached memories, by frame
    for s in range(1, length + 1):
        inputs = np.stack([p[0][s - 1] for p in prepared])
        if s == 1 or memory is None:
            warped = None
        else:
            warped = warp_gather_multi(
                memory, [p[2][s - 1] for p in prepared], tag="memory"
            )
        memory = model.step_memory(Tensor(inputs), warped, training=True)
        pending.append((s, memory))

        labels = np.stack([p[1][s - 1] for p in prepared])
        if s in update_frames and np.any(labels != cfg.ignore_id):
            probs = model.classify(memory)
            loss = weighted_cross_entropy_op(
                probs, labels, weights, cfg.ignore_id
            )
            value = float(loss.data)
            if not np.isfinite(value):
                path = _dump_batch(dump_dir, opt.iterations, s, inputs, labels)
                raise NumericAbort(
                    f"non-finite loss at iteration {opt.iterations}, "
                    f"frame {s}",
                    path,
                )
            opt.zero_grad()
            backward(loss)
            row = MetricsRow(opt.iterations, s, value, opt.step())
            rows.append(row)
            if progress is not None:
                progress(row)

        # a memory from frame j stops being needed once every future
        # update's window starts after frame j+1: cut its history so
        # gradients truncate there and the old graph can be collected
        nxt = next((t for t in update_frames if t > s), None)
        boundary = length if nxt is None else nxt - cfg.tbptt.k2
        while pending and pending[0][0] <= boundary:
            pending.pop(0)[1].detach_()
