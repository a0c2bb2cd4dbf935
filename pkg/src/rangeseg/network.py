"""Recurrent segmentation network over range images.

The backbone is a three-stream aggregation design: feature extractors
at full, half, and quarter horizontal resolution (the vertical
resolution never changes, lidar images are short and wide), and
aggregators that repeatedly upsample the coarse stream, concatenate it
with the finer one, fuse with a 1x1 convolution and refine with
residual units. The final aggregate F_t has `c_mem` channels at full
resolution.

Temporal models carry a memory tensor H of the same shape. Each frame,
the warped previous memory and F_t are fused by one of two update
modules:

  * residual update: concat -> 1x1 conv halving channels -> batch norm
    -> four residual units;
  * convolutional GRU: update/reset gates with separate input and
    state kernels (3x3, state kernels without bias), candidate state
    through tanh, convex blend between warped memory and candidate.

The classifier head is a 1x1 convolution plus per-pixel softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignment import (
    RigidTransform,
    compute_warp_map,
    relative_transform,
)
from .autodiff import (
    BatchNormState,
    Parameter,
    Tensor,
    batch_norm,
    concat_channels,
    conv2d,
    relu,
    sigmoid,
    softmax_channels,
    tanh,
    upsample_width2,
    warp_gather,
)
from .errors import ConfigError, SequenceError, ShapeError
from .geometry import CH_REMISSION, NUM_CHANNELS, PointCloud, RangeImage

RESIDUAL = "residual"
GRU = "gru"
UPDATE_KINDS = (RESIDUAL, GRU)

TEMPORAL = "temporal"
SINGLE_FRAME = "single_frame"
MODEL_KINDS = (TEMPORAL, SINGLE_FRAME)


@dataclass(frozen=True)
class BackboneConfig:
    """Widths and depths of the aggregation backbone.

    widths are the channel counts of the three extractor streams; the
    last one doubles as the memory width c_mem. units are the
    residual-unit counts per extractor; every aggregator uses
    aggregator_units. downsample_first restores horizontal striding in
    the first extractor (off by default: it trades too much azimuth
    resolution for speed at these image sizes, and the memory then no
    longer matches the input grid).
    """

    widths: tuple[int, int, int] = (16, 16, 32)
    units: tuple[int, int, int] = (4, 5, 6)
    aggregator_units: int = 2
    downsample_first: bool = False

    def __post_init__(self):
        if len(self.widths) != 3 or len(self.units) != 3:
            raise ConfigError("backbone needs exactly three streams")
        if any(w < 1 for w in self.widths) or any(u < 1 for u in self.units):
            raise ConfigError("backbone widths and unit counts must be >= 1")

    @property
    def c_mem(self) -> int:
        return self.widths[2]


PAPER_BACKBONE = BackboneConfig(widths=(64, 64, 128))


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    kind: str = TEMPORAL
    update: str = RESIDUAL
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    in_channels: int = NUM_CHANNELS
    # Geometry channels (range, x, y, z) are divided by this before
    # entering the first convolution; remission and occupancy are
    # already O(1).
    input_scale: float = 25.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.update not in UPDATE_KINDS:
            raise ConfigError(f"unknown update kind {self.update!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.input_scale <= 0:
            raise ConfigError("input_scale must be positive")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "kind": self.kind,
            "update": self.update,
            "in_channels": self.in_channels,
            "input_scale": self.input_scale,
            "backbone": {
                "widths": list(self.backbone.widths),
                "units": list(self.backbone.units),
                "aggregator_units": self.backbone.aggregator_units,
                "downsample_first": self.backbone.downsample_first,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = d.get("backbone", {})
        return cls(
            num_classes=int(d["num_classes"]),
            kind=d.get("kind", TEMPORAL),
            update=d.get("update", RESIDUAL),
            in_channels=int(d.get("in_channels", NUM_CHANNELS)),
            input_scale=float(d.get("input_scale", 25.0)),
            backbone=BackboneConfig(
                widths=tuple(bb.get("widths", (16, 16, 32))),
                units=tuple(bb.get("units", (4, 5, 6))),
                aggregator_units=int(bb.get("aggregator_units", 2)),
                downsample_first=bool(bb.get("downsample_first", False)),
            ),
        )


# ----------------------------------------------------------------- #
# module tree
# ----------------------------------------------------------------- #


class Module:
    """Parameter container; submodules and parameters keep insertion
    order so initialization and naming are reproducible."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._modules: dict[str, Module] = {}

    def add_param(self, name: str, data: np.ndarray) -> Parameter:
        p = Parameter(np.asarray(data, dtype=np.float32), name=name)
        self._params[name] = p
        return p

    def add_module(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield f"{prefix}{name}", p
        for mod_name, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}{mod_name}/")

    def named_bn_states(self, prefix: str = ""):
        if isinstance(self, BatchNorm):
            yield prefix.rstrip("/"), self.state
        for mod_name, mod in self._modules.items():
            yield from mod.named_bn_states(f"{prefix}{mod_name}/")

    def finalize_names(self) -> None:
        """Stamp full path names onto parameters and check uniqueness."""
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ConfigError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name


def _he_conv(rng: np.random.Generator, c_out, c_in, kh, kw) -> np.ndarray:
    fan_in = c_in * kh * kw
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kh, kw))


class Conv(Module):
    def __init__(self, rng, c_in, c_out, kernel=3, stride_w=1, bias=False):
        super().__init__()
        self.stride_w = stride_w
        self.weight = self.add_param(
            "weight", _he_conv(rng, c_out, c_in, kernel, kernel)
        )
        self.bias = self.add_param("bias", np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride_w=self.stride_w)


class BatchNorm(Module):
    def __init__(self, channels):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.state = BatchNormState(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, training)


class UpsampleConv(Module):
    """Width-doubling transposed convolution."""

    def __init__(self, rng, c_in, c_out):
        super().__init__()
        fan_in = c_in * 2
        self.weight = self.add_param(
            "weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_in, c_out, 2))
        )

    def __call__(self, x: Tensor) -> Tensor:
        return upsample_width2(x, self.weight)


class ResidualUnit(Module):
    """conv-bn-relu, conv-bn, add skip, relu. The skip is a strided 1x1
    projection when shape changes, identity otherwise."""

    def __init__(self, rng, c_in, c_out, stride_w=1):
        super().__init__()
        self.conv1 = self.add_module("conv1", Conv(rng, c_in, c_out, 3, stride_w))
        self.bn1 = self.add_module("bn1", BatchNorm(c_out))
        self.conv2 = self.add_module("conv2", Conv(rng, c_out, c_out, 3, 1))
        self.bn2 = self.add_module("bn2", BatchNorm(c_out))
        self.project = None
        if c_in != c_out or stride_w != 1:
            self.project = self.add_module(
                "project", Conv(rng, c_in, c_out, 1, stride_w)
            )
            self.bn_project = self.add_module("bn_project", BatchNorm(c_out))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = relu(self.bn1(self.conv1(x), training))
        y = self.bn2(self.conv2(y), training)
        if self.project is not None:
            skip = self.bn_project(self.project(x), training)
        else:
            skip = x
        return relu(y + skip)


class UnitStack(Module):
    def __init__(self, rng, c_in, c_out, count, first_stride_w=1):
        super().__init__()
        self.units = []
        for i in range(count):
            unit = ResidualUnit(
                rng,
                c_in if i == 0 else c_out,
                c_out,
                first_stride_w if i == 0 else 1,
            )
            self.add_module(f"unit{i}", unit)
            self.units.append(unit)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for unit in self.units:
            x = unit(x, training)
        return x


class Aggregator(Module):
    """Fuse a fine stream with an upsampled coarser stream."""

    def __init__(self, rng, c_fine, c_coarse, c_out, units):
        super().__init__()
        self.upsample = self.add_module(
            "upsample", UpsampleConv(rng, c_coarse, c_coarse)
        )
        self.fuse = self.add_module(
            "fuse", Conv(rng, c_fine + c_coarse, c_out, 1)
        )
        self.bn = self.add_module("bn", BatchNorm(c_out))
        self.units = self.add_module(
            "units", UnitStack(rng, c_out, c_out, units)
        )

    def __call__(self, fine: Tensor, coarse: Tensor, training: bool) -> Tensor:
        up = self.upsample(coarse)
        if up.shape[3] != fine.shape[3]:
            raise ShapeError(
                f"aggregator streams disagree: fine width {fine.shape[3]}, "
                f"upsampled coarse width {up.shape[3]}"
            )
        x = relu(self.bn(self.fuse(concat_channels([fine, up])), training))
        return self.units(x, training)


class Backbone(Module):
    def __init__(self, rng, cfg: BackboneConfig, in_channels: int):
        super().__init__()
        w1, w2, w3 = cfg.widths
        u1, u2, u3 = cfg.units
        au = cfg.aggregator_units
        s1 = 2 if cfg.downsample_first else 1
        self.extract1 = self.add_module(
            "extract1", UnitStack(rng, in_channels, w1, u1, first_stride_w=s1)
        )
        self.extract2 = self.add_module(
            "extract2", UnitStack(rng, w1, w2, u2, first_stride_w=2)
        )
        self.extract3 = self.add_module(
            "extract3", UnitStack(rng, w2, w3, u3, first_stride_w=2)
        )
        self.agg_top = self.add_module("agg_top", Aggregator(rng, w1, w2, w1, au))
        self.agg_mid = self.add_module("agg_mid", Aggregator(rng, w2, w3, w3, au))
        self.agg_final = self.add_module(
            "agg_final", Aggregator(rng, w1, w3, w3, au)
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        f1 = self.extract1(x, training)
        f2 = self.extract2(f1, training)
        f3 = self.extract3(f2, training)
        top = self.agg_top(f1, f2, training)
        mid = self.agg_mid(f2, f3, training)
        return self.agg_final(top, mid, training)


class ResidualMemoryUpdate(Module):
    """concat(warped memory, features) -> 1x1 conv -> BN -> residual units."""

    def __init__(self, rng, c_mem, units=4):
        super().__init__()
        self.fuse = self.add_module("fuse", Conv(rng, 2 * c_mem, c_mem, 1))
        self.bn = self.add_module("bn", BatchNorm(c_mem))
        self.units = self.add_module(
            "units", UnitStack(rng, c_mem, c_mem, units)
        )

    def __call__(self, memory: Tensor, features: Tensor, training: bool) -> Tensor:
        x = self.bn(self.fuse(concat_channels([memory, features])), training)
        return self.units(x, training)


class ConvGRUUpdate(Module):
    """Convolutional GRU cell over image features.

    Input kernels carry a bias, state kernels do not; gate biases start
    at zero so the initial gates are balanced.
    """

    def __init__(self, rng, c_mem):
        super().__init__()
        self.w_update = self.add_module("w_update", Conv(rng, c_mem, c_mem, 3, bias=True))
        self.u_update = self.add_module("u_update", Conv(rng, c_mem, c_mem, 3))
        self.w_reset = self.add_module("w_reset", Conv(rng, c_mem, c_mem, 3, bias=True))
        self.u_reset = self.add_module("u_reset", Conv(rng, c_mem, c_mem, 3))
        self.w_cand = self.add_module("w_cand", Conv(rng, c_mem, c_mem, 3, bias=True))
        self.u_cand = self.add_module("u_cand", Conv(rng, c_mem, c_mem, 3))

    def gates(self, memory: Tensor, features: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        z = sigmoid(self.w_update(features) + self.u_update(memory))
        r = sigmoid(self.w_reset(features) + self.u_reset(memory))
        cand = tanh(self.w_cand(features) + self.u_cand(r * memory))
        return z, r, cand

    def __call__(self, memory: Tensor, features: Tensor, training: bool) -> Tensor:
        z, _, cand = self.gates(memory, features)
        return (1.0 - z) * memory + z * cand


class Head(Module):
    def __init__(self, rng, c_mem, num_classes):
        super().__init__()
        self.conv = self.add_module(
            "conv", Conv(rng, c_mem, num_classes, 1, bias=True)
        )

    def __call__(self, x: Tensor) -> Tensor:
        return softmax_channels(self.conv(x))


class SegmentationModel(Module):
    """Backbone + optional temporal memory update + classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        self.backbone = self.add_module(
            "backbone", Backbone(rng, config.backbone, config.in_channels)
        )
        self.update = None
        if config.kind == TEMPORAL:
            if config.update == RESIDUAL:
                self.update = self.add_module(
                    "update", ResidualMemoryUpdate(rng, config.backbone.c_mem)
                )
            else:
                self.update = self.add_module(
                    "update", ConvGRUUpdate(rng, config.backbone.c_mem)
                )
        self.head = self.add_module(
            "head", Head(rng, config.backbone.c_mem, config.num_classes)
        )
        self.finalize_names()

    # -- forward ----------------------------------------------------

    def features(self, x: Tensor, training: bool) -> Tensor:
        return self.backbone(x, training)

    def classify(self, feat: Tensor) -> Tensor:
        return self.head(feat)

    def step_memory(
        self, x: Tensor, memory: Tensor | None, training: bool
    ) -> Tensor:
        """Advance the memory one frame without running the head.

        memory is the already-aligned previous state, or None for a
        zero start.
        """
        if self.config.kind != TEMPORAL:
            raise ConfigError("step_memory only applies to temporal models")
        feat = self.features(x, training)
        if memory is None:
            memory = Tensor(np.zeros_like(feat.data))
        if memory.shape != feat.shape:
            raise ShapeError(
                f"memory shape {memory.shape} does not match features "
                f"{feat.shape}"
            )
        return self.update(memory, feat, training)

    def forward_frame(
        self, x: Tensor, memory: Tensor | None, training: bool
    ) -> tuple[Tensor, Tensor | None]:
        """One frame: features, memory fusion, per-pixel distributions.

        memory is the already-aligned previous state (or None at the
        start of a sequence / for single-frame models). Returns
        (probs, new_memory).
        """
        if self.config.kind == SINGLE_FRAME:
            return self.classify(self.features(x, training)), None
        new_memory = self.step_memory(x, memory, training)
        return self.classify(new_memory), new_memory

    # -- bookkeeping -------------------------------------------------

    def count_parameters(self, trainable_only: bool = True) -> int:
        return sum(
            p.data.size
            for p in self.parameters()
            if p.trainable or not trainable_only
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        for name, st in self.named_bn_states():
            out[f"{name}/running_mean"] = st.running_mean
            out[f"{name}/running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in arrays:
                raise ShapeError(f"checkpoint is missing parameter {name!r}")
            val = arrays[name]
            if tuple(val.shape) != tuple(p.data.shape):
                raise ShapeError(
                    f"parameter {name!r}: checkpoint shape {tuple(val.shape)} "
                    f"does not match model shape {tuple(p.data.shape)}"
                )
            p.data = val.astype(p.data.dtype, copy=True)
        for name, st in self.named_bn_states():
            for part, target in (
                ("running_mean", st.running_mean),
                ("running_var", st.running_var),
            ):
                key = f"{name}/{part}"
                if key not in arrays:
                    raise ShapeError(f"checkpoint is missing {key!r}")
                if arrays[key].shape != target.shape:
                    raise ShapeError(
                        f"{key!r}: checkpoint shape {arrays[key].shape} does "
                        f"not match {target.shape}"
                    )
            st.running_mean = arrays[f"{name}/running_mean"].astype(np.float64, copy=True)
            st.running_var = arrays[f"{name}/running_var"].astype(np.float64, copy=True)

    def load_backbone_from(self, other: "SegmentationModel") -> None:
        """Copy backbone and head weights from a compatible model
        (e.g. warm-starting the temporal model from a single-frame
        checkpoint)."""
        theirs = dict(other.named_parameters())
        their_bn = dict(other.named_bn_states())
        for name, p in self.named_parameters():
            if name in theirs and theirs[name].data.shape == p.data.shape:
                p.data = theirs[name].data.copy()
        for name, st in self.named_bn_states():
            if name in their_bn:
                st.running_mean = their_bn[name].running_mean.copy()
                st.running_var = their_bn[name].running_var.copy()


# ----------------------------------------------------------------- #
# checkpoints
# ----------------------------------------------------------------- #


def save_model(path, model: SegmentationModel, extra: dict | None = None) -> None:
    """Write weights, batch-norm statistics, and the model config."""
    from .autodiff import write_container

    payload = dict(extra or {})
    payload["model_config"] = model.config.to_dict()
    write_container(path, model.state_arrays(), payload)


def load_model(path) -> tuple[SegmentationModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, extra)."""
    from .autodiff import read_container

    arrays, extra = read_container(path)
    if "model_config" not in extra:
        raise ShapeError(f"{path}: checkpoint carries no model config")
    model = SegmentationModel(ModelConfig.from_dict(extra["model_config"]), seed=0)
    model.load_state_arrays(arrays)
    return model, extra


# ----------------------------------------------------------------- #
# sequence state and the per-frame step
# ----------------------------------------------------------------- #


@dataclass
class SequenceState:
    """Carries memory and the previous frame's geometry through a
    sequence."""

    memory: Tensor | None = None
    memory_valid: np.ndarray | None = None
    prev_cloud: PointCloud | None = None
    prev_pixmap: np.ndarray | None = None
    prev_pose: RigidTransform | None = None
    frame_index: int = 0


def image_to_input(channels: np.ndarray, input_scale: float) -> np.ndarray:
    """Scale raw image channels into network input range."""
    x = np.array(channels, dtype=np.float32)
    x[:CH_REMISSION] /= input_scale
    return x


def aligned_memory_assignment(
    state: SequenceState, ri: RangeImage, pose: RigidTransform
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Warp assignment (src_flat, dst_flat, valid_mask) from the stored
    previous frame onto the current one."""
    wm = compute_warp_map(
        state.prev_cloud,
        state.prev_pixmap,
        relative_transform(state.prev_pose, pose),
        ri.sensor,
        ri.mode,
    )
    src, dst = wm.winner_assignment()
    mask = np.zeros(ri.sensor.height * ri.sensor.width, dtype=bool)
    mask[dst] = True
    return src, dst, mask.reshape(ri.sensor.height, ri.sensor.width)


def recurrent_step(
    model: SegmentationModel,
    state: SequenceState,
    ri: RangeImage,
    pose: RigidTransform,
    cloud: PointCloud,
    *,
    training: bool = False,
    use_alignment: bool = True,
    empty_memory: bool = False,
    frame_index: int | None = None,
) -> tuple[np.ndarray, SequenceState]:
    """Process one frame of a sequence, advancing the state.

    use_alignment=False feeds the previous memory without ego-motion
    compensation; empty_memory=True zeroes it every frame. Both exist
    as evaluation ablations.
    """
    if frame_index is not None and frame_index != state.frame_index:
        raise SequenceError(
            f"frame {frame_index} presented to a state expecting "
            f"{state.frame_index}; frames must arrive in order"
        )
    x = Tensor(image_to_input(ri.channels, model.config.input_scale)[None])

    memory = None
    valid = None
    if model.config.kind == TEMPORAL and not empty_memory and state.memory is not None:
        if use_alignment:
            src, dst, valid = aligned_memory_assignment(state, ri, pose)
            memory = warp_gather(state.memory, src, dst, tag="memory")
        else:
            memory = state.memory
            valid = state.memory_valid

    probs, new_memory = model.forward_frame(x, memory, training)

    new_state = SequenceState(
        memory=new_memory,
        memory_valid=(
            np.ones((ri.sensor.height, ri.sensor.width), dtype=bool)
            if new_memory is not None
            else None
        ),
        prev_cloud=cloud,
        prev_pixmap=ri.point_to_pixel,
        prev_pose=pose,
        frame_index=state.frame_index + 1,
    )
    return probs.data[0], new_state
