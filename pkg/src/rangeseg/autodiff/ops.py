"""Differentiable operators for range-image networks.

All image tensors are (N, C, H, W). Convolutions pad the vertical axis
with zeros and the horizontal axis circularly, because image columns
are azimuth bins of a rotating sensor: column w-1 is physically
adjacent to column 0 and features must be free to flow across that
seam. Downsampling only ever strides the horizontal axis; the vertical
resolution of lidar images is low to begin with.

Forward passes store references to their inputs; whatever else a
backward pass needs (e.g. the unfolded convolution patches) is
recomputed, trading a little time for a much smaller peak memory when
long recurrent graphs are alive.
"""

from __future__ import annotations

import numpy as np

from ..errors import GraphError, ShapeError
from .tensor import Tensor, is_grad_enabled

# ----------------------------------------------------------------- #
# helpers
# ----------------------------------------------------------------- #


def _result(data, parents, backward_builder, tag=None):
    """Create an op result; backward_builder() -> closure, built lazily
    only when the graph is being recorded."""
    req = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, parents=tuple(parents), tag=tag)
    if req:
        out.backward_fn = backward_builder()
    return out


def _pad_image(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero-pad rows, circularly pad columns."""
    if ph:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (0, 0)))
    if pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, 0), (pw, pw)), mode="wrap")
    return x


def _unpad_grad(g: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Adjoint of _pad_image: fold circular columns back, drop zero rows."""
    if pw:
        g[:, :, :, pw : 2 * pw] += g[:, :, :, -pw:]
        g[:, :, :, -2 * pw : -pw] += g[:, :, :, :pw]
        g = g[:, :, :, pw:-pw]
    if ph:
        g = g[:, :, ph:-ph, :]
    return g


def _unfold(x_pad: np.ndarray, kh: int, kw: int, sw: int) -> np.ndarray:
    """im2col: (N, C, Hp, Wp) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    n, c, hp, wp = x_pad.shape
    ho = hp - kh + 1
    wo = (wp - kw) // sw + 1
    sn, sc, sh, swd = x_pad.strides
    view = np.lib.stride_tricks.as_strided(
        x_pad,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, swd, sh, swd * sw),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo), ho, wo


def _fold_add(
    grad_pad: np.ndarray, cols_grad: np.ndarray, kh: int, kw: int, sw: int
) -> None:
    """col2im: scatter-add patch gradients back onto the padded image."""
    n, c, hp, wp = grad_pad.shape
    ho = hp - kh + 1
    wo = (wp - kw) // sw + 1
    g = cols_grad.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            grad_pad[:, :, i : i + ho, j : j + (wo - 1) * sw + 1 : sw] += g[
                :, :, i, j
            ]


# ----------------------------------------------------------------- #
# convolution
# ----------------------------------------------------------------- #


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride_w: int = 1) -> Tensor:
    """2d convolution with same-size vertical output.

    weight is (C_out, C_in, kh, kw); padding is kh//2 zero rows and
    kw//2 circular columns, so odd kernels preserve height and the
    width shrinks only through stride_w.
    """
    n, c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ShapeError(
            f"conv input has {c_in} channels but weight expects {c_in_w}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel must be odd-sized, got {kh}x{kw}")
    if w % stride_w != 0:
        raise ShapeError(
            f"width {w} not divisible by horizontal stride {stride_w}"
        )
    ph, pw = kh // 2, kw // 2

    x_pad = _pad_image(x.data, ph, pw)
    cols, ho, wo = _unfold(x_pad, kh, kw, stride_w)
    w_mat = weight.data.reshape(c_out, c_in * kh * kw)
    out = np.einsum("of,nfp->nop", w_mat, cols, optimize=True)
    # einsum can hand back a transposed view; keep activations C-order
    # so identical values always take identical downstream code paths
    out = np.ascontiguousarray(out.reshape(n, c_out, ho, wo))
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"bias must be ({c_out},), got {bias.shape}")
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def build():
        def bwd(g):
            g_mat = g.reshape(n, c_out, ho * wo)
            if weight.requires_grad:
                # patches are recomputed rather than kept alive
                cols_b, _, _ = _unfold(_pad_image(x.data, ph, pw), kh, kw, stride_w)
                gw = np.einsum("nop,nfp->of", g_mat, cols_b, optimize=True)
                weight.accumulate_grad(gw.reshape(weight.shape))
            if x.requires_grad:
                gcols = np.einsum("of,nop->nfp", w_mat, g_mat, optimize=True)
                gpad = np.zeros(
                    (n, c_in, h + 2 * ph, w + 2 * pw), dtype=g.dtype
                )
                _fold_add(gpad, gcols, kh, kw, stride_w)
                x.accumulate_grad(_unpad_grad(gpad, ph, pw))
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

        return bwd

    return _result(out, parents, build)


def upsample_width2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution doubling the width (stride 2, kernel 1x2).

    weight is (C_in, C_out, 2): output column 2j+k receives
    sum_c x[c, :, j] * weight[c, :, k]. The exact inverse stride of the
    horizontal downsampling used by the extractors.
    """
    n, c_in, h, w = x.shape
    if weight.data.ndim != 3 or weight.shape[0] != c_in or weight.shape[2] != 2:
        raise ShapeError(
            f"upsample weight must be ({c_in}, C_out, 2), got {weight.shape}"
        )
    c_out = weight.shape[1]
    w_arr = weight.data  # forward-time value, optimizers rebind .data
    out = np.empty((n, c_out, h, 2 * w), dtype=x.data.dtype)
    out[:, :, :, 0::2] = np.einsum(
        "nchw,co->nohw", x.data, w_arr[:, :, 0], optimize=True
    )
    out[:, :, :, 1::2] = np.einsum(
        "nchw,co->nohw", x.data, w_arr[:, :, 1], optimize=True
    )
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"bias must be ({c_out},), got {bias.shape}")
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def build():
        def bwd(g):
            g_even = g[:, :, :, 0::2]
            g_odd = g[:, :, :, 1::2]
            if x.requires_grad:
                gx = np.einsum(
                    "nohw,co->nchw", g_even, w_arr[:, :, 0], optimize=True
                )
                gx += np.einsum(
                    "nohw,co->nchw", g_odd, w_arr[:, :, 1], optimize=True
                )
                x.accumulate_grad(gx)
            if weight.requires_grad:
                gw = np.empty_like(weight.data)
                gw[:, :, 0] = np.einsum(
                    "nchw,nohw->co", x.data, g_even, optimize=True
                )
                gw[:, :, 1] = np.einsum(
                    "nchw,nohw->co", x.data, g_odd, optimize=True
                )
                weight.accumulate_grad(gw)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

        return bwd

    return _result(out, parents, build)


# ----------------------------------------------------------------- #
# batch normalization
# ----------------------------------------------------------------- #


class BatchNormState:
    """Running statistics of one batch-norm layer (not differentiated)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps
        self.batches_seen = 0


def batch_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with batch statistics (population variance)
    and blends them into the running estimates with the configured
    momentum; eval mode uses the running estimates only.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}"
        )
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var
        state.batches_seen += 1
    else:
        mean = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    gamma_arr = gamma.data  # forward-time value, optimizers rebind .data
    out = gamma_arr[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    def build():
        def bwd(g):
            if gamma.requires_grad:
                gamma.accumulate_grad(np.sum(g * x_hat, axis=axes))
            if beta.requires_grad:
                beta.accumulate_grad(np.sum(g, axis=axes))
            if x.requires_grad:
                gs = g * gamma_arr[None, :, None, None]
                if training:
                    mean_gs = gs.mean(axis=axes)
                    mean_gs_xhat = (gs * x_hat).mean(axis=axes)
                    gx = (
                        gs
                        - mean_gs[None, :, None, None]
                        - x_hat * mean_gs_xhat[None, :, None, None]
                    ) * inv_std[None, :, None, None]
                else:
                    gx = gs * inv_std[None, :, None, None]
                x.accumulate_grad(gx)

        return bwd

    return _result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), build)


# ----------------------------------------------------------------- #
# activations and elementwise
# ----------------------------------------------------------------- #


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def build():
        return lambda g: x.accumulate_grad(g * mask)

    return _result(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), build)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def build():
        return lambda g: x.accumulate_grad(g * out * (1.0 - out))

    return _result(out, (x,), build)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def build():
        return lambda g: x.accumulate_grad(g * (1.0 - out * out))

    return _result(out, (x,), build)


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    if not tensors:
        raise ShapeError("concat of zero tensors")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(
                f"concat shape mismatch: {t.shape} vs {base}"
            )
    out = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def build():
        def bwd(g):
            for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t.accumulate_grad(g[:, a:b])

        return bwd

    return _result(out, tensors, build)


def tensor_sum(x: Tensor) -> Tensor:
    def build():
        return lambda g: x.accumulate_grad(np.full_like(x.data, float(g)))

    return _result(np.asarray(x.data.sum()), (x,), build)


# ----------------------------------------------------------------- #
# softmax / loss
# ----------------------------------------------------------------- #


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis, numerically shifted by the max."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def build():
        def bwd(g):
            dot = np.sum(g * out, axis=1, keepdims=True)
            x.accumulate_grad(out * (g - dot))

        return bwd

    return _result(out, (x,), build)


LOG_CLAMP = 1e-12


def weighted_cross_entropy_op(
    probs: Tensor, labels: np.ndarray, weights: np.ndarray, ignore_id: int
) -> Tensor:
    """Mean weighted negative log likelihood over non-ignored pixels.

    probs holds per-pixel class distributions (N, C, H, W); labels is
    integer (N, H, W). Probabilities below LOG_CLAMP are clamped inside
    the log, with zero gradient there. A frame with no valid pixel
    contributes a loss of exactly 0.
    """
    n, c, h, w = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"labels must be {(n, h, w)}, got {labels.shape}"
        )
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (c,):
        raise ShapeError(f"weights must be ({c},), got {weights.shape}")
    valid = labels != ignore_id
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ShapeError(
            f"label id out of range [0, {c}) at {int(bad.sum())} pixels"
        )
    n_valid = int(valid.sum())
    if n_valid == 0:
        def build_zero():
            return lambda g: None
        return _result(np.asarray(0.0, dtype=probs.data.dtype), (probs,), build_zero)

    safe_labels = np.where(valid, labels, 0)
    ni, hi, wi = np.nonzero(valid)
    picked = probs.data[ni, safe_labels[valid], hi, wi]
    wgt = weights[safe_labels[valid]]
    clamped = np.maximum(picked, LOG_CLAMP)
    loss = float(np.sum(wgt * -np.log(clamped)) / n_valid)

    def build():
        def bwd(g):
            gp = np.zeros_like(probs.data)
            live = picked >= LOG_CLAMP
            contrib = np.where(live, -wgt / np.maximum(picked, LOG_CLAMP), 0.0)
            gp[ni, safe_labels[valid], hi, wi] = contrib / n_valid
            probs.accumulate_grad(gp * float(g))

        return bwd

    return _result(np.asarray(loss, dtype=probs.data.dtype), (probs,), build)


# ----------------------------------------------------------------- #
# memory warp
# ----------------------------------------------------------------- #


def warp_gather_multi(
    x: Tensor, assignments: list[tuple[np.ndarray, np.ndarray]], tag=None
) -> Tensor:
    """warp_gather with one (src_flat, dst_flat) pair per batch sample.

    Batched sub-sequences warp each sample by its own ego motion, so the
    assignment differs per sample.
    """
    n, c, h, w = x.shape
    if len(assignments) != n:
        raise ShapeError(
            f"{len(assignments)} warp assignments for a batch of {n}"
        )
    pairs = []
    for src, dst in assignments:
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if src.shape != dst.shape:
            raise ShapeError("warp source/target index length mismatch")
        if len(dst) != len(np.unique(dst)):
            raise GraphError(
                "warp targets must be unique; resolve collisions before warping"
            )
        pairs.append((src, dst))
    flat = x.data.reshape(n, c, h * w)
    out = np.zeros(flat.shape, dtype=flat.dtype)
    for i, (src, dst) in enumerate(pairs):
        out[i][:, dst] = flat[i][:, src]

    def build():
        def bwd(g):
            gg = g.reshape(n, c, h * w)
            gx = np.zeros_like(flat)
            for i, (src, dst) in enumerate(pairs):
                gx[i][:, src] = gg[i][:, dst]
            x.accumulate_grad(gx.reshape(x.shape))

        return bwd

    return _result(out.reshape(x.shape), (x,), build, tag=tag)


def warp_gather(
    x: Tensor, src_flat: np.ndarray, dst_flat: np.ndarray, tag=None
) -> Tensor:
    """Rearrange feature pixels by a resolved warp assignment.

    For each pair (src_flat[i], dst_flat[i]) the feature column at flat
    pixel src lands at flat pixel dst; everything else becomes zero.
    dst_flat must be collision-free (resolve first). Gradient flows back
    along the same index pairs, so recurrent memory stays trainable
    through the ego-motion alignment.
    """
    n, c, h, w = x.shape
    src_flat = np.asarray(src_flat, dtype=np.int64)
    dst_flat = np.asarray(dst_flat, dtype=np.int64)
    if src_flat.shape != dst_flat.shape:
        raise ShapeError("warp source/target index length mismatch")
    if len(dst_flat) != len(np.unique(dst_flat)):
        raise GraphError(
            "warp targets must be unique; resolve collisions before warping"
        )
    flat = x.data.reshape(n, c, h * w)
    out = np.zeros(flat.shape, dtype=flat.dtype)
    out[:, :, dst_flat] = flat[:, :, src_flat]

    def build():
        def bwd(g):
            gg = g.reshape(n, c, h * w)
            gx = np.zeros_like(flat)
            gx[:, :, src_flat] = gg[:, :, dst_flat]
            x.accumulate_grad(gx.reshape(x.shape))

        return bwd

    return _result(out.reshape(x.shape), (x,), build, tag=tag)
