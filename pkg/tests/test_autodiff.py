"""Autodiff engine: operator forwards, recorded gradients, graph
truncation semantics."""

import math

import numpy as np
import pytest

from rangeseg.autodiff import (
    BatchNormState,
    Parameter,
    Tensor,
    backward,
    batch_norm,
    concat_channels,
    conv2d,
    grad_check,
    no_grad,
    read_container,
    relu,
    sigmoid,
    softmax_channels,
    tanh,
    tensor_sum,
    upsample_width2,
    warp_gather,
    weighted_cross_entropy_op,
    write_container,
)
from rangeseg.errors import FormatError, GraphError, ShapeError


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# ---------------------------------------------------------------- #
# tensor basics
# ---------------------------------------------------------------- #


def test_linear_map_gradient_is_machine_exact():
    rng = np.random.default_rng(0)
    x = t64(rng, 3, 4)
    w = t64(rng, 3, 4)

    def f():
        return tensor_sum(x * w + x * 2.0)

    # Central differences are exact for linear maps; a generous step
    # avoids cancellation noise in the loss difference.
    err = grad_check(f, [x, w], step=1e-3)
    assert err < 1e-10


def test_shape_mismatch_rejected():
    a = Tensor(np.zeros((2, 3)), requires_grad=True)
    b = Tensor(np.zeros((3, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        _ = a + b


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = x * 2.0
    with pytest.raises(GraphError):
        backward(y)


def test_backward_without_graph_raises():
    x = Tensor(np.ones(1))  # no grad
    y = x * 3.0
    with pytest.raises(GraphError):
        backward(y)


def test_no_grad_disables_recording():
    x = Tensor(np.ones(4), requires_grad=True)
    with no_grad():
        y = tensor_sum(x * 2.0)
    assert not y.requires_grad
    with pytest.raises(GraphError):
        backward(y)


def test_gradient_accumulates_across_backward_calls():
    # Leaves accumulate, interior gradients are reset per call.
    x = Tensor(np.array([1.0]), requires_grad=True)
    h = x * 2.0          # shared interior node
    loss1 = tensor_sum(h)
    backward(loss1)
    assert x.grad[0] == 2.0
    loss2 = tensor_sum(h * 3.0)  # extends the same graph
    backward(loss2)
    # 2 (first call) + 6 (second call); a stale interior gradient would
    # inflate this to 10.
    assert x.grad[0] == 8.0


def test_parameter_reused_per_timestep_sums_contributions():
    rng = np.random.default_rng(1)
    w = Parameter(rng.normal(size=(2, 2, 1, 1)), name="w")
    x1 = Tensor(rng.normal(size=(1, 2, 2, 2)))
    x2 = Tensor(rng.normal(size=(1, 2, 2, 2)))
    loss = tensor_sum(conv2d(x1, w) + conv2d(x2, w))
    backward(loss)
    total = w.grad.copy()
    w.zero_grad()
    backward(tensor_sum(conv2d(x1, w)))
    g1 = w.grad.copy()
    w.zero_grad()
    backward(tensor_sum(conv2d(x2, w)))
    g2 = w.grad.copy()
    np.testing.assert_allclose(total, g1 + g2, rtol=1e-12)


def test_stop_tensors_truncate_traversal():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * 2.0
    z = y * 3.0
    backward(tensor_sum(z), stop=(y,))
    assert x.grad is None
    assert y.grad[0] == 3.0


def test_detach_in_place_cuts_history():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * 2.0
    y.detach_()
    # y is a plain leaf now; downstream graphs never reach x.
    z = y * 3.0
    assert not z.requires_grad  # y stopped requiring grad entirely
    x2 = Tensor(np.array([2.0]), requires_grad=True)
    loss = tensor_sum(Tensor(y.data, requires_grad=True) * 1.0 + x2 * 0.5)
    backward(loss)
    assert x.grad is None
    assert x2.grad[0] == 0.5


def test_backward_visited_reports_graph_span():
    x = Tensor(np.array([1.0]), requires_grad=True)
    a = x * 2.0
    a.tag = "step"
    b = a * 1.5
    b.tag = "step"
    visited = backward(tensor_sum(b), return_visited=True)
    assert sum(1 for n in visited if n.tag == "step") == 2


# ---------------------------------------------------------------- #
# convolution
# ---------------------------------------------------------------- #


def test_conv_identity_kernel():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(1, 1, 4, 6)))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = conv2d(x, Tensor(w))
    np.testing.assert_allclose(out.data, x.data)


def test_conv_wraps_horizontally_and_zero_pads_vertically():
    # Single nonzero pixel in the top-left corner, all-ones 3x3 kernel:
    # the left column neighbourhood wraps to the last column, while
    # nothing appears above row 0.
    x = np.zeros((1, 1, 3, 4))
    x[0, 0, 0, 0] = 1.0
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
    expected = np.zeros((3, 4))
    expected[0:2, 0:2] = 1.0   # rows 0-1, cols 0-1
    expected[0:2, 3] = 1.0     # wrapped column w-1
    np.testing.assert_allclose(out, expected)


def test_conv_equivariant_to_column_roll():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 4, 8))
    w = Tensor(rng.normal(size=(5, 3, 3, 3)))
    direct = conv2d(Tensor(np.roll(x, 3, axis=3)), w).data
    rolled = np.roll(conv2d(Tensor(x), w).data, 3, axis=3)
    np.testing.assert_array_equal(direct, rolled)


def test_conv_stride_two_halves_width():
    rng = np.random.default_rng(4)
    out = conv2d(
        Tensor(rng.normal(size=(1, 2, 4, 8))),
        Tensor(rng.normal(size=(3, 2, 3, 3))),
        stride_w=2,
    )
    assert out.shape == (1, 3, 4, 4)


def test_conv_gradients_all_inputs():
    rng = np.random.default_rng(5)
    x = t64(rng, 2, 3, 4, 6)
    w = t64(rng, 4, 3, 3, 3, scale=0.5)
    b = t64(rng, 4)

    def f():
        return tensor_sum(sigmoid(conv2d(x, w, b)))

    assert grad_check(f, [x, w, b]) < 1e-6


def test_conv_stride_gradient():
    rng = np.random.default_rng(6)
    x = t64(rng, 1, 2, 3, 8)
    w = t64(rng, 2, 2, 3, 3, scale=0.5)

    def f():
        return tensor_sum(tanh(conv2d(x, w, stride_w=2)))

    assert grad_check(f, [x, w]) < 1e-6


def test_pointwise_conv_gradient():
    rng = np.random.default_rng(7)
    x = t64(rng, 2, 4, 3, 4)
    w = t64(rng, 3, 4, 1, 1, scale=0.5)

    def f():
        return tensor_sum(relu(conv2d(x, w)))

    assert grad_check(f, [x, w]) < 1e-6


def test_upsample_doubles_width_exactly():
    x = np.array([[[[1.0, 2.0]]]])  # (1, 1, 1, 2)
    w = np.zeros((1, 1, 2))
    w[0, 0, 0] = 10.0
    w[0, 0, 1] = 20.0
    out = upsample_width2(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(out, [[[[10.0, 20.0, 20.0, 40.0]]]])


def test_upsample_gradient():
    rng = np.random.default_rng(8)
    x = t64(rng, 2, 3, 2, 4)
    w = t64(rng, 3, 2, 2, scale=0.5)
    b = t64(rng, 2)

    def f():
        return tensor_sum(sigmoid(upsample_width2(x, w, b)))

    assert grad_check(f, [x, w, b]) < 1e-6


# ---------------------------------------------------------------- #
# batch norm
# ---------------------------------------------------------------- #


def test_batch_norm_normalizes_and_updates_running_stats():
    x = Tensor(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))
    gamma = Tensor(np.ones(1))
    beta = Tensor(np.zeros(1))
    state = BatchNormState(1)
    out = batch_norm(x, gamma, beta, state, training=True)
    np.testing.assert_allclose(
        out.data.ravel(), [-0.99999500, 0.99999500], rtol=1e-6
    )
    assert state.running_mean[0] == pytest.approx(0.1)
    assert state.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 1.0)


def test_batch_norm_eval_uses_running_stats():
    state = BatchNormState(1)
    state.running_mean[:] = 5.0
    state.running_var[:] = 4.0
    x = Tensor(np.array([7.0]).reshape(1, 1, 1, 1))
    out = batch_norm(
        x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, training=False
    )
    assert out.data.ravel()[0] == pytest.approx(2.0 / math.sqrt(4 + 1e-5))


def test_batch_norm_eval_converges_to_train_output():
    rng = np.random.default_rng(9)
    data = rng.normal(loc=3.0, scale=2.0, size=(4, 2, 3, 5))
    gamma = Tensor(rng.normal(size=2))
    beta = Tensor(rng.normal(size=2))
    state = BatchNormState(2)
    for _ in range(300):
        train_out = batch_norm(Tensor(data), gamma, beta, state, training=True)
    eval_out = batch_norm(Tensor(data), gamma, beta, state, training=False)
    assert np.max(np.abs(eval_out.data - train_out.data)) < 1e-4


def test_batch_norm_gradient_train_mode():
    rng = np.random.default_rng(10)
    x = t64(rng, 3, 2, 2, 4)
    gamma = t64(rng, 2)
    beta = t64(rng, 2)

    def f():
        state = BatchNormState(2)
        return tensor_sum(sigmoid(batch_norm(x, gamma, beta, state, True)))

    # Normalization makes some input-gradient coordinates nearly cancel,
    # which amplifies finite-difference noise; 1e-4 is the gate used
    # throughout.
    assert grad_check(f, [x, gamma, beta]) < 1e-4


def test_batch_norm_gradient_eval_mode():
    rng = np.random.default_rng(11)
    x = t64(rng, 2, 2, 2, 3)
    gamma = t64(rng, 2)
    beta = t64(rng, 2)
    state = BatchNormState(2)
    state.running_mean[:] = rng.normal(size=2)
    state.running_var[:] = np.abs(rng.normal(size=2)) + 0.5

    def f():
        return tensor_sum(tanh(batch_norm(x, gamma, beta, state, False)))

    assert grad_check(f, [x, gamma, beta]) < 1e-6


# ---------------------------------------------------------------- #
# activations, concat, softmax
# ---------------------------------------------------------------- #


def test_activation_values():
    x = Tensor(np.array([0.0]))
    assert sigmoid(x).data[0] == pytest.approx(0.5)
    assert tanh(x).data[0] == pytest.approx(0.0)
    assert relu(Tensor(np.array([-3.0, 3.0]))).data.tolist() == [0.0, 3.0]


def test_sigmoid_extreme_inputs_stay_finite():
    x = Tensor(np.array([-800.0, 800.0]))
    out = sigmoid(x).data
    assert np.isfinite(out).all()
    assert out[0] == pytest.approx(0.0, abs=1e-300)
    assert out[1] == pytest.approx(1.0)


def test_activation_gradients():
    rng = np.random.default_rng(12)
    # Keep clear of the ReLU kink so central differences are valid.
    base = rng.normal(size=(2, 3, 2, 2))
    base = np.where(np.abs(base) < 0.05, 0.3, base)
    x = Tensor(base, requires_grad=True)

    def f():
        return tensor_sum(relu(x) * 1.0 + sigmoid(x) + tanh(x))

    assert grad_check(f, [x]) < 1e-7


def test_concat_splits_gradient():
    rng = np.random.default_rng(13)
    a = t64(rng, 1, 2, 2, 3)
    b = t64(rng, 1, 3, 2, 3)

    def f():
        return tensor_sum(sigmoid(concat_channels([a, b])))

    assert grad_check(f, [a, b]) < 1e-7


def test_softmax_is_distribution_and_shift_invariant():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(2, 5, 3, 4)) * 10
    p = softmax_channels(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    p2 = softmax_channels(Tensor(x + 123.0)).data
    np.testing.assert_allclose(p, p2, atol=1e-12)


def test_softmax_gradient():
    rng = np.random.default_rng(15)
    x = t64(rng, 1, 4, 2, 3)
    pick = Tensor(rng.normal(size=(1, 4, 2, 3)))

    def f():
        return tensor_sum(softmax_channels(x) * pick)

    assert grad_check(f, [x]) < 1e-7


# ---------------------------------------------------------------- #
# weighted cross entropy
# ---------------------------------------------------------------- #


def test_cross_entropy_hand_example():
    probs = np.array([[0.7, 0.2], [0.3, 0.8]]).T.reshape(1, 2, 1, 2)
    labels = np.array([0, 1]).reshape(1, 1, 2)
    weights = np.array([2.0, 0.5])
    loss = weighted_cross_entropy_op(
        Tensor(probs), labels, weights, ignore_id=9
    )
    expected = (2.0 * -math.log(0.7) + 0.5 * -math.log(0.8)) / 2.0
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    assert loss.item() == pytest.approx(0.41246083176728486, rel=1e-12)


def test_cross_entropy_ignores_marked_pixels():
    probs = np.full((1, 2, 1, 3), 0.5)
    labels = np.array([[[0, 7, 7]]])
    loss = weighted_cross_entropy_op(
        Tensor(probs), labels, np.array([1.0, 1.0]), ignore_id=7
    )
    assert loss.item() == pytest.approx(-math.log(0.5))


def test_cross_entropy_all_ignored_is_zero():
    probs = Tensor(np.full((1, 2, 2, 2), 0.5), requires_grad=True)
    labels = np.full((1, 2, 2), 7)
    loss = weighted_cross_entropy_op(probs, labels, np.ones(2), ignore_id=7)
    assert loss.item() == 0.0
    backward(loss)
    assert probs.grad is None or np.count_nonzero(probs.grad) == 0


def test_cross_entropy_clamps_tiny_probabilities():
    probs = np.array([1e-15, 1.0 - 1e-15]).reshape(1, 2, 1, 1)
    labels = np.zeros((1, 1, 1), dtype=int)
    loss = weighted_cross_entropy_op(
        Tensor(probs), labels, np.ones(2), ignore_id=9
    )
    assert loss.item() == pytest.approx(-math.log(1e-12))


def test_cross_entropy_rejects_out_of_range_labels():
    probs = Tensor(np.full((1, 2, 1, 1), 0.5))
    with pytest.raises(ShapeError):
        weighted_cross_entropy_op(
            probs, np.array([[[5]]]), np.ones(2), ignore_id=9
        )


def test_cross_entropy_gradient():
    rng = np.random.default_rng(16)
    logits = t64(rng, 2, 3, 2, 4)
    labels = rng.integers(0, 3, size=(2, 2, 4))
    labels[0, 0, 0] = 7  # one ignored pixel
    weights = np.array([0.5, 1.0, 2.0])

    def f():
        return weighted_cross_entropy_op(
            softmax_channels(logits), labels, weights, ignore_id=7
        )

    assert grad_check(f, [logits]) < 1e-6


# ---------------------------------------------------------------- #
# warp gather
# ---------------------------------------------------------------- #


def test_warp_gather_moves_and_zeroes():
    x = np.arange(12, dtype=float).reshape(1, 1, 3, 4)
    out = warp_gather(Tensor(x), np.array([0, 5]), np.array([11, 2]))
    expected = np.zeros((1, 1, 3, 4))
    expected[0, 0, 2, 3] = 0.0  # value of flat pixel 0
    expected[0, 0, 0, 2] = 5.0
    np.testing.assert_allclose(out.data, expected)


def test_warp_gather_rejects_colliding_targets():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(GraphError):
        warp_gather(x, np.array([0, 1]), np.array([3, 3]))


def test_warp_gather_gradient():
    rng = np.random.default_rng(17)
    x = t64(rng, 2, 3, 3, 4)
    src = np.array([0, 3, 7, 11])
    dst = np.array([5, 0, 2, 9])

    def f():
        return tensor_sum(sigmoid(warp_gather(x, src, dst)))

    assert grad_check(f, [x]) < 1e-7


# ---------------------------------------------------------------- #
# container
# ---------------------------------------------------------------- #


def test_container_round_trip(tmp_path):
    rng = np.random.default_rng(18)
    arrays = {
        "weights/a": rng.normal(size=(3, 4)).astype(np.float32),
        "weights/b": rng.integers(0, 10, size=7).astype(np.int64),
        "mask": rng.random(5) > 0.5,
    }
    extra = {"iteration": 42, "config": {"h": 16}}
    path = tmp_path / "state.rsck"
    write_container(path, arrays, extra)
    back, meta = read_container(path)
    assert meta == extra
    assert set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
        assert back[k].dtype == arrays[k].dtype


def test_container_rejects_garbage(tmp_path):
    path = tmp_path / "bad.rsck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        read_container(path)


def test_container_reports_truncation(tmp_path):
    rng = np.random.default_rng(19)
    path = tmp_path / "trunc.rsck"
    write_container(path, {"x": rng.normal(size=100)})
    data = path.read_bytes()
    path.write_bytes(data[:-40])
    with pytest.raises(FormatError, match="truncated"):
        read_container(path)
