import numpy as np
import pytest

from helpers import DEG, ideal_cloud, yaw_transform

from rangeseg.alignment import RigidTransform, transform_points
from rangeseg.errors import MetricError, ShapeError
from rangeseg.evaluation import (
    ConfusionMatrix,
    iou_report_lines,
    knn_backproject,
    majority_vote_baseline,
    miou,
    per_class_iou,
)
from rangeseg.geometry import (
    CH_OCCUPANCY,
    SIMPLE,
    PointCloud,
    SensorModel,
    build_range_image,
    label_image_from_points,
)


def small_sensor():
    return SensorModel(height=8, width=16, fov_up=15 * DEG, fov_down=-15 * DEG)


# ---------------------------------------------------------------- #
# confusion matrix and IoU
# ---------------------------------------------------------------- #


def test_hand_confusion_case():
    cm = ConfusionMatrix(2).accumulate([0, 0, 1], [0, 1, 1])
    assert cm.counts[0, 0] == 1
    assert cm.counts[0, 1] == 1
    assert cm.counts[1, 1] == 1
    assert cm.counts[1, 0] == 0
    assert cm.total == 3
    iou, mean = miou(cm)
    np.testing.assert_allclose(iou, [0.5, 0.5])
    assert mean == 0.5


def test_perfect_predictions():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=500)
    cm = ConfusionMatrix(4).accumulate(labels, labels)
    assert np.all(cm.counts == np.diag(np.diag(cm.counts)))
    iou, mean = miou(cm)
    np.testing.assert_array_equal(iou, np.ones(4))
    assert mean == 1.0


def test_ignore_rows_are_skipped():
    cm = ConfusionMatrix(2, ignore_id=9)
    cm.accumulate([9, 9, 9], [0, 1, 0])
    assert cm.total == 0
    cm.accumulate([0, 9, 1], [1, 0, 1])
    assert cm.total == 2
    assert cm.counts[0, 1] == 1
    assert cm.counts[1, 1] == 1


def test_out_of_range_labels_are_errors():
    cm = ConfusionMatrix(3)
    with pytest.raises(MetricError, match="ground-truth label 3"):
        cm.accumulate([3], [0])
    with pytest.raises(MetricError, match="predicted label -2"):
        cm.accumulate([0], [-2])
    with pytest.raises(ShapeError):
        cm.accumulate([0, 1], [0])


def test_constructor_validation():
    with pytest.raises(MetricError):
        ConfusionMatrix(0)
    with pytest.raises(MetricError, match="ignore id"):
        ConfusionMatrix(3, ignore_id=1)


def test_empty_matrix_has_no_miou():
    with pytest.raises(MetricError, match="empty"):
        miou(ConfusionMatrix(2))


def test_merge_matches_single_pass_and_is_associative():
    rng = np.random.default_rng(1)
    gts = [rng.integers(0, 5, 200) for _ in range(3)]
    preds = [rng.integers(0, 5, 200) for _ in range(3)]
    parts = [
        ConfusionMatrix(5).accumulate(g, p) for g, p in zip(gts, preds)
    ]
    whole = ConfusionMatrix(5).accumulate(
        np.concatenate(gts), np.concatenate(preds)
    )
    left = parts[0].merge(parts[1]).merge(parts[2])
    right = parts[0].merge(parts[1].merge(parts[2]))
    np.testing.assert_array_equal(left.counts, whole.counts)
    np.testing.assert_array_equal(right.counts, whole.counts)
    with pytest.raises(MetricError):
        parts[0].merge(ConfusionMatrix(4))


def test_miou_matches_set_oracle():
    # brute-force per-class intersection/union over raw label vectors
    rng = np.random.default_rng(2)
    c, ignore = 6, -1
    for _ in range(100):
        n = int(rng.integers(1, 1000))
        gt = rng.integers(0, c, n)
        gt[rng.random(n) < 0.1] = ignore
        pred = rng.integers(0, c, n)
        if not np.any(gt != ignore):
            continue
        cm = ConfusionMatrix(c).accumulate(gt, pred)
        iou, mean = miou(cm)

        valid = gt != ignore
        ious = []
        for cls in range(c):
            inter = np.sum(valid & (gt == cls) & (pred == cls))
            union = np.sum(valid & ((gt == cls) | (pred == cls)))
            if union > 0:
                ious.append(inter / union)
                assert abs(iou[cls] - inter / union) < 1e-12
            else:
                assert np.isnan(iou[cls])
        assert abs(mean - np.mean(ious)) < 1e-12


def test_miou_permutation_equivariant():
    rng = np.random.default_rng(3)
    gt = rng.integers(0, 5, 400)
    pred = rng.integers(0, 5, 400)
    perm = rng.permutation(5)
    iou, mean = miou(ConfusionMatrix(5).accumulate(gt, pred))
    iou_p, mean_p = miou(
        ConfusionMatrix(5).accumulate(perm[gt], perm[pred])
    )
    np.testing.assert_allclose(iou_p[perm], iou)
    assert abs(mean - mean_p) < 1e-15


def test_strict_mode_scores_unseen_classes_zero():
    cm = ConfusionMatrix(3).accumulate([0, 0], [0, 0])  # class 1, 2 unseen
    iou, mean = miou(cm)
    np.testing.assert_array_equal(iou[:1], [1.0])
    assert np.isnan(iou[1]) and np.isnan(iou[2])
    assert mean == 1.0
    iou_s, mean_s = miou(cm, strict=True)
    np.testing.assert_array_equal(iou_s, [1.0, 0.0, 0.0])
    assert abs(mean_s - 1 / 3) < 1e-15


def test_report_lines():
    iou = np.array([0.5, np.nan, 1.0])
    lines = iou_report_lines(iou, 0.75, ["road", "car", "pole"])
    assert lines[0] == "road\t0.500000"
    assert lines[1] == "car\t-"
    assert lines[2] == "pole\t1.000000"
    assert lines[3] == "mIoU\t0.750000"
    with pytest.raises(ShapeError):
        iou_report_lines(iou, 0.75, ["just-one"])


# ---------------------------------------------------------------- #
# KNN back-projection
# ---------------------------------------------------------------- #


def test_injective_projection_identity():
    # one point per pixel: back-projection must equal direct lookup,
    # already with k=1 and a single-pixel window
    m = small_sensor()
    rng = np.random.default_rng(4)
    pc = ideal_cloud(m, rng.uniform(3, 40, size=(m.height, m.width)))
    ri = build_range_image(pc, m, SIMPLE)
    labels = rng.integers(0, 3, size=(m.height, m.width))
    for k, window in [(1, 1), (5, 5)]:
        out = knn_backproject(pc, ri, labels, k=k, window=window)
        direct = labels[ri.point_to_pixel[:, 0], ri.point_to_pixel[:, 1]]
        if (k, window) == (1, 1):
            np.testing.assert_array_equal(out, direct)
    # uniform labels: any k and window must return that label
    out = knn_backproject(pc, ri, np.full((m.height, m.width), 7), k=5)
    assert np.all(out == 7)


def test_shadowed_point_takes_far_surface_label():
    # pixel grid: own pixel holds a 5.0 m return, one neighbor 5.1 m,
    # another 9.0 m; a shadowed point at 9.02 m with k=2 sees the two
    # candidates {9.0, 5.1}, the vote ties, and the nearest (9.0) wins
    m = small_sensor()
    ranges = np.full((m.height, m.width), 30.0)
    ranges[4, 8] = 5.0
    ranges[4, 9] = 5.1
    ranges[3, 8] = 9.0
    base = ideal_cloud(m, ranges)
    direction = base.xyz[4 * m.width + 8] / 5.0
    shadow = direction * 9.02
    pc = PointCloud(
        xyz=np.vstack([base.xyz, shadow]),
        remission=np.concatenate([base.remission, [0.0]]),
    )
    ri = build_range_image(pc, m, SIMPLE)
    shadow_idx = len(pc) - 1
    assert tuple(ri.point_to_pixel[shadow_idx]) == (4, 8)
    assert ri.pixel_to_point[4, 8] != shadow_idx  # lost to the 5.0 return

    labels = np.zeros((m.height, m.width), dtype=np.int64)
    labels[4, 8] = 1
    labels[4, 9] = 1
    labels[3, 8] = 2
    out = knn_backproject(pc, ri, labels, k=2, window=5)
    assert out[shadow_idx] == 2


def test_no_candidates_falls_back_to_unlabeled():
    m = small_sensor()
    pc = ideal_cloud(m, np.full((m.height, m.width), 10.0))
    ri = build_range_image(pc, m, SIMPLE)
    ri.channels[CH_OCCUPANCY] = 0.0  # blank out every pixel
    labels = np.ones((m.height, m.width), dtype=np.int64)
    out = knn_backproject(pc, ri, labels, k=3, window=3, unlabeled=9)
    assert np.all(out == 9)


def test_knn_validation():
    m = small_sensor()
    pc = ideal_cloud(m, np.full((m.height, m.width), 10.0))
    ri = build_range_image(pc, m, SIMPLE)
    labels = np.zeros((m.height, m.width), dtype=np.int64)
    with pytest.raises(MetricError):
        knn_backproject(pc, ri, labels, k=0)
    with pytest.raises(MetricError):
        knn_backproject(pc, ri, labels, window=4)
    with pytest.raises(ShapeError):
        knn_backproject(pc, ri, labels[:4], k=1)
    short = PointCloud(xyz=pc.xyz[:5], remission=pc.remission[:5])
    with pytest.raises(ShapeError):
        knn_backproject(short, ri, labels, k=1)


def test_knn_window_wraps_columns_not_rows():
    # a point at column 0 must see a candidate at the last column; one
    # at row 0 must not see a phantom candidate below the top edge
    m = small_sensor()
    ranges = np.full((m.height, m.width), 30.0)
    ranges[4, 0] = 5.0
    ranges[4, m.width - 1] = 5.05
    base = ideal_cloud(m, ranges)
    direction = base.xyz[4 * m.width + 0] / 5.0
    shadow = direction * 5.06
    pc = PointCloud(
        xyz=np.vstack([base.xyz, shadow]),
        remission=np.concatenate([base.remission, [0.0]]),
    )
    ri = build_range_image(pc, m, SIMPLE)
    labels = np.zeros((m.height, m.width), dtype=np.int64)
    labels[4, m.width - 1] = 3
    out = knn_backproject(pc, ri, labels, k=1, window=5)
    # nearest by range is the 5.05 return across the seam
    assert out[len(pc) - 1] == 3


# ---------------------------------------------------------------- #
# majority-vote baseline
# ---------------------------------------------------------------- #


def static_frames(m, n, rng, yaw_step=0.0):
    """Identical world seen from a rotating ego; returns per-frame
    (range image, cloud, pose) plus the ground-truth label image of
    frame 0's pixel grid."""
    world = ideal_cloud(m, rng.uniform(5, 25, size=(m.height, m.width)))
    point_labels = rng.integers(0, 3, size=len(world))
    images, clouds, poses, labels = [], [], [], []
    for t in range(n):
        pose = yaw_transform(t * yaw_step)
        cloud = transform_points(world, pose.inverse())
        ri = build_range_image(cloud, m, SIMPLE)
        images.append(ri)
        clouds.append(cloud)
        poses.append(pose)
        labels.append(label_image_from_points(ri, point_labels, fill=0))
    return images, clouds, poses, labels


def test_all_frames_agree_is_identity():
    m = small_sensor()
    rng = np.random.default_rng(5)
    images, clouds, poses, labels = static_frames(m, 6, rng)
    fused = majority_vote_baseline(labels, images, clouds, poses, m, SIMPLE)
    np.testing.assert_array_equal(fused, labels[-1])


def test_single_frame_is_identity():
    m = small_sensor()
    rng = np.random.default_rng(6)
    images, clouds, poses, labels = static_frames(m, 1, rng)
    fused = majority_vote_baseline(labels, images, clouds, poses, m, SIMPLE)
    np.testing.assert_array_equal(fused, labels[0])


def test_corrupted_frame_is_outvoted():
    m = small_sensor()
    rng = np.random.default_rng(7)
    images, clouds, poses, labels = static_frames(m, 6, rng)
    u, v = 4, 7
    true_label = labels[-1][u, v]
    corrupt = (true_label + 1) % 3
    labels[2] = labels[2].copy()
    labels[2][u, v] = corrupt
    fused = majority_vote_baseline(labels, images, clouds, poses, m, SIMPLE)
    assert fused[u, v] == true_label
    np.testing.assert_array_equal(fused, labels[-1])


def test_tie_keeps_current_label():
    m = small_sensor()
    rng = np.random.default_rng(8)
    images, clouds, poses, labels = static_frames(m, 2, rng)
    u, v = 4, 7
    past = labels[0].copy()
    cur = labels[1].copy()
    past[u, v] = 1
    cur[u, v] = 2
    fused = majority_vote_baseline(
        [past, cur], images, clouds, poses, m, SIMPLE
    )
    assert fused[u, v] == 2


def test_history_cap_limits_frames():
    m = small_sensor()
    rng = np.random.default_rng(9)
    images, clouds, poses, labels = static_frames(m, 3, rng)
    a = np.zeros_like(labels[0])
    b = np.ones_like(labels[0])
    # with history=1 only frame 1 votes with the current frame: 1 vs 1
    # ties to current (b); an off-by-one that includes frame 0 would
    # make label 0 win 2 to 1
    fused = majority_vote_baseline(
        [a, a, b], images, clouds, poses, m, SIMPLE, history=1
    )
    np.testing.assert_array_equal(fused, b)


def test_vote_never_invents_a_label():
    from rangeseg.alignment import compute_warp_map, relative_transform

    m = small_sensor()
    rng = np.random.default_rng(10)
    images, clouds, poses, _ = static_frames(m, 4, rng, yaw_step=0.13)
    labels = [
        rng.integers(0, 4, size=(m.height, m.width)) for _ in range(4)
    ]
    fused = majority_vote_baseline(labels, images, clouds, poses, m, SIMPLE)

    # rebuild the warped stack to know which labels voted where
    contributed = [labels[-1]]
    for j in range(3):
        t_rel = relative_transform(poses[j], poses[-1])
        wm = compute_warp_map(
            clouds[j], images[j].point_to_pixel, t_rel, m, SIMPLE
        )
        src, dst = wm.winner_assignment()
        warped = np.full(m.height * m.width, -1, dtype=np.int64)
        warped[dst] = labels[j].reshape(-1)[src]
        contributed.append(warped.reshape(m.height, m.width))
    stack = np.stack(contributed)
    for u in range(m.height):
        for v in range(m.width):
            assert fused[u, v] in set(stack[:, u, v]) - {-1} | {
                labels[-1][u, v]
            }


def test_majority_vote_validation():
    m = small_sensor()
    rng = np.random.default_rng(11)
    images, clouds, poses, labels = static_frames(m, 2, rng)
    with pytest.raises(ShapeError):
        majority_vote_baseline(labels[:1], images, clouds, poses, m, SIMPLE)
    with pytest.raises(MetricError):
        majority_vote_baseline([], [], [], [], m, SIMPLE)
    with pytest.raises(ShapeError):
        majority_vote_baseline(
            [l[:4] for l in labels], images, clouds, poses, m, SIMPLE
        )
