import math

import numpy as np
import pytest

from scalematch.errors import GeometryError, NoPoseError
from scalematch.metrics import (
    ErrorCurve,
    RelativePose,
    apply_homography,
    auc,
    coarse_precision_recall,
    corner_error,
    epipolar_precision,
    estimate_homography,
    estimate_pose,
    image_corners,
    mask_quality,
    pose_error,
    scale_bucket,
    scale_ratio,
)

K = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]])


def rot_z(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng, max_deg):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(-max_deg, max_deg))
    skew = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * skew + (1 - math.cos(angle)) * skew @ skew


def scene(rng, rot, trans, n=100):
    world = np.stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(4, 8, n)], axis=1)
    cam_b = world @ rot.T + trans
    pa = world @ K.T
    pb = cam_b @ K.T
    return pa[:, :2] / pa[:, 2:], pb[:, :2] / pb[:, 2:]


def test_corner_error_identity_and_translation():
    assert corner_error(np.eye(3), np.eye(3), (480, 640)) == 0.0
    shift = np.array([[1.0, 0.0, 3.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert corner_error(shift, np.eye(3), (480, 640)) == pytest.approx(3.0, abs=1e-12)


def test_corner_error_matches_loop_and_is_symmetric(rng):
    size = (100, 150)
    for _ in range(20):
        h1 = np.eye(3) + rng.normal(scale=0.01, size=(3, 3)) * [[1, 1, 100], [1, 1, 100], [0.01, 0.01, 0]]
        h2 = np.eye(3) + rng.normal(scale=0.01, size=(3, 3)) * [[1, 1, 100], [1, 1, 100], [0.01, 0.01, 0]]
        total = 0.0
        for x, y in image_corners(size):
            p1, p2 = h1 @ [x, y, 1.0], h2 @ [x, y, 1.0]
            total += math.hypot(p1[0] / p1[2] - p2[0] / p2[2], p1[1] / p1[2] - p2[1] / p2[2])
        assert corner_error(h1, h2, size) == pytest.approx(total / 4, abs=1e-9)
        assert corner_error(h1, h2, size) == pytest.approx(corner_error(h2, h1, size), abs=1e-12)


def test_corner_error_singular():
    with pytest.raises(GeometryError):
        corner_error(np.zeros((3, 3)), np.eye(3), (10, 10))


def test_auc_values():
    assert auc([1.0, 2.0, 4.0], 4.0) == pytest.approx(5.0 / 12.0, abs=1e-15)
    assert auc([3.0] * 5, 3.0) == 0.0
    assert auc([3.0] * 5, 10.0) == pytest.approx(0.7, abs=1e-15)
    assert auc([0.0, 0.0], 5.0) == 1.0
    assert auc([math.inf], 5.0) == 0.0


def test_auc_monotone_in_threshold(rng):
    errors = rng.exponential(4.0, size=200)
    values = [auc(errors, t) for t in np.linspace(0.5, 30, 40)]
    assert all(b >= a - 1e-15 for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("errors,threshold", [([], 3.0), ([1.0], 0.0)])
def test_auc_rejects_bad_input(errors, threshold):
    with pytest.raises(ValueError):
        auc(errors, threshold)


def test_error_curve():
    curve = ErrorCurve([4.0, 1.0, 2.0], thresholds=(4.0,))
    assert curve.aucs()[4.0] == pytest.approx(5.0 / 12.0)
    table = curve.cumulative(max_threshold=4.0, samples=5)
    assert list(table["fraction"]) == pytest.approx([0.0, 1 / 3, 2 / 3, 2 / 3, 1.0])


def test_estimate_homography_recovers_exact_points(rng):
    truth = np.array([[1.1, 0.05, 5.0], [-0.02, 0.95, -3.0], [1e-4, 2e-4, 1.0]])
    points_a = rng.uniform(0, 200, size=(50, 2))
    estimate = estimate_homography(points_a, apply_homography(truth, points_a))
    assert corner_error(estimate, truth, (200, 200)) < 1e-6
    assert estimate_homography(points_a[:3], points_a[:3]) is None


def test_estimate_pose_noise_free(rng):
    rot, trans = random_rotation(rng, 20), np.array([0.6, -0.1, 0.2])
    pa, pb = scene(rng, rot, trans)
    estimate = estimate_pose(pa, pb, K, K, seed=0)
    assert pose_error(estimate, RelativePose(rot, trans)) < 0.1


def test_estimate_pose_rotation_about_optical_axis(rng):
    rot, trans = rot_z(10.0), np.array([1.0, 0.0, 0.0])
    pa, pb = scene(rng, rot, trans)
    estimate = estimate_pose(pa, pb, K, K, seed=0)
    assert pose_error(estimate, RelativePose(rot, trans)) < 0.1
    assert math.degrees(math.acos((np.trace(estimate.rotation) - 1) / 2)) == pytest.approx(10.0, abs=0.1)


def test_estimate_pose_needs_eight_matches(rng):
    pa, pb = scene(rng, np.eye(3), np.array([1.0, 0.0, 0.0]), n=7)
    with pytest.raises(NoPoseError):
        estimate_pose(pa, pb, K, K)


def test_estimate_pose_with_outliers(rng):
    rot, trans = random_rotation(rng, 10), np.array([0.2, 0.5, -0.1])
    pa, pb = scene(rng, rot, trans, n=150)
    pb[:30] = rng.uniform(0, 480, size=(30, 2))
    estimate = estimate_pose(pa, pb, K, K, seed=3)
    assert pose_error(estimate, RelativePose(rot, trans)) < 0.5


def test_estimate_pose_seeded_trials():
    failures = 0
    for seed in range(100):
        trial_rng = np.random.default_rng(seed)
        rot = random_rotation(trial_rng, 30)
        trans = trial_rng.normal(size=3) * [1.0, 1.0, 0.3]
        pa, pb = scene(trial_rng, rot, trans)
        if pose_error(estimate_pose(pa, pb, K, K, seed=seed), RelativePose(rot, trans)) >= 0.1:
            failures += 1
    assert failures == 0


def test_pose_error_cases():
    gt = RelativePose(np.eye(3), [1.0, 0.0, 0.0])
    assert pose_error(RelativePose(np.eye(3), [2.0, 0.0, 0.0]), gt) == pytest.approx(0.0, abs=1e-7)
    assert pose_error(RelativePose(np.eye(3), [-1.0, 0.0, 0.0]), gt) == pytest.approx(0.0, abs=1e-7)
    assert pose_error(RelativePose(rot_z(30.0), [1.0, 0.0, 0.0]), gt) == pytest.approx(30.0, abs=1e-9)
    assert pose_error(RelativePose(np.eye(3), [0.0, 1.0, 0.0]), gt) == pytest.approx(90.0, abs=1e-9)


def test_relative_pose_validation():
    with pytest.raises(GeometryError):
        RelativePose(np.eye(3), np.zeros(3))
    with pytest.raises(GeometryError):
        RelativePose(np.eye(3) * 2, [1.0, 0.0, 0.0])


def test_epipolar_precision(rng):
    rot, trans = rot_z(5.0), np.array([1.0, 0.0, 0.0])
    pa, pb = scene(rng, rot, trans)
    pose = RelativePose(rot, trans)
    assert epipolar_precision(pa, pb, K, K, pose) == 1.0
    shifted = pb + np.array([0.0, 40.0])
    assert epipolar_precision(pa, shifted, K, K, pose) < 0.1
    assert epipolar_precision(np.zeros((0, 2)), np.zeros((0, 2)), K, K, pose) == 0.0


def test_mask_quality():
    recall, iou = mask_quality(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0]))
    assert recall == 0.5 and iou == pytest.approx(1 / 3)
    assert mask_quality(np.ones(4), np.ones(4)) == (1.0, 1.0)


def test_coarse_precision_recall():
    pred = np.array([[0, 0], [1, 2], [3, 3]])
    gt = np.array([[0, 0], [1, 1], [3, 3], [4, 4]])
    assert coarse_precision_recall(pred, gt) == (2 / 3, 0.5)
    assert coarse_precision_recall(np.zeros((0, 2)), gt) == (0.0, 0.0)


def test_scale_ratio_and_buckets():
    assert scale_ratio(np.eye(3), (64, 64)) == pytest.approx(1.0)
    shrink = np.diag([1 / 3, 1 / 3, 1.0])
    assert scale_ratio(shrink, (60, 60)) == pytest.approx(3.0, rel=1e-5)
    buckets = scale_bucket([1.0, 1.99, 2.0, 3.5, 4.0, 12.0])
    assert list(buckets.astype(str)) == ["[1,2)", "[1,2)", "[2,3)", "[3,4)", "[4,inf)", "[4,inf)"]
