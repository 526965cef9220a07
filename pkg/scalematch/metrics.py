"""Evaluation geometry: corner error, exact AUC, homography and relative-pose estimation, mask quality."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd
from sklearn.metrics import jaccard_score, recall_score

from scalematch.errors import GeometryError, NoPoseError

logger = logging.getLogger(__name__)

SCALE_BINS = (1.0, 2.0, 3.0, 4.0, math.inf)
SCALE_LABELS = ("[1,2)", "[2,3)", "[3,4)", "[4,inf)")
EPIPOLAR_THRESHOLD = 5e-4


def image_corners(size: Sequence[int]) -> np.ndarray:
    h, w = size
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def apply_homography(homography: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    proj = np.concatenate([points, np.ones((len(points), 1))], axis=1) @ np.asarray(homography, dtype=np.float64).T
    return proj[:, :2] / proj[:, 2:3]


def _check_invertible(homography: np.ndarray, name: str) -> None:
    det = np.linalg.det(np.asarray(homography, dtype=np.float64))
    if not np.isfinite(det) or abs(det) < 1e-12:
        raise GeometryError(f"{name} is not invertible")


def corner_error(h_est: np.ndarray, h_gt: np.ndarray, size: Sequence[int]) -> float:
    """Mean distance between the image corners warped by the estimate and by the ground truth."""
    _check_invertible(h_est, "Estimated homography")
    _check_invertible(h_gt, "Ground-truth homography")
    corners = image_corners(size)
    diff = apply_homography(h_est, corners) - apply_homography(h_gt, corners)
    return float(np.linalg.norm(diff, axis=1).mean())


def auc(errors: Iterable[float], threshold: float) -> float:
    """(1/T) * integral over [0, T] of the fraction of errors <= t, integrated exactly over the step CDF."""
    errors = np.asarray(list(errors), dtype=np.float64)
    if errors.size == 0:
        raise ValueError("AUC needs at least one error value")
    if threshold <= 0:
        raise ValueError(f"AUC threshold must be positive, got {threshold}")
    # Each error e contributes a step of height 1/n over [e, T]
    return float(np.clip(threshold - errors, 0.0, None).mean() / threshold)


@dataclass
class ErrorCurve:
    errors: np.ndarray
    thresholds: Sequence[float] = field(default_factory=lambda: (3.0, 5.0, 10.0))

    def __post_init__(self):
        self.errors = np.sort(np.asarray(self.errors, dtype=np.float64))
        if (self.errors < 0).any():
            raise ValueError("Errors must be non-negative")

    def aucs(self) -> Dict[float, float]:
        return {t: auc(self.errors, t) for t in self.thresholds}

    def cumulative(self, max_threshold: Optional[float] = None, samples: int = 200) -> pd.DataFrame:
        """Fraction of pairs with error <= t on a regular grid of t, for plotting."""
        top = max_threshold or max(self.thresholds)
        grid = np.linspace(0.0, top, samples)
        frac = np.searchsorted(self.errors, grid, side="right") / max(len(self.errors), 1)
        return pd.DataFrame({"threshold": grid, "fraction": frac})


def estimate_homography(points_a: np.ndarray, points_b: np.ndarray, threshold: float = 3.0) -> Optional[np.ndarray]:
    """RANSAC homography A -> B; None when it cannot be estimated."""
    if len(points_a) < 4:
        return None
    homography, _ = cv2.findHomography(
        np.asarray(points_a, dtype=np.float64), np.asarray(points_b, dtype=np.float64), cv2.RANSAC, threshold
    )
    if homography is None or not np.isfinite(homography).all():
        return None
    return homography


@dataclass
class RelativePose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(t)
        if norm < 1e-12:
            raise GeometryError("Translation direction is undefined for a zero translation")
        self.translation = t / norm
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9):
            raise GeometryError("Rotation is not orthonormal")


def rotation_angle(rot: np.ndarray) -> float:
    return math.degrees(math.acos(float(np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0))))


def pose_error(est: RelativePose, gt: RelativePose) -> float:
    """max(rotation angle error, sign-agnostic translation direction error) in degrees."""
    err_r = rotation_angle(est.rotation.T @ gt.rotation)
    cos_t = abs(float(np.dot(est.translation, gt.translation)))
    err_t = math.degrees(math.acos(min(cos_t, 1.0)))
    return max(err_r, err_t)


def _normalize_points(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Hartley normalization: zero centroid and mean distance sqrt(2)."""
    centroid = points.mean(axis=0)
    dist = np.linalg.norm(points - centroid, axis=1).mean()
    scale = math.sqrt(2.0) / max(dist, 1e-12)
    transform = np.array([[scale, 0.0, -scale * centroid[0]], [0.0, scale, -scale * centroid[1]], [0.0, 0.0, 1.0]])
    homog = np.concatenate([points, np.ones((len(points), 1))], axis=1) @ transform.T
    return homog, transform


def fit_essential(x1: np.ndarray, x2: np.ndarray) -> Optional[np.ndarray]:
    """Normalized 8-point essential matrix from >= 8 calibrated correspondences, x2^T E x1 = 0."""
    n1, t1 = _normalize_points(x1)
    n2, t2 = _normalize_points(x2)
    design = np.stack([
        n2[:, 0] * n1[:, 0], n2[:, 0] * n1[:, 1], n2[:, 0],
        n2[:, 1] * n1[:, 0], n2[:, 1] * n1[:, 1], n2[:, 1],
        n1[:, 0], n1[:, 1], np.ones(len(n1)),
    ], axis=1)
    _, s, vt = np.linalg.svd(design)
    if len(s) >= 8 and s[7] < 1e-12 * max(s[0], 1e-300):
        # Rank-deficient sample
        return None
    essential = t2.T @ vt[-1].reshape(3, 3) @ t1
    u, _, vt = np.linalg.svd(essential)
    essential = u @ np.diag([1.0, 1.0, 0.0]) @ vt
    return essential / np.linalg.norm(essential)


def sampson_distance(essential: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    h1 = np.concatenate([x1, np.ones((len(x1), 1))], axis=1)
    h2 = np.concatenate([x2, np.ones((len(x2), 1))], axis=1)
    ex1 = h1 @ essential.T
    etx2 = h2 @ essential
    num = np.sum(h2 * ex1, axis=1) ** 2
    den = ex1[:, 0] ** 2 + ex1[:, 1] ** 2 + etx2[:, 0] ** 2 + etx2[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


def triangulate(rot: np.ndarray, trans: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Linear triangulation with P1 = [I|0], P2 = [R|t]; returns depths in both cameras."""
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    p2 = np.hstack([rot, trans.reshape(3, 1)])
    system = np.stack([
        x1[:, 0:1] * p1[2] - p1[0],
        x1[:, 1:2] * p1[2] - p1[1],
        x2[:, 0:1] * p2[2] - p2[0],
        x2[:, 1:2] * p2[2] - p2[1],
    ], axis=1)
    _, _, vt = np.linalg.svd(system)
    world = vt[:, -1, :]
    world = world[:, :3] / world[:, 3:4]
    depth_1 = world[:, 2]
    depth_2 = world @ rot[2] + trans[2]
    return depth_1, depth_2


def decompose_essential(essential: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> RelativePose:
    """Pick the (R, t) candidate that puts the most points in front of both cameras."""
    u, _, vt = np.linalg.svd(essential)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best, best_count = None, -1
    for rot in (u @ w @ vt, u @ w.T @ vt):
        for trans in (u[:, 2], -u[:, 2]):
            d1, d2 = triangulate(rot, trans, x1, x2)
            count = int(((d1 > 0) & (d2 > 0)).sum())
            if count > best_count:
                best, best_count = (rot, trans), count
    if best_count <= 0:
        raise NoPoseError("No pose candidate passes the cheirality check")
    return RelativePose(rotation=best[0], translation=best[1])


def to_camera(points: np.ndarray, intrinsics: np.ndarray) -> np.ndarray:
    homog = np.concatenate([points, np.ones((len(points), 1))], axis=1) @ np.linalg.inv(intrinsics).T
    return homog[:, :2] / homog[:, 2:3]


def estimate_pose(
    points_a: np.ndarray,
    points_b: np.ndarray,
    intrinsics_a: np.ndarray,
    intrinsics_b: np.ndarray,
    threshold: float = 1.0,
    iterations: int = 2000,
    seed: int = 0,
) -> RelativePose:
    """Fixed-iteration RANSAC over normalized 8-point essential matrices with Sampson inliers.

    ``threshold`` is in pixels and converted to normalized units with the mean focal length.
    """
    points_a = np.asarray(points_a, dtype=np.float64).reshape(-1, 2)
    points_b = np.asarray(points_b, dtype=np.float64).reshape(-1, 2)
    if len(points_a) < 8:
        raise NoPoseError(f"Pose estimation needs at least 8 matches, got {len(points_a)}")

    x1 = to_camera(points_a, intrinsics_a)
    x2 = to_camera(points_b, intrinsics_b)
    focal = np.mean([intrinsics_a[0, 0], intrinsics_a[1, 1], intrinsics_b[0, 0], intrinsics_b[1, 1]])
    thr_sq = (threshold / focal) ** 2

    rng = np.random.default_rng(seed)
    best_inliers = None
    for _ in range(iterations):
        sample = rng.choice(len(x1), size=8, replace=False)
        essential = fit_essential(x1[sample], x2[sample])
        if essential is None:
            continue
        inliers = sampson_distance(essential, x1, x2) < thr_sq
        if best_inliers is None or inliers.sum() > best_inliers.sum():
            best_inliers = inliers
            if inliers.all():
                break

    if best_inliers is None or best_inliers.sum() < 8:
        raise NoPoseError("RANSAC found no essential matrix with 8 or more inliers")

    essential = fit_essential(x1[best_inliers], x2[best_inliers])
    if essential is None:
        raise NoPoseError("Inlier set is degenerate")
    return decompose_essential(essential, x1[best_inliers], x2[best_inliers])


def epipolar_precision(
    points_a: np.ndarray,
    points_b: np.ndarray,
    intrinsics_a: np.ndarray,
    intrinsics_b: np.ndarray,
    pose: RelativePose,
    threshold: float = EPIPOLAR_THRESHOLD,
) -> float:
    """Fraction of matches whose symmetric epipolar distance (normalized coordinates) is below ``threshold``."""
    if len(points_a) == 0:
        return 0.0
    t = pose.translation
    skew = np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])
    essential = skew @ pose.rotation
    x1 = to_camera(np.asarray(points_a, dtype=np.float64), intrinsics_a)
    x2 = to_camera(np.asarray(points_b, dtype=np.float64), intrinsics_b)
    h1 = np.concatenate([x1, np.ones((len(x1), 1))], axis=1)
    h2 = np.concatenate([x2, np.ones((len(x2), 1))], axis=1)
    ex1 = h1 @ essential.T
    etx2 = h2 @ essential
    num = np.sum(h2 * ex1, axis=1) ** 2
    dist = num * (1.0 / (ex1[:, 0] ** 2 + ex1[:, 1] ** 2 + 1e-300) + 1.0 / (etx2[:, 0] ** 2 + etx2[:, 1] ** 2 + 1e-300))
    return float((dist < threshold).mean())


def mask_quality(kept: np.ndarray, matchable: np.ndarray) -> Tuple[float, float]:
    """(recall of matchable patches retained, IoU between the kept and matchable sets)."""
    kept = np.asarray(kept, dtype=bool).reshape(-1)
    matchable = np.asarray(matchable, dtype=bool).reshape(-1)
    recall = recall_score(matchable, kept, zero_division=1.0)
    iou = jaccard_score(matchable, kept, zero_division=1.0)
    return float(recall), float(iou)


def coarse_precision_recall(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    """Precision and recall of predicted (i, j) pairs against ground-truth pairs."""
    pred_set = {tuple(p) for p in np.asarray(pred, dtype=np.int64).reshape(-1, 2)}
    gt_set = {tuple(g) for g in np.asarray(gt, dtype=np.int64).reshape(-1, 2)}
    hits = len(pred_set & gt_set)
    precision = hits / len(pred_set) if pred_set else 0.0
    recall = hits / len(gt_set) if gt_set else 0.0
    return precision, recall


def scale_ratio(homography: np.ndarray, size: Sequence[int]) -> float:
    """max(s, 1/s) with s = sqrt(area of the warped image quad / image area)."""
    h, w = size
    corners = np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
    quad = apply_homography(homography, corners).astype(np.float32)
    area = abs(cv2.contourArea(quad))
    s = math.sqrt(area / float(h * w))
    if s <= 0:
        return math.inf
    return max(s, 1.0 / s)


def scale_bucket(ratios: Sequence[float]) -> pd.Series:
    return pd.cut(pd.Series(ratios, dtype=float), bins=list(SCALE_BINS), labels=list(SCALE_LABELS), right=False)
