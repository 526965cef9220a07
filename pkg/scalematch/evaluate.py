"""Homography and relative-pose evaluation over a dataset, plus the text/PNG report."""

import logging
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from config import IMAGE_DIVISOR
from scalematch.errors import DegeneratePruningError, GeometryError, NoPoseError
from scalematch.matcher import FineMatches, scale_points
from scalematch.metrics import (
    SCALE_LABELS,
    ErrorCurve,
    RelativePose,
    corner_error,
    epipolar_precision,
    estimate_homography,
    estimate_pose,
    mask_quality,
    pose_error,
    scale_bucket,
    scale_ratio,
)
from scalematch.model import PruningMatcher
from scalematch.supervision import GroundTruthGeometry, ground_truth_coarse
from scalematch.synthetic import ImagePair

logger = logging.getLogger(__name__)


def fit_to_network(image: torch.Tensor) -> Tuple[torch.Tensor, np.ndarray]:
    """Resize [3, H, W] so both sides are multiples of 32; returns the image and the (sx, sy) back-scale."""
    h, w = image.shape[-2:]
    new_h = max(IMAGE_DIVISOR, (h // IMAGE_DIVISOR) * IMAGE_DIVISOR)
    new_w = max(IMAGE_DIVISOR, (w // IMAGE_DIVISOR) * IMAGE_DIVISOR)
    if (new_h, new_w) == (h, w):
        return image, np.ones(2)
    resized = F.interpolate(image[None], size=(new_h, new_w), mode="bilinear", align_corners=False)[0]
    return resized, np.array([w / new_w, h / new_h])


def match_pair(
    model: PruningMatcher,
    pair: ImagePair,
    theta_c: Optional[float] = None,
    theta_p: Optional[float] = None,
    device: str = "cpu",
):
    """Match a pair at network resolution; points are returned in original pixels."""
    image_a, back_a = fit_to_network(pair.image_a)
    image_b, back_b = fit_to_network(pair.image_b)
    fine, out = model.match(image_a.to(device), image_b.to(device), theta_c=theta_c, theta_p=theta_p)
    points_a = scale_points(fine.points_a.cpu().numpy(), back_a)
    points_b = scale_points(fine.points_b.cpu().numpy(), back_b)
    return points_a, points_b, fine, out


def _scaled_homography(homography: np.ndarray, back_a: np.ndarray, back_b: np.ndarray) -> np.ndarray:
    to_orig_a = np.diag([back_a[0], back_a[1], 1.0])
    to_net_b = np.diag([1.0 / back_b[0], 1.0 / back_b[1], 1.0])
    return to_net_b @ homography @ to_orig_a


def evaluate_homography(
    model: PruningMatcher,
    pairs: Iterable[Tuple[ImagePair, GroundTruthGeometry]],
    ransac_threshold: float = 3.0,
    device: str = "cpu",
) -> pd.DataFrame:
    """One row per pair: corner error, scale ratio and bucket, mask recall/IoU, match count."""
    rows = []
    for pair, geometry in tqdm(pairs, desc="eval-homography"):
        if not geometry.is_homography:
            logger.warning("Skipping %s: no homography ground truth", pair.name)
            continue
        try:
            points_a, points_b, fine, out = match_pair(model, pair, device=device)
        except DegeneratePruningError as e:
            logger.warning("Matching aborted for %s: %s", pair.name, e)
            rows.append({
                "pair": pair.name,
                "corner_error": np.inf,
                "scale_ratio": scale_ratio(geometry.homography, pair.size_a),
                "mask_recall": 0.0,
                "mask_iou": 0.0,
                "num_matches": 0,
            })
            continue
        estimate = estimate_homography(points_a, points_b, ransac_threshold)
        error = np.inf
        if estimate is not None:
            try:
                error = corner_error(estimate, geometry.homography, pair.size_a)
            except GeometryError:
                error = np.inf

        _, back_a = fit_to_network(pair.image_a)
        _, back_b = fit_to_network(pair.image_b)
        net_geometry = GroundTruthGeometry(homography=_scaled_homography(geometry.homography, back_a, back_b))
        size_a = tuple(int(round(s / b)) for s, b in zip(pair.size_a, back_a[::-1]))
        size_b = tuple(int(round(s / b)) for s, b in zip(pair.size_b, back_b[::-1]))
        labels = ground_truth_coarse(net_geometry, size_a, size_b)
        recall, iou = mask_quality(out.mpm.final_mask_a[0].cpu().numpy(), labels.matchable_a)

        rows.append({
            "pair": pair.name,
            "corner_error": error,
            "scale_ratio": scale_ratio(geometry.homography, pair.size_a),
            "mask_recall": recall,
            "mask_iou": iou,
            "num_matches": len(fine),
        })
    table = pd.DataFrame(rows, columns=["pair", "corner_error", "scale_ratio", "mask_recall", "mask_iou", "num_matches"])
    table["scale_bucket"] = scale_bucket(table["scale_ratio"]) if len(table) else pd.Series(dtype="category")
    return table


def read_pose_file(path: str) -> Dict[str, RelativePose]:
    """Precomputed poses: ``name r11 .. r33 t1 t2 t3`` per line."""
    poses = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 13:
            raise ValueError(f"{path}: expected a name and 12 numbers, got {line!r}")
        values = np.asarray([float(v) for v in parts[1:]])
        poses[parts[0]] = RelativePose(rotation=values[:9].reshape(3, 3), translation=values[9:])
    return poses


def evaluate_pose(
    model: Optional[PruningMatcher],
    pairs: Iterable[Tuple[ImagePair, GroundTruthGeometry]],
    ransac_threshold: float = 1.0,
    ransac_iters: int = 2000,
    seed: int = 0,
    poses: Optional[Dict[str, RelativePose]] = None,
    device: str = "cpu",
) -> pd.DataFrame:
    """One row per pose pair: angular pose error and epipolar precision (failures count as 180 degrees)."""
    rows = []
    for pair, geometry in tqdm(pairs, desc="eval-pose"):
        if geometry.is_homography:
            logger.warning("Skipping %s: pose evaluation needs pose and depth ground truth", pair.name)
            continue
        gt = RelativePose(*geometry.relative_pose())
        precision = np.nan
        num_matches = 0
        if poses is not None:
            est = poses.get(pair.name)
        else:
            try:
                points_a, points_b, fine, _ = match_pair(model, pair, device=device)
                num_matches = len(fine)
                precision = epipolar_precision(points_a, points_b, geometry.intrinsics_a, geometry.intrinsics_b, gt)
                est = estimate_pose(
                    points_a, points_b, geometry.intrinsics_a, geometry.intrinsics_b,
                    threshold=ransac_threshold, iterations=ransac_iters, seed=seed,
                )
            except DegeneratePruningError as e:
                logger.warning("Matching aborted for %s: %s", pair.name, e)
                est = None
            except NoPoseError as e:
                logger.info("No pose for %s: %s", pair.name, e)
                est = None
        error = pose_error(est, gt) if est is not None else 180.0
        rows.append({"pair": pair.name, "pose_error": error, "epipolar_precision": precision, "num_matches": num_matches})
    return pd.DataFrame(rows, columns=["pair", "pose_error", "epipolar_precision", "num_matches"])


def auc_table(errors: Sequence[float], thresholds: Sequence[float], scale_buckets: Optional[pd.Series] = None) -> pd.DataFrame:
    """AUC per threshold overall and, if buckets are given, per scale bucket."""
    groups = [("all", np.asarray(errors, dtype=np.float64))]
    if scale_buckets is not None:
        errors = pd.Series(np.asarray(errors, dtype=np.float64))
        for label in SCALE_LABELS:
            subset = errors[(scale_buckets == label).to_numpy()]
            if len(subset):
                groups.append((label, subset.to_numpy()))

    rows = []
    for name, values in groups:
        curve = ErrorCurve(values, thresholds)
        rows.append({"subset": name, "pairs": len(values), **{f"AUC@{t:g}": a for t, a in curve.aucs().items()}})
    return pd.DataFrame(rows)


def write_report(path: str, table: pd.DataFrame, errors: Sequence[float], thresholds: Sequence[float], unit: str,
                 extra: Optional[Dict[str, float]] = None) -> Path:
    """Plain-text AUC table next to a cumulative error curve image (same stem, .png)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [table.to_string(index=False, float_format=lambda v: f"{v:.4f}")]
    for key, value in (extra or {}).items():
        lines.append(f"{key}: {value:.4f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    curve = ErrorCurve(errors, thresholds).cumulative()
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(curve["threshold"], curve["fraction"])
    for t in thresholds:
        ax.axvline(t, color="gray", linestyle=":", linewidth=0.8)
    ax.set_xlabel(f"error ({unit})")
    ax.set_ylabel("fraction of pairs")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    image_path = path.with_suffix(".png")
    fig.savefig(image_path, dpi=120)
    plt.close(fig)

    csv_path = path.with_suffix(".csv")
    pd.DataFrame({"error": np.asarray(errors, dtype=np.float64)}).to_csv(csv_path, index=False)
    return image_path
