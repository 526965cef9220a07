"""Ground-truth coarse correspondences and the three training losses."""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from config import COARSE_RATIO
from scalematch.errors import GeometryError

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-9

# Clamp and empty-set events, keyed by loss term
loss_warnings: Counter = Counter()


def _count_warning(key: str, message: str, amount: int = 1) -> None:
    if loss_warnings[key] == 0:
        logger.warning(message)
    loss_warnings[key] += amount


def _check_rotation(rot: np.ndarray, name: str) -> None:
    if rot.shape != (3, 3):
        raise GeometryError(f"{name} must be 3x3, got {rot.shape}")
    if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or not np.isclose(np.linalg.det(rot), 1.0, atol=1e-9):
        raise GeometryError(f"{name} is not a proper rotation matrix")


@dataclass
class GroundTruthGeometry:
    """Either a homography A->B, or per-image poses (X_cam = R X_world + t), depths and intrinsics."""

    homography: Optional[np.ndarray] = None
    homography_inv: Optional[np.ndarray] = None
    rotation_a: Optional[np.ndarray] = None
    translation_a: Optional[np.ndarray] = None
    rotation_b: Optional[np.ndarray] = None
    translation_b: Optional[np.ndarray] = None
    depth_a: Optional[np.ndarray] = None
    depth_b: Optional[np.ndarray] = None
    intrinsics_a: Optional[np.ndarray] = None
    intrinsics_b: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.homography is not None:
            self.homography = np.asarray(self.homography, dtype=np.float64).reshape(3, 3)
            det = np.linalg.det(self.homography)
            if not np.isfinite(det) or abs(det) < 1e-12:
                raise GeometryError("Homography is not invertible")
            if self.homography_inv is None:
                self.homography_inv = np.linalg.inv(self.homography)
            self.homography_inv = np.asarray(self.homography_inv, dtype=np.float64).reshape(3, 3)
            return

        required = (
            self.rotation_a, self.translation_a, self.rotation_b, self.translation_b,
            self.depth_a, self.depth_b, self.intrinsics_a, self.intrinsics_b,
        )
        if any(item is None for item in required):
            raise GeometryError("Geometry needs a homography or full pose, depth and intrinsics for both images")
        for name in ("rotation_a", "rotation_b", "intrinsics_a", "intrinsics_b"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3, 3))
        for name in ("translation_a", "translation_b"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        _check_rotation(self.rotation_a, "rotation_a")
        _check_rotation(self.rotation_b, "rotation_b")

    @property
    def is_homography(self) -> bool:
        return self.homography is not None

    def inverse(self) -> "GroundTruthGeometry":
        """The same geometry with the roles of A and B swapped."""
        if self.is_homography:
            return GroundTruthGeometry(homography=self.homography_inv, homography_inv=self.homography)
        return GroundTruthGeometry(
            rotation_a=self.rotation_b, translation_a=self.translation_b,
            rotation_b=self.rotation_a, translation_b=self.translation_a,
            depth_a=self.depth_b, depth_b=self.depth_a,
            intrinsics_a=self.intrinsics_b, intrinsics_b=self.intrinsics_a,
        )

    def relative_pose(self) -> Tuple[np.ndarray, np.ndarray]:
        """(R, t) taking camera-A coordinates to camera-B coordinates."""
        if self.is_homography:
            raise GeometryError("A homography does not define a relative pose")
        rot = self.rotation_b @ self.rotation_a.T
        trans = self.translation_b - rot @ self.translation_a
        return rot, trans

    def warp(self, points: np.ndarray, size_b: Sequence[int], depth_consistency: float = 0.2):
        """Map pixel points [K, 2] of A into B; returns (points_b, valid).

        A point is invalid when it lands outside B, behind the camera, on invalid depth, or
        (pose mode) fails the relative depth-consistency check against B's depth map.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        h_b, w_b = size_b
        homog = np.concatenate([points, np.ones((len(points), 1))], axis=1)

        if self.is_homography:
            proj = homog @ self.homography.T
            z = proj[:, 2]
            valid = z > 1e-12
            warped = proj[:, :2] / np.where(valid, z, 1.0)[:, None]
        else:
            depth_a = self.depth_a
            cols = np.round(points[:, 0]).astype(int)
            rows = np.round(points[:, 1]).astype(int)
            in_a = (cols >= 0) & (cols < depth_a.shape[1]) & (rows >= 0) & (rows < depth_a.shape[0])
            d = np.zeros(len(points))
            d[in_a] = depth_a[rows[in_a], cols[in_a]]
            valid = in_a & (d > 0)

            cam_a = (homog @ np.linalg.inv(self.intrinsics_a).T) * d[:, None]
            world = (cam_a - self.translation_a[None]) @ self.rotation_a
            cam_b = world @ self.rotation_b.T + self.translation_b[None]
            z = cam_b[:, 2]
            valid &= z > 1e-9
            proj = cam_b @ self.intrinsics_b.T
            warped = proj[:, :2] / np.where(valid, z, 1.0)[:, None]

        valid &= np.isfinite(warped).all(axis=1)
        valid &= (warped[:, 0] >= 0) & (warped[:, 0] < w_b) & (warped[:, 1] >= 0) & (warped[:, 1] < h_b)

        if not self.is_homography:
            depth_b = self.depth_b
            cols_b = np.clip(np.round(warped[:, 0]).astype(int), 0, depth_b.shape[1] - 1)
            rows_b = np.clip(np.round(warped[:, 1]).astype(int), 0, depth_b.shape[0] - 1)
            target = depth_b[rows_b, cols_b]
            consistent = (target > 0) & (np.abs(z - target) <= depth_consistency * np.where(target > 0, target, 1.0))
            valid &= consistent

        return warped, valid


@dataclass
class SupervisionLabels:
    """Coarse GT matches (i, j), matchable flags per image and continuous fine targets in B."""

    matches: np.ndarray  # [K, 2] int64
    matchable_a: np.ndarray  # [N_a] bool
    matchable_b: np.ndarray  # [N_b] bool
    targets_b: np.ndarray  # [K, 2] pixel (x, y) of the warped A cell centers

    @property
    def unmatchable_a(self) -> np.ndarray:
        return ~self.matchable_a

    @property
    def unmatchable_b(self) -> np.ndarray:
        return ~self.matchable_b


def cell_centers(grid_h: int, grid_w: int, ratio: int = COARSE_RATIO) -> np.ndarray:
    """Pixel (x, y) centers of a row-major coarse grid; cell (r, c) -> (ratio*c + ratio/2, ...)."""
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    half = ratio // 2
    return np.stack([cols.reshape(-1) * ratio + half, rows.reshape(-1) * ratio + half], axis=1).astype(np.float64)


def _nearest_cells(points: np.ndarray, valid: np.ndarray, grid_w: int, ratio: int) -> np.ndarray:
    cells = np.full(len(points), -1, dtype=np.int64)
    cols = np.floor(points[valid, 0] / ratio).astype(np.int64)
    rows = np.floor(points[valid, 1] / ratio).astype(np.int64)
    cells[valid] = rows * grid_w + cols
    return cells


def ground_truth_coarse(
    geometry: GroundTruthGeometry,
    size_a: Sequence[int],
    size_b: Sequence[int],
    ratio: int = COARSE_RATIO,
    depth_consistency: float = 0.2,
) -> SupervisionLabels:
    """Project coarse cell centers both ways, snap to the nearest cell and keep mutual pairs."""
    grid_a = (size_a[0] // ratio, size_a[1] // ratio)
    grid_b = (size_b[0] // ratio, size_b[1] // ratio)
    centers_a = cell_centers(*grid_a, ratio=ratio)
    centers_b = cell_centers(*grid_b, ratio=ratio)

    warped_ab, valid_ab = geometry.warp(centers_a, size_b, depth_consistency)
    warped_ba, valid_ba = geometry.inverse().warp(centers_b, size_a, depth_consistency)
    nn_ab = _nearest_cells(warped_ab, valid_ab, grid_b[1], ratio)
    nn_ba = _nearest_cells(warped_ba, valid_ba, grid_a[1], ratio)

    i_ids = np.nonzero(nn_ab >= 0)[0]
    j_ids = nn_ab[i_ids]
    mutual = nn_ba[j_ids] == i_ids
    i_ids, j_ids = i_ids[mutual], j_ids[mutual]

    matchable_a = np.zeros(len(centers_a), dtype=bool)
    matchable_b = np.zeros(len(centers_b), dtype=bool)
    matchable_a[i_ids] = True
    matchable_b[j_ids] = True

    return SupervisionLabels(
        matches=np.stack([i_ids, j_ids], axis=1).astype(np.int64).reshape(-1, 2),
        matchable_a=matchable_a,
        matchable_b=matchable_b,
        targets_b=warped_ab[i_ids].reshape(-1, 2),
    )


def coarse_loss(conf: torch.Tensor, b_ids: torch.Tensor, i_ids: torch.Tensor, j_ids: torch.Tensor) -> torch.Tensor:
    """Mean negative log of the assignment at ground-truth matches."""
    if conf.dim() == 2:
        conf = conf.unsqueeze(0)
    if i_ids.numel() == 0:
        _count_warning("coarse_empty", "No ground-truth coarse matches; coarse loss set to 0")
        return conf.sum() * 0.0
    values = conf[b_ids, i_ids, j_ids]
    clamped = int((values < PROB_CLAMP).sum())
    if clamped:
        _count_warning("coarse_clamp", "Coarse probabilities clamped at 1e-9", clamped)
    return -torch.log(values.clamp_min(PROB_CLAMP)).mean()


def fine_loss(pred_offsets: torch.Tensor, target_offsets: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Mean L2 error of refined positions weighted by 1/phi^2 (phi held constant)."""
    if pred_offsets.shape[0] == 0:
        _count_warning("fine_empty", "No refined matches with targets; fine loss set to 0")
        return pred_offsets.sum() * 0.0
    weight = 1.0 / phi.detach().pow(2)
    dist = torch.linalg.vector_norm(pred_offsets - target_offsets, dim=-1)
    return (weight * dist).mean()


def _pruning_term(sigma: torch.Tensor, matchable: torch.Tensor) -> torch.Tensor:
    """NLL of one layer's scores for one image, averaged over batch items [B, N]."""
    sigma = sigma.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = matchable.bool()
    neg = ~pos
    n_pos = pos.sum(dim=-1)
    n_neg = neg.sum(dim=-1)

    log_pos = (torch.log(sigma) * pos).sum(dim=-1) / n_pos.clamp_min(1)
    log_neg = (torch.log(1.0 - sigma) * neg).sum(dim=-1) / n_neg.clamp_min(1)
    if (n_pos == 0).any():
        _count_warning("pruning_empty_matchable", "Image without matchable patches; term omitted")
    if (n_neg == 0).any():
        _count_warning("pruning_empty_unmatchable", "Image without unmatchable patches; term omitted")
    return -(log_pos + log_neg).mean()


def pruning_loss(
    scores_a: List[torch.Tensor],
    scores_b: List[torch.Tensor],
    matchable_a: torch.Tensor,
    matchable_b: torch.Tensor,
) -> torch.Tensor:
    """Average over scored layers of the mean of the A and B relevance NLL terms."""
    if not scores_a:
        return matchable_a.new_zeros((), dtype=torch.float32)
    terms = [
        (_pruning_term(sa, matchable_a) + _pruning_term(sb, matchable_b)) / 2.0
        for sa, sb in zip(scores_a, scores_b)
    ]
    return torch.stack(terms).mean()


@dataclass
class LossBundle:
    coarse: torch.Tensor
    fine: torch.Tensor
    pruning: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "loss_coarse": float(self.coarse.detach()),
            "loss_fine": float(self.fine.detach()),
            "loss_pruning": float(self.pruning.detach()),
            "loss": float(self.total.detach()),
        }


def total_loss(
    l_coarse: torch.Tensor,
    l_fine: torch.Tensor,
    l_pruning: torch.Tensor,
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> LossBundle:
    """L = L_c + L_f + L_p (unit weights unless configured otherwise)."""
    w_c, w_f, w_p = weights
    total = w_c * l_coarse + w_f * l_fine + w_p * l_pruning
    return LossBundle(coarse=l_coarse, fine=l_fine, pruning=l_pruning, total=total)
