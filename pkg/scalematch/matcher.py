"""Coarse matching by weighted dual-softmax + MNN, and sub-pixel refinement on fine maps."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
import torch

from config import COARSE_RATIO, FINE_RATIO

logger = logging.getLogger(__name__)

# Fine-map cells per coarse cell along one axis
FINE_PER_COARSE = COARSE_RATIO // FINE_RATIO


@dataclass
class CoarseMatches:
    b_ids: torch.Tensor
    i_ids: torch.Tensor
    j_ids: torch.Tensor
    conf: torch.Tensor

    def __len__(self) -> int:
        return int(self.i_ids.numel())


@dataclass
class FineMatches:
    """Refined matches: pixel points in both images plus window offsets and spread phi."""

    b_ids: torch.Tensor
    i_ids: torch.Tensor
    j_ids: torch.Tensor
    points_a: torch.Tensor  # [K, 2] (x, y) pixels
    points_b: torch.Tensor  # [K, 2] (x, y) pixels, sub-pixel
    offsets: torch.Tensor  # [K, 2] expected offset inside the B window, fine-map units
    conf: torch.Tensor
    phi: torch.Tensor  # [K] sqrt of the heatmap total variance
    dropped: int = 0

    def __len__(self) -> int:
        return int(self.i_ids.numel())


def similarity(feat_a: torch.Tensor, feat_b: torch.Tensor, scale: float) -> torch.Tensor:
    """S(i, j) = scale * <F_A(i), F_B(j)> for tokens [..., M, C] and [..., N, C]."""
    return torch.einsum("...mc,...nc->...mn", feat_a, feat_b) * scale


def weighted_dual_softmax(sim: torch.Tensor, sigma_a: torch.Tensor, sigma_b: torch.Tensor) -> torch.Tensor:
    """P(i, j) = sigma_A(i) sigma_B(j) softmax(S(i, .))_j softmax(S(., j))_i."""
    row = torch.softmax(sim, dim=-1)
    col = torch.softmax(sim, dim=-2)
    return row * col * sigma_a[..., :, None] * sigma_b[..., None, :]


def select_coarse(
    conf: torch.Tensor,
    theta_c: float,
    mask_a: torch.Tensor = None,
    mask_b: torch.Tensor = None,
) -> CoarseMatches:
    """Mutual-nearest-neighbor matches of a [B, M, N] assignment above ``theta_c``.

    Row and column maxima are taken over the full matrix; pruned rows and columns are then
    excluded from the result.
    """
    if conf.dim() == 2:
        conf = conf.unsqueeze(0)
    bsz, m, n = conf.shape
    row_best = conf.argmax(dim=2)  # [B, M]
    col_best = conf.argmax(dim=1)  # [B, N]

    i_all = torch.arange(m, device=conf.device).expand(bsz, m)
    mutual = torch.gather(col_best, 1, row_best) == i_all
    best_val = torch.gather(conf, 2, row_best.unsqueeze(-1)).squeeze(-1)
    keep = mutual & (best_val > theta_c)

    if mask_a is not None:
        keep &= mask_a.view(bsz, m).bool()
    if mask_b is not None:
        keep &= torch.gather(mask_b.view(bsz, n).bool(), 1, row_best)

    b_ids, i_ids = keep.nonzero(as_tuple=True)
    j_ids = row_best[b_ids, i_ids]
    return CoarseMatches(b_ids=b_ids, i_ids=i_ids, j_ids=j_ids, conf=conf[b_ids, i_ids, j_ids])


def coarse_to_pixels(ids: torch.Tensor, grid_w: int) -> torch.Tensor:
    """Pixel position (x, y) of coarse cells given by flat indices; cell (r, c) -> (8c+4, 8r+4)."""
    rows = torch.div(ids, grid_w, rounding_mode="floor")
    cols = ids % grid_w
    half = COARSE_RATIO // 2
    return torch.stack([cols * COARSE_RATIO + half, rows * COARSE_RATIO + half], dim=-1)


def fine_anchor(ids: torch.Tensor, grid_w: int) -> torch.Tensor:
    """Integer fine-map location (x, y) of the coarse cell centers."""
    return torch.div(coarse_to_pixels(ids, grid_w), FINE_RATIO, rounding_mode="floor")


def window_offsets(window: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Row-major (dx, dy) offsets of a window x window patch centered at 0."""
    radius = window // 2
    r = torch.arange(-radius, radius + 1, device=device, dtype=dtype)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([dx.reshape(-1), dy.reshape(-1)], dim=-1)


def expectation(heatmap: torch.Tensor, window: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Expected offset [K, 2] and total variance [K] of heatmaps [K, window*window]."""
    grid = window_offsets(window, device=heatmap.device, dtype=heatmap.dtype)
    mean = heatmap @ grid
    var = (heatmap[..., None] * (grid[None] - mean[:, None]) ** 2).sum(dim=(-1, -2))
    return mean, var


def refine(
    coarse: CoarseMatches,
    fine_a: torch.Tensor,
    fine_b: torch.Tensor,
    grid_w_a: int,
    grid_w_b: int,
    window: int = 5,
) -> FineMatches:
    """Correlate each A center vector against a window of B; the softmax expectation gives p_B.

    Matches whose B window would leave the fine map are dropped and counted.
    """
    radius = window // 2
    _, channels, fh_b, fw_b = fine_b.shape

    anchor_a = fine_anchor(coarse.i_ids, grid_w_a)
    anchor_b = fine_anchor(coarse.j_ids, grid_w_b)
    inside = (
        (anchor_b[:, 0] - radius >= 0)
        & (anchor_b[:, 0] + radius <= fw_b - 1)
        & (anchor_b[:, 1] - radius >= 0)
        & (anchor_b[:, 1] + radius <= fh_b - 1)
    )
    dropped = int((~inside).sum())
    if dropped:
        logger.debug("Dropped %d matches whose refinement window leaves the fine map", dropped)

    b_ids, i_ids, j_ids = coarse.b_ids[inside], coarse.i_ids[inside], coarse.j_ids[inside]
    anchor_a, anchor_b, conf = anchor_a[inside], anchor_b[inside], coarse.conf[inside]

    center_a = fine_a[b_ids, :, anchor_a[:, 1], anchor_a[:, 0]]  # [K, C]
    offs = window_offsets(window, device=fine_b.device, dtype=torch.long)
    xs = anchor_b[:, None, 0] + offs[None, :, 0]
    ys = anchor_b[:, None, 1] + offs[None, :, 1]
    window_b = fine_b[b_ids[:, None], :, ys, xs]  # [K, w*w, C]

    corr = torch.einsum("kc,kwc->kw", center_a, window_b) / math.sqrt(channels)
    heatmap = torch.softmax(corr, dim=-1)
    offsets, var = expectation(heatmap, window)
    phi = var.clamp_min(1e-10).sqrt()

    points_a = (anchor_a * FINE_RATIO).to(fine_b.dtype)
    points_b = (anchor_b.to(fine_b.dtype) + offsets) * FINE_RATIO
    return FineMatches(
        b_ids=b_ids, i_ids=i_ids, j_ids=j_ids,
        points_a=points_a, points_b=points_b, offsets=offsets,
        conf=conf, phi=phi, dropped=dropped,
    )


def write_matches(path: str, points_a: np.ndarray, points_b: np.ndarray, conf: np.ndarray) -> None:
    """One match per line: ``x_A y_A x_B y_B confidence`` with 6 significant digits."""
    lines = [
        f"{xa:.6g} {ya:.6g} {xb:.6g} {yb:.6g} {c:.6g}"
        for (xa, ya), (xb, yb), c in zip(np.asarray(points_a), np.asarray(points_b), np.asarray(conf))
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_matches(path: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    data = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    return data[:, 0:2], data[:, 2:4], data[:, 4]


def scale_points(points: np.ndarray, scale_xy: Sequence[float]) -> np.ndarray:
    """Map points from network resolution back to original image pixels."""
    return np.asarray(points, dtype=np.float64) * np.asarray(scale_xy, dtype=np.float64)[None, :]
