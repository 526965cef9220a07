"""Multi-scale pruning module: stacked self/cross SADPA with relevance-driven patch pruning."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from scalematch.errors import DegeneratePruningError
from scalematch.sadpa import SADPA

logger = logging.getLogger(__name__)

SCORE_EPS = 1e-6


class NmiEstimator(nn.Module):
    """Per-patch relevance score sigma in (0, 1): affine, ReLU, affine, sigmoid."""

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 1))

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(feat)).squeeze(-1)


def estimate_nmi(feat: torch.Tensor, estimator: NmiEstimator) -> torch.Tensor:
    return estimator(feat)


def cosine_relevance(feat: torch.Tensor, other: torch.Tensor, other_mask: torch.Tensor) -> torch.Tensor:
    """Parameter-free relevance: best cosine similarity to any unpruned patch of the other image."""
    sim = torch.einsum("bnc,bmc->bnm", F.normalize(feat, dim=-1), F.normalize(other, dim=-1))
    sim = sim.masked_fill(~other_mask.bool()[:, None, :], -1.0)
    best = sim.max(dim=-1).values
    return ((1.0 + best) / 2.0).clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def update_mask(sigma: torch.Tensor, theta_p: float, prev_mask: torch.Tensor) -> torch.Tensor:
    """Cumulative pruning: a patch survives only if it survived before and sigma >= theta_p."""
    return prev_mask.bool() & (sigma >= theta_p)


@dataclass
class MpmLayerOutput:
    feat_a: torch.Tensor
    feat_b: torch.Tensor
    mask_a: torch.Tensor
    mask_b: torch.Tensor
    sigma_a: Optional[torch.Tensor] = None
    sigma_b: Optional[torch.Tensor] = None


@dataclass
class MpmOutput:
    """Final features plus the per-layer history of masks (M_0..M_L) and scores."""

    feat_a: torch.Tensor
    feat_b: torch.Tensor
    masks_a: List[torch.Tensor] = field(default_factory=list)
    masks_b: List[torch.Tensor] = field(default_factory=list)
    scores_a: List[torch.Tensor] = field(default_factory=list)
    scores_b: List[torch.Tensor] = field(default_factory=list)

    @property
    def final_mask_a(self) -> torch.Tensor:
        return self.masks_a[-1]

    @property
    def final_mask_b(self) -> torch.Tensor:
        return self.masks_b[-1]

    def final_scores(self):
        """sigma_L for both images; all ones when no layer estimates relevance."""
        if not self.scores_a:
            ones_a = torch.ones(self.feat_a.shape[:2], dtype=self.feat_a.dtype, device=self.feat_a.device)
            ones_b = torch.ones(self.feat_b.shape[:2], dtype=self.feat_b.dtype, device=self.feat_b.device)
            return ones_a, ones_b
        return self.scores_a[-1], self.scores_b[-1]


class MpmLayer(nn.Module):
    def __init__(
        self,
        dim: int,
        heads: int = 4,
        use_rope: bool = True,
        attention: str = "sadpa",
        estimate: bool = True,
        pruning_score: str = "nmi",
    ):
        super().__init__()
        self.self_attn = SADPA(dim, heads, use_rope=use_rope, attention=attention)
        self.cross_attn = SADPA(dim, heads, use_rope=False, attention=attention)
        self.estimate = estimate
        self.pruning_score = pruning_score
        self.estimator = NmiEstimator(dim) if estimate and pruning_score == "nmi" else None

    def score(self, feat: torch.Tensor, other: torch.Tensor, other_mask: torch.Tensor) -> torch.Tensor:
        if self.pruning_score == "cosine":
            return cosine_relevance(feat, other, other_mask)
        return estimate_nmi(feat, self.estimator)

    def forward(
        self,
        feat_a: torch.Tensor,
        feat_b: torch.Tensor,
        mask_a: torch.Tensor,
        mask_b: torch.Tensor,
        hw_a: Sequence[int],
        hw_b: Sequence[int],
        theta_p: float,
    ) -> MpmLayerOutput:
        feat_a = self.self_attn(feat_a, feat_a, mask_a, mask_a, hw_a, hw_a)
        feat_b = self.self_attn(feat_b, feat_b, mask_b, mask_b, hw_b, hw_b)

        # Both directions read the post-self features before either is overwritten
        cross_a = self.cross_attn(feat_a, feat_b, mask_a, mask_b, hw_a, hw_b)
        cross_b = self.cross_attn(feat_b, feat_a, mask_b, mask_a, hw_b, hw_a)

        if not self.estimate:
            return MpmLayerOutput(cross_a, cross_b, mask_a.bool(), mask_b.bool())

        sigma_a = self.score(cross_a, cross_b, mask_b)
        sigma_b = self.score(cross_b, cross_a, mask_a)
        new_mask_a = update_mask(sigma_a, theta_p, mask_a)
        new_mask_b = update_mask(sigma_b, theta_p, mask_b)

        for name, mask in (("A", new_mask_a), ("B", new_mask_b)):
            if (~mask.any(dim=-1)).any():
                raise DegeneratePruningError(f"Pruning removed every patch of image {name}")

        return MpmLayerOutput(cross_a, cross_b, new_mask_a, new_mask_b, sigma_a, sigma_b)


class MultiScalePruningModule(nn.Module):
    """L stacked MPM layers.

    ``pruning`` = "gradual" estimates relevance and prunes after every layer, "last" only after
    the final layer, "none" never (sigma treated as 1).
    """

    def __init__(
        self,
        dim: int,
        heads: int = 4,
        num_layers: int = 4,
        theta_p: float = 0.05,
        pos_encoding: str = "rope",
        attention: str = "sadpa",
        pruning: str = "gradual",
        pruning_score: str = "nmi",
    ):
        super().__init__()
        self.theta_p = theta_p
        self.pruning = pruning
        layers = []
        for idx in range(num_layers):
            if pruning == "gradual":
                estimate = True
            elif pruning == "last":
                estimate = idx == num_layers - 1
            else:
                estimate = False
            layers.append(
                MpmLayer(
                    dim,
                    heads,
                    use_rope=pos_encoding == "rope",
                    attention=attention,
                    estimate=estimate,
                    pruning_score=pruning_score,
                )
            )
        self.layers = nn.ModuleList(layers)

    def forward(
        self,
        feat_a: torch.Tensor,
        feat_b: torch.Tensor,
        hw_a: Sequence[int],
        hw_b: Sequence[int],
        theta_p: Optional[float] = None,
    ) -> MpmOutput:
        """Run the stack on coarse tokens [B, N, C]; M_0 is all ones."""
        theta_p = self.theta_p if theta_p is None else theta_p
        mask_a = torch.ones(feat_a.shape[:2], dtype=torch.bool, device=feat_a.device)
        mask_b = torch.ones(feat_b.shape[:2], dtype=torch.bool, device=feat_b.device)
        out = MpmOutput(feat_a, feat_b, masks_a=[mask_a], masks_b=[mask_b])

        for layer in self.layers:
            res = layer(feat_a, feat_b, mask_a, mask_b, hw_a, hw_b, theta_p)
            feat_a, feat_b, mask_a, mask_b = res.feat_a, res.feat_b, res.mask_a, res.mask_b
            out.masks_a.append(mask_a)
            out.masks_b.append(mask_b)
            if res.sigma_a is not None:
                out.scores_a.append(res.sigma_a)
                out.scores_b.append(res.sigma_b)

        out.feat_a, out.feat_b = feat_a, feat_b
        logger.debug(
            "MPM kept %d/%d patches in A and %d/%d in B",
            int(mask_a.sum()), mask_a.numel(), int(mask_b.sum()), mask_b.numel(),
        )
        return out
