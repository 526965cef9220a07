"""End-to-end matcher: backbone -> MPM stack -> weighted dual-softmax -> MNN -> refinement."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from config import MatchConfig
from scalematch.backbone import ResNetFPN, extract_features
from scalematch.checkpoint import checkpoint_manager
from scalematch.matcher import FineMatches, refine, select_coarse, similarity, weighted_dual_softmax
from scalematch.mpm import MpmOutput, MultiScalePruningModule
from scalematch.rope import sine_position_encoding

logger = logging.getLogger(__name__)


@dataclass
class MatcherOutput:
    conf: torch.Tensor  # [B, M, N] assignment P
    mpm: MpmOutput
    fine_a: torch.Tensor
    fine_b: torch.Tensor
    grid_a: Tuple[int, int]
    grid_b: Tuple[int, int]
    sigma_a: torch.Tensor
    sigma_b: torch.Tensor


class PruningMatcher(nn.Module):
    def __init__(self, config: MatchConfig):
        super().__init__()
        self.config = config
        self.backbone = ResNetFPN(
            c_coarse=config.c_coarse,
            c_fine=config.c_fine,
            blocks_per_stage=config.blocks_per_stage,
            in_channels=1 if config.grayscale else 3,
        )
        self.mpm = MultiScalePruningModule(
            config.c_coarse,
            heads=config.heads,
            num_layers=config.mpm_layers,
            theta_p=config.theta_p,
            pos_encoding=config.pos_encoding,
            attention=config.attention,
            pruning=config.pruning,
            pruning_score=config.pruning_score,
        )

    def _tokens(self, coarse: torch.Tensor) -> torch.Tensor:
        if self.config.pos_encoding == "absolute":
            h, w = coarse.shape[-2:]
            coarse = coarse + sine_position_encoding(coarse.shape[1], h, w, coarse.device, coarse.dtype)[None]
        return rearrange(coarse, "b c h w -> b (h w) c")

    def forward(self, image_a: torch.Tensor, image_b: torch.Tensor, theta_p: Optional[float] = None) -> MatcherOutput:
        if image_a.dim() == 3:
            image_a, image_b = image_a[None], image_b[None]
        feats_a = extract_features(image_a, self.backbone)
        feats_b = extract_features(image_b, self.backbone)
        grid_a = tuple(feats_a.coarse.shape[-2:])
        grid_b = tuple(feats_b.coarse.shape[-2:])

        mpm_out = self.mpm(self._tokens(feats_a.coarse), self._tokens(feats_b.coarse), grid_a, grid_b, theta_p)

        sim = similarity(
            F.normalize(mpm_out.feat_a, dim=-1), F.normalize(mpm_out.feat_b, dim=-1), 1.0 / self.config.tau
        )
        sigma_a, sigma_b = mpm_out.final_scores()
        if self.config.detach_sigma:
            sigma_a, sigma_b = sigma_a.detach(), sigma_b.detach()
        if not self.config.weighted_softmax:
            sigma_a, sigma_b = torch.ones_like(sigma_a), torch.ones_like(sigma_b)
        conf = weighted_dual_softmax(sim, sigma_a, sigma_b)

        return MatcherOutput(
            conf=conf, mpm=mpm_out, fine_a=feats_a.fine, fine_b=feats_b.fine,
            grid_a=grid_a, grid_b=grid_b, sigma_a=sigma_a, sigma_b=sigma_b,
        )

    @torch.no_grad()
    def match(
        self,
        image_a: torch.Tensor,
        image_b: torch.Tensor,
        theta_c: Optional[float] = None,
        theta_p: Optional[float] = None,
    ) -> Tuple[FineMatches, MatcherOutput]:
        """Pixel matches (in network resolution) plus the raw forward output."""
        out = self.forward(image_a, image_b, theta_p=theta_p)
        theta_c = self.config.theta_c if theta_c is None else theta_c
        coarse = select_coarse(out.conf, theta_c, out.mpm.final_mask_a, out.mpm.final_mask_b)
        fine = refine(coarse, out.fine_a, out.fine_b, out.grid_a[1], out.grid_b[1], self.config.refine_window)
        logger.debug("%d coarse matches, %d after refinement", len(coarse), len(fine))
        return fine, out

    @classmethod
    def from_checkpoint(cls, path: str, device: str = "cpu") -> "PruningMatcher":
        manifest, _ = checkpoint_manager.read(path)
        config = MatchConfig.from_dict(manifest.get("config", {}), apply_env=False)
        model = cls(config)
        checkpoint_manager.load_into(path, model)
        return model.to(device).eval()
