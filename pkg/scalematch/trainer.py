"""Training loop over total_loss with seeded data order, metrics.csv logging and periodic checkpoints."""

import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from config import MatchConfig
from scalematch.checkpoint import save_checkpoint
from scalematch.errors import DatasetError, DegeneratePruningError, NonFiniteLossError
from scalematch.matcher import CoarseMatches, fine_anchor, refine
from scalematch.model import PruningMatcher, MatcherOutput
from scalematch.supervision import (
    GroundTruthGeometry,
    LossBundle,
    SupervisionLabels,
    coarse_loss,
    fine_loss,
    ground_truth_coarse,
    pruning_loss,
    total_loss,
)
from scalematch.synthetic import ImagePair, SyntheticPairSpec, generate_pair

logger = logging.getLogger(__name__)


@dataclass
class TrainingSample:
    pair: ImagePair
    geometry: GroundTruthGeometry
    labels: SupervisionLabels


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def synthetic_pairs(config: MatchConfig, count: Optional[int] = None) -> List[Tuple[ImagePair, GroundTruthGeometry]]:
    """``count`` seeded synthetic pairs; pair k uses seed ``config.seed + k``."""
    count = config.num_pairs if count is None else count
    return [generate_pair(SyntheticPairSpec.from_config(config, seed=config.seed + k)) for k in range(count)]


def prepare_samples(pairs: Sequence[Tuple[ImagePair, GroundTruthGeometry]], config: MatchConfig) -> List[TrainingSample]:
    samples = []
    for pair, geometry in pairs:
        labels = ground_truth_coarse(geometry, pair.size_a, pair.size_b, depth_consistency=config.depth_consistency)
        samples.append(TrainingSample(pair, geometry, labels))
    return samples


def fine_targets(
    labels: SupervisionLabels, grid_w_b: int, fine_hw_b: Tuple[int, int], window: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Indices of GT matches usable for refinement and their target offsets in fine-map units.

    A match is usable when its B window lies inside the fine map and the warped point falls inside
    that window.
    """
    radius = window // 2
    j_ids = torch.from_numpy(labels.matches[:, 1])
    anchor_b = fine_anchor(j_ids, grid_w_b).numpy().astype(np.float64)
    offsets = labels.targets_b / 2.0 - anchor_b
    fh, fw = fine_hw_b
    inside = (
        (anchor_b[:, 0] - radius >= 0) & (anchor_b[:, 0] + radius <= fw - 1)
        & (anchor_b[:, 1] - radius >= 0) & (anchor_b[:, 1] + radius <= fh - 1)
    )
    within = np.abs(offsets).max(axis=1) <= radius if len(offsets) else np.zeros(0, dtype=bool)
    keep = np.nonzero(inside & within)[0]
    return keep, offsets[keep]


class Trainer:
    def __init__(self, config: MatchConfig, out_dir: str, samples: Optional[List[TrainingSample]] = None, device: str = "cpu"):
        self.config = config
        self.out_dir = Path(out_dir)
        self.device = torch.device(device)

        seed_everything(config.seed)
        self.model = PruningMatcher(config).to(self.device)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        if samples is None:
            samples = prepare_samples(synthetic_pairs(config), config)
        if not samples:
            raise DatasetError("Training needs at least one pair")
        self.samples = samples
        self.rng = np.random.default_rng(config.seed)
        self.history: List[dict] = []

    def _batch(self, indices: Sequence[int]):
        pairs = [self.samples[k].pair for k in indices]
        sizes = {(p.size_a, p.size_b) for p in pairs}
        if len(sizes) != 1:
            raise DatasetError("All pairs in a batch must share image sizes")
        image_a = torch.stack([p.image_a for p in pairs]).to(self.device)
        image_b = torch.stack([p.image_b for p in pairs]).to(self.device)
        return image_a, image_b

    def compute_loss(self, out: MatcherOutput, indices: Sequence[int]) -> LossBundle:
        b_c, i_c, j_c = [], [], []
        b_f, i_f, j_f, targets = [], [], [], []
        matchable_a, matchable_b = [], []
        fine_hw_b = tuple(out.fine_b.shape[-2:])
        for b, k in enumerate(indices):
            labels = self.samples[k].labels
            n = len(labels.matches)
            b_c.append(np.full(n, b))
            i_c.append(labels.matches[:, 0])
            j_c.append(labels.matches[:, 1])
            keep, offsets = fine_targets(labels, out.grid_b[1], fine_hw_b, self.config.refine_window)
            b_f.append(np.full(len(keep), b))
            i_f.append(labels.matches[keep, 0])
            j_f.append(labels.matches[keep, 1])
            targets.append(offsets)
            matchable_a.append(labels.matchable_a)
            matchable_b.append(labels.matchable_b)

        def cat(parts, dtype=torch.long):
            return torch.from_numpy(np.concatenate(parts)).to(self.device, dtype)

        l_c = coarse_loss(out.conf, cat(b_c), cat(i_c), cat(j_c))

        # Refinement is trained on ground-truth coarse matches
        i_ids = cat(i_f)
        gt_coarse = CoarseMatches(
            b_ids=cat(b_f), i_ids=i_ids, j_ids=cat(j_f), conf=torch.ones(i_ids.numel(), device=self.device)
        )
        fine = refine(gt_coarse, out.fine_a, out.fine_b, out.grid_a[1], out.grid_b[1], self.config.refine_window)
        target = torch.from_numpy(np.concatenate(targets).reshape(-1, 2)).to(self.device, fine.offsets.dtype)
        l_f = fine_loss(fine.offsets, target, fine.phi)

        mask_a = torch.from_numpy(np.stack(matchable_a)).to(self.device)
        mask_b = torch.from_numpy(np.stack(matchable_b)).to(self.device)
        l_p = pruning_loss(out.mpm.scores_a, out.mpm.scores_b, mask_a, mask_b).to(l_c.dtype)

        weights = (self.config.weight_coarse, self.config.weight_fine, self.config.weight_pruning)
        return total_loss(l_c, l_f, l_p, weights)

    def _dump_diagnostics(self, step: int, losses: LossBundle, indices: Sequence[int]) -> Path:
        grad_norms = {}
        for name, module in (("backbone", self.model.backbone), ("mpm", self.model.mpm)):
            grads = [p.grad.detach().norm() for p in module.parameters() if p.grad is not None]
            grad_norms[name] = float(torch.stack(grads).norm()) if grads else None
        path = self.out_dir / f"diagnostics_step{step}.json"
        payload = {
            "step": step,
            "losses": {k: (v if math.isfinite(v) else str(v)) for k, v in losses.as_floats().items()},
            "last_grad_norms": grad_norms,
            "pairs": [self.samples[k].pair.name for k in indices],
        }
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        return path

    def train_step(self, step: int) -> Optional[dict]:
        """One optimizer step; ``None`` when pruning emptied a mask and the batch was skipped."""
        self.model.train()
        indices = self.rng.choice(len(self.samples), size=min(self.config.batch, len(self.samples)), replace=False)
        image_a, image_b = self._batch(indices)
        try:
            out = self.model(image_a, image_b)
        except DegeneratePruningError as e:
            logger.warning("Skipping step %d on samples %s: %s", step, indices.tolist(), e)
            return None
        losses = self.compute_loss(out, indices)

        if not torch.isfinite(losses.total):
            path = self._dump_diagnostics(step, losses, indices)
            raise NonFiniteLossError(f"Non-finite loss at step {step}; diagnostics written to {path}")

        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        self.optimizer.step()

        row = {"step": step, **losses.as_floats()}
        logger.debug("step %d: L_c=%.4f L_f=%.4f L_p=%.4f L=%.4f", step, row["loss_coarse"], row["loss_fine"],
                     row["loss_pruning"], row["loss"])
        return row

    def fit(self) -> Path:
        """Run ``config.steps`` steps; returns the path of the final checkpoint."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        config_dump = self.config.model_dump()
        self.config.to_file(str(self.out_dir / "config.txt"))

        for step in tqdm(range(self.config.steps), desc="train", disable=self.config.steps == 0):
            row = self.train_step(step)
            if row is not None:
                self.history.append(row)
            if (step + 1) % self.config.checkpoint_every == 0:
                save_checkpoint(str(self.out_dir / f"checkpoint_step{step + 1}.bin"), self.model, config_dump, step + 1)

        final = self.out_dir / "checkpoint.bin"
        save_checkpoint(str(final), self.model, config_dump, self.config.steps)
        pd.DataFrame(self.history, columns=["step", "loss_coarse", "loss_fine", "loss_pruning", "loss"]).to_csv(
            self.out_dir / "metrics.csv", index=False
        )
        logger.info("Training finished after %d steps", self.config.steps)
        return final


def train(config: MatchConfig, out_dir: str, pairs=None, device: str = "cpu") -> Path:
    samples = prepare_samples(pairs, config) if pairs is not None else None
    return Trainer(config, out_dir, samples=samples, device=device).fit()
