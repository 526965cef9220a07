"""Scale-aware dynamic pruning attention (SADPA).

Queries come from the source features at 1/8 resolution. Keys and values come from a 3-level
pyramid built from the target features with strided convolutions (kernel = stride = 4, 2, 1).
The coarsest level is never masked. The two finer levels drop pruned tokens from the softmax.
"""

import math
from typing import List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from config import PYRAMID_RATIOS
from scalematch.errors import EmptyKeyError, ShapeError
from scalematch.rope import RotaryEmbedding2d, grid_coords


class KvPyramidLevel(NamedTuple):
    keys: torch.Tensor  # [B, N_i, C]
    values: torch.Tensor  # [B, N_i, C]
    mask: torch.Tensor  # [B, N_i] bool
    ratio: int
    coords: torch.Tensor  # [N_i, 2], pooled-cell centers


def downsample_mask(mask: torch.Tensor, ratio: int) -> torch.Tensor:
    """Nearest-neighbor downsampling of a [B, h, w] mask by ``ratio``."""
    if ratio == 1:
        return mask.bool()
    h, w = mask.shape[-2:]
    out = F.interpolate(mask.float().unsqueeze(1), size=(h // ratio, w // ratio), mode="nearest")
    return out.squeeze(1) > 0.5


def attend(
    q: torch.Tensor,
    level: KvPyramidLevel,
    heads: int,
    rope: Optional[RotaryEmbedding2d] = None,
    query_coords: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Multi-head scaled dot-product attention of ``q`` [B, N_s, C] over one pyramid level.

    Keys whose level mask is zero get a logit of -inf. With ``rope`` set, queries and keys are
    rotated by their own coordinates before the dot product.
    """
    dim = q.shape[-1]
    if dim % heads != 0:
        raise ShapeError(f"Channel count {dim} is not divisible by {heads} heads")
    if (~level.mask.any(dim=-1)).any():
        raise EmptyKeyError(f"All keys masked at pyramid level with ratio {level.ratio}")

    qh = rearrange(q, "b n (h d) -> b h n d", h=heads)
    kh = rearrange(level.keys, "b m (h d) -> b h m d", h=heads)
    vh = rearrange(level.values, "b m (h d) -> b h m d", h=heads)
    if rope is not None:
        qh = rope(qh, query_coords)
        kh = rope(kh, level.coords)

    logits = torch.einsum("bhnd,bhmd->bhnm", qh, kh) / math.sqrt(qh.shape[-1])
    logits = logits.masked_fill(~level.mask[:, None, None, :], float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    out = torch.einsum("bhnm,bhmd->bhnd", attn, vh)
    return rearrange(out, "b h n d -> b n (h d)")


def linear_attend(q: torch.Tensor, level: KvPyramidLevel, heads: int, eps: float = 1e-6) -> torch.Tensor:
    """elu+1 kernelised linear attention; masked keys and values are zeroed."""
    keep = level.mask[..., None].to(q.dtype)
    qh = rearrange(F.elu(q) + 1, "b n (h d) -> b h n d", h=heads)
    kh = rearrange((F.elu(level.keys) + 1) * keep, "b m (h d) -> b h m d", h=heads)
    vh = rearrange(level.values * keep, "b m (h d) -> b h m d", h=heads)

    kv = torch.einsum("bhmd,bhme->bhde", kh, vh)
    z = 1.0 / (torch.einsum("bhnd,bhd->bhn", qh, kh.sum(dim=2)) + eps)
    out = torch.einsum("bhnd,bhde,bhn->bhne", qh, kv, z)
    return rearrange(out, "b h n d -> b n (h d)")


class SADPA(nn.Module):
    """One self- or cross-SADPA unit.

    ``attention`` selects the full 3-level pyramid ("sadpa"), the 1/8 level only ("single"),
    or linear attention over the 1/8 level ("linear").
    """

    def __init__(self, dim: int, heads: int = 4, use_rope: bool = False, attention: str = "sadpa"):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"Channel count {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.attention = attention
        self.ratios: Tuple[int, ...] = tuple(PYRAMID_RATIOS) if attention == "sadpa" else (1,)

        self.q_proj = nn.Linear(dim, dim, bias=False)
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim, bias=False)
        self.level_convs = nn.ModuleList(nn.Conv2d(dim, dim, kernel_size=r, stride=r) for r in self.ratios)
        self.rope = RotaryEmbedding2d(dim // heads) if use_rope else None

        n_in = (len(self.ratios) + 1) * dim
        self.ffn = nn.Sequential(
            nn.Linear(n_in, 2 * dim, bias=False),
            nn.ReLU(),
            nn.Linear(2 * dim, dim, bias=False),
        )
        self.norm = nn.LayerNorm(dim)

    def build_kv_pyramid(self, feat_t: torch.Tensor, mask_t: torch.Tensor, hw_t: Sequence[int]) -> List[KvPyramidLevel]:
        """Keys/values for every level from target tokens [B, N_t, C] on an (h, w) grid."""
        h, w = hw_t
        max_ratio = max(self.ratios)
        if h % max_ratio != 0 or w % max_ratio != 0:
            raise ShapeError(f"Coarse grid {h}x{w} is not divisible by pyramid ratio {max_ratio}")

        fmap = rearrange(feat_t, "b (h w) c -> b c h w", h=h, w=w)
        mask_map = mask_t.view(-1, h, w)
        levels = []
        for ratio, conv in zip(self.ratios, self.level_convs):
            pooled = rearrange(conv(fmap), "b c h w -> b (h w) c")
            if ratio == max(PYRAMID_RATIOS) and self.attention == "sadpa":
                level_mask = torch.ones(pooled.shape[:2], dtype=torch.bool, device=pooled.device)
            else:
                level_mask = downsample_mask(mask_map, ratio).flatten(1)
            levels.append(
                KvPyramidLevel(
                    keys=self.k_proj(pooled),
                    values=self.v_proj(pooled),
                    mask=level_mask,
                    ratio=ratio,
                    coords=grid_coords(h, w, ratio, device=pooled.device, dtype=pooled.dtype),
                )
            )
        return levels

    def _level_message(self, q: torch.Tensor, level: KvPyramidLevel, query_coords) -> torch.Tensor:
        # Items whose level has no key at all contribute a zero message for that level
        empty = ~level.mask.any(dim=-1)
        if empty.all():
            return torch.zeros_like(q)
        if empty.any():
            level = level._replace(mask=level.mask | empty[:, None])

        if self.attention == "linear":
            msg = linear_attend(q, level, self.heads)
        else:
            msg = attend(q, level, self.heads, rope=self.rope, query_coords=query_coords)

        if empty.any():
            msg = msg.masked_fill(empty[:, None, None], 0.0)
        return msg

    def forward(
        self,
        feat_s: torch.Tensor,
        feat_t: torch.Tensor,
        mask_s: torch.Tensor,
        mask_t: torch.Tensor,
        hw_s: Sequence[int],
        hw_t: Sequence[int],
        return_messages: bool = False,
    ):
        """Update source tokens [B, N_s, C]; rows with ``mask_s`` = 0 are returned unchanged."""
        mask_s = mask_s.bool()
        mask_t = mask_t.bool()
        q = self.q_proj(feat_s) * mask_s[..., None].to(feat_s.dtype)
        query_coords = None
        if self.rope is not None:
            query_coords = grid_coords(*hw_s, device=feat_s.device, dtype=feat_s.dtype)

        levels = self.build_kv_pyramid(feat_t, mask_t, hw_t)
        messages = [self._level_message(q, level, query_coords) for level in levels]

        fused = self.ffn(torch.cat(messages + [feat_s], dim=-1))
        updated = self.norm(feat_s + fused)
        out = torch.where(mask_s[..., None], updated, feat_s)

        if return_messages:
            return out, messages
        return out
