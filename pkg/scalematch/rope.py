"""2D rotary position embedding with learned frequency projections.

Every consecutive channel pair (2k, 2k+1) of a head is one 2D subspace. The subspace is rotated
by the angle b_k . (x, y), where b_k is learned. After rotating queries and keys by their own
coordinates, the dot product between them depends only on the coordinate difference.
"""

import math

import torch
from torch import nn

from scalematch.errors import ShapeError


def grid_coords(h: int, w: int, ratio: int = 1, device=None, dtype=torch.float32) -> torch.Tensor:
    """Normalized cell-center coordinates of an (h/ratio) x (w/ratio) grid, row-major.

    ``h`` and ``w`` are the 1/8-resolution extents. With ``ratio`` > 1 the centers are those of the
    pooled ratio x ratio windows, expressed in the same normalized frame.
    """
    ys = (torch.arange(h // ratio, device=device, dtype=dtype) + 0.5) * ratio / h
    xs = (torch.arange(w // ratio, device=device, dtype=dtype) + 0.5) * ratio / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)


class RotaryEmbedding2d(nn.Module):
    """Learned 2D RoPE for one attention head of dimension ``head_dim``."""

    def __init__(self, head_dim: int, max_freq: float = 64.0):
        super().__init__()
        if head_dim % 2 != 0:
            raise ShapeError(f"RoPE head dimension must be even, got {head_dim}")
        self.head_dim = head_dim
        half = head_dim // 2

        # Log-spaced magnitudes, alternating between the x and y axes
        mags = math.pi * torch.logspace(0.0, math.log10(max_freq), steps=half)
        freqs = torch.zeros(half, 2)
        freqs[torch.arange(half), torch.arange(half) % 2] = mags
        self.freqs = nn.Parameter(freqs)

    def angles(self, coords: torch.Tensor) -> torch.Tensor:
        return coords.to(self.freqs.dtype) @ self.freqs.t()

    def forward(self, x: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        """Rotate ``x`` [..., N, d] by the positions ``coords`` [..., N, 2]."""
        if x.shape[-1] != self.head_dim:
            raise ShapeError(f"Expected feature dim {self.head_dim}, got {x.shape[-1]}")
        theta = self.angles(coords).to(x.dtype)
        cos, sin = theta.cos(), theta.sin()
        x_even, x_odd = x[..., 0::2], x[..., 1::2]
        # R(-theta) per subspace, so <R(-a)q, R(-b)k> = q^T R(a - b) k
        rot_even = x_even * cos + x_odd * sin
        rot_odd = -x_even * sin + x_odd * cos
        return torch.stack([rot_even, rot_odd], dim=-1).flatten(-2)


def rotate(features: torch.Tensor, coords: torch.Tensor, rope: RotaryEmbedding2d) -> torch.Tensor:
    if features.shape[-1] % 2 != 0:
        raise ShapeError(f"Feature dimension must be even, got {features.shape[-1]}")
    if features.shape[-2] < 1:
        raise ShapeError("At least one feature vector is required")
    return rope(features, coords)


def sine_position_encoding(channels: int, h: int, w: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Absolute 2D sinusoidal encoding [channels, h, w] (position-encoding ablation)."""
    if channels % 4 != 0:
        raise ShapeError(f"Sine encoding needs channels divisible by 4, got {channels}")
    pe = torch.zeros(channels, h, w, device=device, dtype=dtype)
    y_pos = torch.ones(h, w, device=device, dtype=dtype).cumsum(0).unsqueeze(0)
    x_pos = torch.ones(h, w, device=device, dtype=dtype).cumsum(1).unsqueeze(0)
    div_term = torch.exp(
        torch.arange(0, channels // 2, 2, device=device, dtype=dtype) * (-math.log(10000.0) / (channels // 2))
    )[:, None, None]
    pe[0::4] = torch.sin(x_pos * div_term)
    pe[1::4] = torch.cos(x_pos * div_term)
    pe[2::4] = torch.sin(y_pos * div_term)
    pe[3::4] = torch.cos(y_pos * div_term)
    return pe
