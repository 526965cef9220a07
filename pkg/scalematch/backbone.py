"""Residual CNN encoder with top-down pyramid fusion (coarse 1/8, fine 1/2)."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from config import IMAGE_DIVISOR
from scalematch.errors import ShapeError


@dataclass
class FeatureBundle:
    """Coarse [B, C_c, H/8, W/8] and fine [B, C_f, H/2, W/2] feature maps."""

    coarse: torch.Tensor
    fine: torch.Tensor


def conv1x1(in_planes: int, out_planes: int) -> nn.Conv2d:
    return nn.Conv2d(in_planes, out_planes, kernel_size=1, bias=False)


def conv3x3(in_planes: int, out_planes: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_planes, out_planes, kernel_size=3, stride=stride, padding=1, bias=False)


class ResidualBlock(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv3x3(in_planes, planes, stride)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = conv3x3(planes, planes)
        self.bn2 = nn.BatchNorm2d(planes)
        self.act = nn.ReLU()

        if stride == 1 and in_planes == planes:
            self.downsample = None
        else:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_planes, planes, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = self.act(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.act(out + identity)


class ResNetFPN(nn.Module):
    """Three residual stages (1/2, 1/4, 1/8) fused top-down back to 1/2.

    Stage widths run from ``c_fine`` up to ``c_coarse``; the 1/8 map is the coarse output and
    the fused 1/2 map is the fine output.
    """

    def __init__(self, c_coarse: int = 256, c_fine: int = 128, blocks_per_stage: int = 2, in_channels: int = 3):
        super().__init__()
        dims = (c_fine, (c_fine + c_coarse) // 2, c_coarse)
        self.in_channels = in_channels
        self.c_coarse = c_coarse
        self.c_fine = c_fine

        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, dims[0], kernel_size=7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(dims[0]),
            nn.ReLU(),
        )
        self.layer1 = self._make_stage(dims[0], dims[0], blocks_per_stage, stride=1)  # 1/2
        self.layer2 = self._make_stage(dims[0], dims[1], blocks_per_stage, stride=2)  # 1/4
        self.layer3 = self._make_stage(dims[1], dims[2], blocks_per_stage, stride=2)  # 1/8

        # Pyramid fusion
        self.layer3_outconv = conv1x1(dims[2], c_coarse)
        self.layer2_outconv = conv1x1(dims[1], c_coarse)
        self.layer2_outconv2 = nn.Sequential(
            conv3x3(c_coarse, c_coarse),
            nn.BatchNorm2d(c_coarse),
            nn.LeakyReLU(),
            conv3x3(c_coarse, dims[1]),
        )
        self.layer1_outconv = conv1x1(dims[0], dims[1])
        self.layer1_outconv2 = nn.Sequential(
            conv3x3(dims[1], dims[1]),
            nn.BatchNorm2d(dims[1]),
            nn.LeakyReLU(),
            conv3x3(dims[1], c_fine),
        )

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.constant_(m.weight, 1)
                nn.init.constant_(m.bias, 0)

    @staticmethod
    def _make_stage(in_planes: int, planes: int, blocks: int, stride: int) -> nn.Sequential:
        layers = [ResidualBlock(in_planes, planes, stride=stride)]
        layers += [ResidualBlock(planes, planes, stride=1) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> FeatureBundle:
        x0 = self.stem(x)
        x1 = self.layer1(x0)
        x2 = self.layer2(x1)
        x3 = self.layer3(x2)

        coarse = self.layer3_outconv(x3)

        x3_up = F.interpolate(coarse, scale_factor=2.0, mode="bilinear", align_corners=True)
        x2_out = self.layer2_outconv2(self.layer2_outconv(x2) + x3_up)

        x2_up = F.interpolate(x2_out, scale_factor=2.0, mode="bilinear", align_corners=True)
        fine = self.layer1_outconv2(self.layer1_outconv(x1) + x2_up)

        return FeatureBundle(coarse=coarse, fine=fine)


def check_image_shape(image: torch.Tensor) -> None:
    """Reject images whose height or width is not a multiple of 32."""
    if image.dim() not in (3, 4):
        raise ShapeError(f"Expected image of shape [C, H, W] or [B, C, H, W], got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % IMAGE_DIVISOR != 0 or w % IMAGE_DIVISOR != 0:
        raise ShapeError(f"Image size {h}x{w} is not divisible by {IMAGE_DIVISOR}")


def to_grayscale(image: torch.Tensor) -> torch.Tensor:
    """ITU-R 601 luma of an RGB batch, keeping a channel axis."""
    weights = image.new_tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
    return (image * weights).sum(dim=1, keepdim=True)


def extract_features(image: torch.Tensor, backbone: ResNetFPN) -> FeatureBundle:
    """Run the backbone on one image [3, H, W] or a batch [B, 3, H, W]."""
    check_image_shape(image)
    batched = image.dim() == 4
    x = image if batched else image.unsqueeze(0)
    if backbone.in_channels == 1 and x.shape[1] == 3:
        x = to_grayscale(x)

    feats = backbone(x)
    if not batched:
        feats = FeatureBundle(coarse=feats.coarse[0], fine=feats.fine[0])
    return feats
