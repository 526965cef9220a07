"""Seeded synthetic training pairs: image B is image A under a random homography and photometric jitter."""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import cv2
import numpy as np
import torch
from kornia.geometry.transform import warp_perspective

from config import MatchConfig
from scalematch.errors import GeometryError
from scalematch.supervision import GroundTruthGeometry

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e8
MAX_RESAMPLES = 10


@dataclass
class ImagePair:
    """Two RGB images [3, H, W] in [0, 1]; ``valid_b`` marks B pixels that came from inside A."""

    image_a: torch.Tensor
    image_b: torch.Tensor
    name: str = ""
    valid_b: Optional[torch.Tensor] = None

    @property
    def size_a(self) -> Tuple[int, int]:
        return tuple(self.image_a.shape[-2:])

    @property
    def size_b(self) -> Tuple[int, int]:
        return tuple(self.image_b.shape[-2:])


@dataclass
class SyntheticPairSpec:
    seed: int
    size: Tuple[int, int] = (128, 128)
    base_image: Optional[np.ndarray] = None  # [H, W, 3] float in [0, 1]; procedural texture if None
    rotation_deg: float = 15.0
    scale_min: float = 0.8
    scale_max: float = 1.25
    translation_frac: float = 0.1
    perspective: float = 1e-4
    brightness: float = 0.1
    contrast: float = 0.1

    def __post_init__(self):
        if self.scale_min <= 0 or self.scale_max < self.scale_min:
            raise ValueError(f"Invalid scale bounds [{self.scale_min}, {self.scale_max}]")

    @classmethod
    def from_config(cls, config: MatchConfig, seed: int, base_image: Optional[np.ndarray] = None) -> "SyntheticPairSpec":
        return cls(
            seed=seed,
            size=(config.image_size, config.image_size),
            base_image=base_image,
            rotation_deg=config.rotation_deg,
            scale_min=config.scale_min,
            scale_max=config.scale_max,
            translation_frac=config.translation_frac,
            perspective=config.perspective,
            brightness=config.brightness,
            contrast=config.contrast,
        )


def procedural_texture(rng: np.random.Generator, size: Tuple[int, int]) -> np.ndarray:
    """Checkerboards at a few random frequencies plus low-pass noise, [H, W, 3] in [0, 1]."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    image = np.zeros((h, w, 3), dtype=np.float64)
    for _ in range(3):
        period = rng.uniform(6.0, 24.0)
        angle = rng.uniform(0.0, math.pi)
        u = (xx * math.cos(angle) + yy * math.sin(angle)) / period
        v = (-xx * math.sin(angle) + yy * math.cos(angle)) / period
        board = ((np.floor(u) + np.floor(v)) % 2.0)[..., None]
        image += board * rng.uniform(0.1, 0.4, size=3)[None, None, :]

    noise = rng.standard_normal((h, w, 3)).astype(np.float32)
    sigma = float(rng.uniform(1.0, 3.0))
    noise = cv2.GaussianBlur(noise, ksize=(0, 0), sigmaX=sigma)
    image += 0.25 * noise / (np.abs(noise).max() + 1e-8)

    image -= image.min()
    image /= image.max() + 1e-8
    return image.astype(np.float32)


def sample_homography(rng: np.random.Generator, spec: SyntheticPairSpec) -> np.ndarray:
    """Rotation, log-uniform scale, translation and perspective composed about the image center."""
    h, w = spec.size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    angle = math.radians(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    if spec.scale_min == spec.scale_max:
        scale = spec.scale_min
    else:
        scale = math.exp(rng.uniform(math.log(spec.scale_min), math.log(spec.scale_max)))
    tx = rng.uniform(-spec.translation_frac, spec.translation_frac) * w
    ty = rng.uniform(-spec.translation_frac, spec.translation_frac) * h
    px, py = rng.uniform(-spec.perspective, spec.perspective, size=2)

    to_origin = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, cx + tx], [0.0, 1.0, cy + ty], [0.0, 0.0, 1.0]])
    cos, sin = math.cos(angle), math.sin(angle)
    similarity = np.array([[scale * cos, -scale * sin, 0.0], [scale * sin, scale * cos, 0.0], [0.0, 0.0, 1.0]])
    projective = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])
    return back @ similarity @ projective @ to_origin


def _photometric(image: torch.Tensor, rng: np.random.Generator, spec: SyntheticPairSpec) -> torch.Tensor:
    if spec.brightness == 0 and spec.contrast == 0:
        return image
    shift = float(rng.uniform(-spec.brightness, spec.brightness))
    gain = float(rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast))
    mean = image.mean()
    return ((image - mean) * gain + mean + shift).clamp(0.0, 1.0)


def warp_image(image: torch.Tensor, homography: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor]:
    """Bilinear warp of [3, H, W] by ``homography`` (A pixel -> B pixel); outside pixels are zero."""
    h, w = image.shape[-2:]
    mat = torch.from_numpy(homography).to(torch.float32)[None]
    src = torch.cat([image, torch.ones_like(image[:1])], dim=0)[None]
    out = warp_perspective(src, mat, dsize=(h, w), mode="bilinear", padding_mode="zeros", align_corners=True)[0]
    return out[:-1], out[-1] > 0.999


def generate_pair(spec: SyntheticPairSpec) -> Tuple[ImagePair, GroundTruthGeometry]:
    """Deterministic under ``spec.seed``; degenerate homographies are resampled a bounded number of times."""
    rng = np.random.default_rng(spec.seed)
    if spec.base_image is None:
        base = procedural_texture(rng, spec.size)
    else:
        base = np.asarray(spec.base_image, dtype=np.float32)
        if base.shape[:2] != tuple(spec.size):
            base = cv2.resize(base, (spec.size[1], spec.size[0]), interpolation=cv2.INTER_AREA)
    image_a = torch.from_numpy(np.ascontiguousarray(base.transpose(2, 0, 1))).clamp(0.0, 1.0)

    for attempt in range(MAX_RESAMPLES):
        homography = sample_homography(rng, spec)
        if np.linalg.cond(homography) <= MAX_CONDITION:
            break
        logger.debug("Resampling degenerate homography (attempt %d)", attempt + 1)
    else:
        raise GeometryError(f"Could not sample an invertible homography for seed {spec.seed}")

    if np.array_equal(homography, np.eye(3)):
        image_b = image_a.clone()
        valid_b = torch.ones(spec.size, dtype=torch.bool)
    else:
        image_b, valid_b = warp_image(image_a, homography)
    # Padding stays zero after jitter
    image_b = torch.where(valid_b[None], _photometric(image_b, rng, spec), torch.zeros_like(image_b))

    pair = ImagePair(image_a=image_a, image_b=image_b, name=f"synthetic_{spec.seed:06d}", valid_b=valid_b)
    return pair, GroundTruthGeometry(homography=homography)
