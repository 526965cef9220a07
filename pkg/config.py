"""Configuration settings for the ScaleMatch matcher."""

import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

# Load environment variables from .env file
load_dotenv()

# App Configuration
APP_NAME = "ScaleMatch"
APP_ICON = "🧩"
PAGE_TITLE = "ScaleMatch - Image Matching Explorer"

# Runtime Configuration
DEVICE = os.getenv("SCALEMATCH_DEVICE", "cpu")
LOG_LEVEL = os.getenv("SCALEMATCH_LOG_LEVEL", "INFO")
RUN_SLOW_TESTS = os.getenv("SCALEMATCH_RUN_SLOW", "0") == "1"

# Fixed geometry of the pipeline
COARSE_RATIO = 8
FINE_RATIO = 2
IMAGE_DIVISOR = 32
PYRAMID_RATIOS = (4, 2, 1)

# Defaults per preset; explicit keys in a config file win over these
PRESETS: Dict[str, Dict[str, Any]] = {
    "toy": {
        "c_coarse": 64,
        "c_fine": 32,
        "mpm_layers": 2,
        "heads": 4,
        "blocks_per_stage": 2,
        "image_size": 128,
    },
    "full": {
        "c_coarse": 256,
        "c_fine": 128,
        "mpm_layers": 4,
        "heads": 4,
        "blocks_per_stage": 2,
        "image_size": 640,
    },
}


class MatchConfig(BaseModel):
    """Validated run configuration, read from a UTF-8 key=value file."""

    model_config = ConfigDict(extra="forbid")

    preset: Literal["toy", "full"] = "toy"

    # Model
    c_coarse: int = Field(64, gt=0)
    c_fine: int = Field(32, gt=0)
    mpm_layers: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    blocks_per_stage: int = Field(2, ge=1)
    grayscale: bool = False

    # Matching
    theta_p: float = Field(0.05, gt=0.0, lt=1.0)
    theta_c: float = Field(0.2, gt=0.0, lt=1.0)
    tau: float = Field(0.1, gt=0.0)
    refine_window: int = Field(5, ge=1)

    # Ablation switches
    pos_encoding: Literal["rope", "absolute"] = "rope"
    attention: Literal["sadpa", "single", "linear"] = "sadpa"
    pruning: Literal["gradual", "last", "none"] = "gradual"
    pruning_score: Literal["nmi", "cosine"] = "nmi"
    weighted_softmax: bool = True
    detach_sigma: bool = False

    # Training
    lr: float = Field(8e-4, ge=0.0)
    weight_decay: float = Field(0.1, ge=0.0)
    batch: int = Field(1, ge=1)
    steps: int = Field(2000, ge=0)
    checkpoint_every: int = Field(500, ge=1)
    num_pairs: int = Field(50, ge=1)
    image_size: int = Field(128, gt=0)
    seed: int = 0
    weight_coarse: float = Field(1.0, ge=0.0)
    weight_fine: float = Field(1.0, ge=0.0)
    weight_pruning: float = Field(1.0, ge=0.0)

    # Supervision
    depth_consistency: float = Field(0.2, gt=0.0)

    # Synthetic pair sampler
    rotation_deg: float = Field(15.0, ge=0.0)
    scale_min: float = Field(0.8, gt=0.0)
    scale_max: float = Field(1.25, gt=0.0)
    translation_frac: float = Field(0.1, ge=0.0)
    perspective: float = Field(1e-4, ge=0.0)
    brightness: float = Field(0.1, ge=0.0)
    contrast: float = Field(0.1, ge=0.0, lt=1.0)

    # Evaluation
    pose_ransac_iters: int = Field(2000, ge=1)
    pose_ransac_threshold: float = Field(1.0, gt=0.0)
    homography_ransac_threshold: float = Field(3.0, gt=0.0)

    @model_validator(mode="after")
    def _check_consistency(self) -> "MatchConfig":
        if self.c_coarse % self.heads != 0:
            raise ValueError("heads must divide c_coarse")
        if (self.c_coarse // self.heads) % 2 != 0:
            raise ValueError("head dimension c_coarse / heads must be even")
        if self.refine_window % 2 != 1:
            raise ValueError("refine_window must be odd")
        if self.scale_min > self.scale_max:
            raise ValueError("scale_min must not exceed scale_max")
        if self.image_size % IMAGE_DIVISOR != 0:
            raise ValueError(f"image_size must be divisible by {IMAGE_DIVISOR}")
        return self

    @property
    def head_dim(self) -> int:
        return self.c_coarse // self.heads

    @classmethod
    def from_dict(cls, values: Dict[str, Any], apply_env: bool = True) -> "MatchConfig":
        """Build a config: preset defaults, then explicit values, then env overrides."""
        values = {k: v for k, v in values.items() if v is not None and v != ""}
        preset = values.get("preset", "toy")
        merged: Dict[str, Any] = dict(PRESETS.get(preset, {}))
        merged.update(values)
        merged["preset"] = preset

        env_seed = os.getenv("PRISM_SEED") or os.getenv("SCALEMATCH_SEED")
        if apply_env and env_seed:
            merged["seed"] = int(env_seed)

        return cls(**merged)

    @classmethod
    def from_file(cls, path: Optional[str] = None, apply_env: bool = True) -> "MatchConfig":
        """Load a key=value config file (same syntax as a .env file)."""
        if path is None:
            return cls.from_dict({}, apply_env=apply_env)
        if not Path(path).is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        return cls.from_dict(dict(dotenv_values(path, encoding="utf-8")), apply_env=apply_env)

    def to_file(self, path: str) -> None:
        """Write the config back out in key=value form."""
        lines = []
        for key, value in self.model_dump().items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key}={value}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
