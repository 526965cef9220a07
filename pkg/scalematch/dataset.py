"""On-disk pair dataset: ``root/pairs/<name>/{a.png, b.png, gt.homog | gt.pose + depth_a.bin + depth_b.bin}``."""

import logging
from pathlib import Path
from typing import Dict, Iterator, Tuple

import cv2
import numpy as np
import torch

from scalematch.errors import DatasetError, GeometryError
from scalematch.supervision import GroundTruthGeometry
from scalematch.synthetic import ImagePair

logger = logging.getLogger(__name__)

POSE_BLOCKS = {"K_a": (3, 3), "R_a": (3, 3), "t_a": (3,), "K_b": (3, 3), "R_b": (3, 3), "t_b": (3,)}


def read_image(path: Path) -> torch.Tensor:
    """PNG -> RGB float tensor [3, H, W] in [0, 1]."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DatasetError(f"Could not read image {path}")
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1)))


def write_image(path: Path, image: torch.Tensor) -> None:
    rgb = (image.detach().cpu().clamp(0.0, 1.0).numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise DatasetError(f"Could not write image {path}")


def write_homography(path: Path, homography: np.ndarray) -> None:
    rows = np.asarray(homography, dtype=np.float64).reshape(3, 3)
    Path(path).write_text("\n".join(" ".join(f"{v:.17g}" for v in row) for row in rows) + "\n", encoding="utf-8")


def read_homography(path: Path) -> np.ndarray:
    values = Path(path).read_text(encoding="utf-8").split()
    if len(values) != 9:
        raise DatasetError(f"{path}: expected 9 numbers, found {len(values)}")
    try:
        return np.asarray([float(v) for v in values], dtype=np.float64).reshape(3, 3)
    except ValueError as e:
        raise DatasetError(f"{path}: {e}") from e


def write_pose(path: Path, blocks: Dict[str, np.ndarray]) -> None:
    lines = []
    for key, shape in POSE_BLOCKS.items():
        lines.append(key)
        arr = np.asarray(blocks[key], dtype=np.float64).reshape(shape)
        for row in arr.reshape(-1, 3):
            lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pose(path: Path) -> Dict[str, np.ndarray]:
    """Labeled blocks: a name line (K_a, R_a, t_a, K_b, R_b, t_b) followed by its rows."""
    blocks: Dict[str, list] = {}
    current = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line in POSE_BLOCKS:
            current = line
            blocks[current] = []
            continue
        if current is None:
            raise DatasetError(f"{path}: numbers before the first block label")
        try:
            blocks[current].extend(float(v) for v in line.split())
        except ValueError as e:
            raise DatasetError(f"{path}: {e}") from e

    parsed = {}
    for key, shape in POSE_BLOCKS.items():
        values = blocks.get(key)
        if values is None or len(values) != int(np.prod(shape)):
            raise DatasetError(f"{path}: block {key} missing or of wrong size")
        parsed[key] = np.asarray(values, dtype=np.float64).reshape(shape)
    return parsed


def write_depth(path: Path, depth: np.ndarray) -> None:
    """int32 LE header (H, W, 1) followed by H*W float32 LE values."""
    depth = np.asarray(depth, dtype="<f4")
    header = np.asarray([depth.shape[0], depth.shape[1], 1], dtype="<i4")
    Path(path).write_bytes(header.tobytes() + depth.tobytes())


def read_depth(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise DatasetError(f"{path}: depth header truncated")
    h, w, c = np.frombuffer(raw[:12], dtype="<i4")
    if c != 1 or len(raw) != 12 + 4 * h * w:
        raise DatasetError(f"{path}: depth payload does not match header {h}x{w}x{c}")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(h, w).astype(np.float64)


def load_pair(pair_dir: Path) -> Tuple[ImagePair, GroundTruthGeometry]:
    name = pair_dir.name
    image_a = read_image(pair_dir / "a.png")
    image_b = read_image(pair_dir / "b.png")
    pair = ImagePair(image_a=image_a, image_b=image_b, name=name)

    try:
        if (pair_dir / "gt.homog").is_file():
            return pair, GroundTruthGeometry(homography=read_homography(pair_dir / "gt.homog"))
        if (pair_dir / "gt.pose").is_file():
            blocks = read_pose(pair_dir / "gt.pose")
            geometry = GroundTruthGeometry(
                rotation_a=blocks["R_a"], translation_a=blocks["t_a"],
                rotation_b=blocks["R_b"], translation_b=blocks["t_b"],
                intrinsics_a=blocks["K_a"], intrinsics_b=blocks["K_b"],
                depth_a=read_depth(pair_dir / "depth_a.bin"),
                depth_b=read_depth(pair_dir / "depth_b.bin"),
            )
            return pair, geometry
    except (GeometryError, FileNotFoundError) as e:
        raise DatasetError(f"Pair {name}: {e}") from e
    raise DatasetError(f"Pair {name}: missing geometry file (gt.homog or gt.pose)")


def load_dataset(root: str, strict: bool = True) -> Iterator[Tuple[ImagePair, GroundTruthGeometry]]:
    """Lazily yield pairs in name order; malformed entries raise, or are logged and skipped if not strict."""
    pairs_dir = Path(root) / "pairs"
    if not Path(root).is_dir():
        raise DatasetError(f"Dataset root not found: {root}")
    if not pairs_dir.is_dir():
        return

    for pair_dir in sorted(p for p in pairs_dir.iterdir() if p.is_dir()):
        try:
            yield load_pair(pair_dir)
        except DatasetError as e:
            if strict:
                raise
            logger.warning("Skipping %s: %s", pair_dir, e)


def write_pair(root: str, pair: ImagePair, geometry: GroundTruthGeometry, name: str = None) -> Path:
    """Write one pair in the dataset layout; returns the pair directory."""
    pair_dir = Path(root) / "pairs" / (name or pair.name)
    pair_dir.mkdir(parents=True, exist_ok=True)
    write_image(pair_dir / "a.png", pair.image_a)
    write_image(pair_dir / "b.png", pair.image_b)
    if geometry.is_homography:
        write_homography(pair_dir / "gt.homog", geometry.homography)
    else:
        write_pose(pair_dir / "gt.pose", {
            "K_a": geometry.intrinsics_a, "R_a": geometry.rotation_a, "t_a": geometry.translation_a,
            "K_b": geometry.intrinsics_b, "R_b": geometry.rotation_b, "t_b": geometry.translation_b,
        })
        write_depth(pair_dir / "depth_a.bin", geometry.depth_a)
        write_depth(pair_dir / "depth_b.bin", geometry.depth_b)
    return pair_dir
