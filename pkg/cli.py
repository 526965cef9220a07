"""Command-line entry point: train, match, evaluate, export masks, self-test, make a dataset."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import cv2
import numpy as np

from config import DEVICE, LOG_LEVEL, MatchConfig
from scalematch.dataset import load_dataset, read_image
from scalematch.errors import MatchError
from scalematch.evaluate import auc_table, evaluate_homography, evaluate_pose, match_pair, read_pose_file, write_report
from scalematch.matcher import write_matches
from scalematch.model import PruningMatcher
from scalematch.synthetic import ImagePair
from scalematch.trainer import train

logger = logging.getLogger("scalematch.cli")


def _thresholds(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _load_pair(args) -> ImagePair:
    return ImagePair(
        image_a=read_image(Path(args.image_a)),
        image_b=read_image(Path(args.image_b)),
        name=f"{Path(args.image_a).stem}-{Path(args.image_b).stem}",
    )


def cmd_train(args) -> int:
    config = MatchConfig.from_file(args.config)
    pairs = None
    if args.dataset:
        pairs = list(load_dataset(args.dataset, strict=not args.lenient))
    checkpoint = train(config, args.out, pairs=pairs, device=DEVICE)
    print(f"✅ Training finished, checkpoint written to {checkpoint}")
    return 0


def cmd_match(args) -> int:
    model = PruningMatcher.from_checkpoint(args.checkpoint, device=DEVICE)
    pair = _load_pair(args)
    points_a, points_b, fine, _ = match_pair(model, pair, theta_c=args.theta_c, theta_p=args.theta_p, device=DEVICE)
    write_matches(args.out, points_a, points_b, fine.conf.cpu().numpy())
    print(f"✅ {len(fine)} matches written to {args.out}")
    return 0


def cmd_eval_homography(args) -> int:
    model = PruningMatcher.from_checkpoint(args.checkpoint, device=DEVICE)
    thresholds = _thresholds(args.thresholds)
    table = evaluate_homography(
        model, load_dataset(args.dataset, strict=not args.lenient),
        ransac_threshold=model.config.homography_ransac_threshold, device=DEVICE,
    )
    if table.empty:
        print("⚠️ No homography pairs found in the dataset")
        return 1
    report = auc_table(table["corner_error"], thresholds, table["scale_bucket"])
    extra = {"mask recall": table["mask_recall"].mean(), "mask IoU": table["mask_iou"].mean()}
    image = write_report(args.report, report, table["corner_error"], thresholds, "px", extra)
    print(report.to_string(index=False))
    print(f"✅ Report written to {args.report} (curve: {image})")
    return 0


def cmd_eval_pose(args) -> int:
    thresholds = _thresholds(args.thresholds)
    poses = read_pose_file(args.poses) if args.poses else None
    model = None
    seed, iters, thr = 0, 2000, 1.0
    if poses is None:
        if not args.checkpoint:
            print("❌ eval-pose needs --checkpoint or --poses", file=sys.stderr)
            return 2
        model = PruningMatcher.from_checkpoint(args.checkpoint, device=DEVICE)
        seed, iters, thr = model.config.seed, model.config.pose_ransac_iters, model.config.pose_ransac_threshold

    table = evaluate_pose(
        model, load_dataset(args.dataset, strict=not args.lenient),
        ransac_threshold=thr, ransac_iters=iters, seed=seed, poses=poses, device=DEVICE,
    )
    if table.empty:
        print("⚠️ No pose pairs found in the dataset")
        return 1
    report = auc_table(table["pose_error"], thresholds)
    extra = {}
    if table["epipolar_precision"].notna().any():
        extra["epipolar precision"] = table["epipolar_precision"].mean()
    print(report.to_string(index=False))
    if args.report:
        write_report(args.report, report, table["pose_error"], thresholds, "deg", extra)
        print(f"✅ Report written to {args.report}")
    return 0


def cmd_export_masks(args) -> int:
    model = PruningMatcher.from_checkpoint(args.checkpoint, device=DEVICE)
    pair = _load_pair(args)
    _, _, _, out = match_pair(model, pair, device=DEVICE)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, masks, grid in (("a", out.mpm.masks_a, out.grid_a), ("b", out.mpm.masks_b, out.grid_b)):
        for layer, mask in enumerate(masks):
            image = mask[0].reshape(grid).cpu().numpy().astype(np.uint8) * 255
            cv2.imwrite(str(out_dir / f"mask_{name}_layer{layer}.png"), image)
    print(f"✅ {len(out.mpm.masks_a)} mask layers per image written to {out_dir}")
    return 0


def cmd_selftest(args) -> int:
    import pytest

    tests_dir = Path(__file__).resolve().parent / "tests"
    return int(pytest.main([str(tests_dir), "-q"] + (args.pytest_args or [])))


def cmd_make_dataset(args) -> int:
    from populate_dataset import populate

    config = MatchConfig.from_file(args.config)
    populate(args.out, args.pairs, args.seed, config)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalematch", description="Detector-free image matching with patch pruning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a model")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="Dataset root; seeded synthetic pairs if omitted")
    p.add_argument("--lenient", action="store_true", help="Skip malformed pairs instead of failing")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="Match one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta-c", type=float)
    p.add_argument("--theta-p", type=float)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval-homography", help="Corner-error AUC on homography pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--thresholds", default="3,5,10")
    p.add_argument("--report", default="report.txt")
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_eval_homography)

    p = sub.add_parser("eval-pose", help="Pose-error AUC on pose+depth pairs")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--thresholds", default="5,10,20")
    p.add_argument("--poses", help="Precomputed poses: name followed by 9 rotation and 3 translation numbers")
    p.add_argument("--report")
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_eval_pose)

    p = sub.add_parser("export-masks", help="Write per-layer pruning masks as grayscale PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_masks)

    p = sub.add_parser("selftest", help="Run the test suites")
    p.add_argument("pytest_args", nargs="*")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("make-dataset", help="Write seeded synthetic homography pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_make_dataset)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MatchError, FileNotFoundError, ValueError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
