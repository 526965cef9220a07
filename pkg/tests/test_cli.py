from pathlib import Path

import numpy as np
import pytest
import torch

import cli
from scalematch.dataset import write_pair
from scalematch.supervision import GroundTruthGeometry
from scalematch.synthetic import ImagePair

CONFIG = """\
preset=toy
c_coarse=32
c_fine=16
heads=2
blocks_per_stage=1
image_size=64
num_pairs=2
steps={steps}
checkpoint_every=1
"""


@pytest.fixture
def workspace(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text(CONFIG.format(steps=0), encoding="utf-8")
    assert cli.main(["make-dataset", "--out", str(tmp_path / "data"), "--pairs", "2", "--config", str(config)]) == 0
    assert cli.main(["train", "--config", str(config), "--out", str(tmp_path / "run"),
                     "--dataset", str(tmp_path / "data")]) == 0
    return tmp_path


def test_make_dataset_layout(workspace):
    pairs = sorted(p.name for p in (workspace / "data" / "pairs").iterdir())
    assert pairs == ["synthetic_000000", "synthetic_000001"]
    for name in ("a.png", "b.png", "gt.homog"):
        assert (workspace / "data" / "pairs" / pairs[0] / name).is_file()


def test_train_writes_checkpoint(workspace):
    assert (workspace / "run" / "checkpoint.bin").is_file()
    assert (workspace / "run" / "metrics.csv").is_file()


def test_match_and_export_masks(workspace):
    pair_dir = workspace / "data" / "pairs" / "synthetic_000000"
    common = ["--checkpoint", str(workspace / "run" / "checkpoint.bin"),
              "--image-a", str(pair_dir / "a.png"), "--image-b", str(pair_dir / "b.png")]
    assert cli.main(["match", *common, "--out", str(workspace / "matches.txt"), "--theta-c", "0.01"]) == 0
    assert (workspace / "matches.txt").is_file()

    assert cli.main(["export-masks", *common, "--out", str(workspace / "masks")]) == 0
    names = sorted(p.name for p in (workspace / "masks").iterdir())
    assert names == [f"mask_{s}_layer{l}.png" for s in "ab" for l in range(3)]


def test_eval_homography_report(workspace):
    report = workspace / "report.txt"
    code = cli.main(["eval-homography", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                     "--dataset", str(workspace / "data"), "--report", str(report)])
    assert code == 0
    assert "AUC@3" in report.read_text(encoding="utf-8")
    assert report.with_suffix(".png").is_file() and report.with_suffix(".csv").is_file()


def test_eval_pose_with_precomputed_poses(tmp_path):
    size = (32, 32)
    intrinsics = np.array([[40.0, 0.0, 15.5], [0.0, 40.0, 15.5], [0.0, 0.0, 1.0]])
    geometry = GroundTruthGeometry(
        rotation_a=np.eye(3), translation_a=np.zeros(3),
        rotation_b=np.eye(3), translation_b=np.array([1.0, 0.0, 0.0]),
        depth_a=np.full(size, 4.0), depth_b=np.full(size, 4.0),
        intrinsics_a=intrinsics, intrinsics_b=intrinsics,
    )
    image = torch.rand(3, *size)
    write_pair(str(tmp_path / "data"), ImagePair(image, image.clone(), name="p0"), geometry)
    poses = tmp_path / "poses.txt"
    poses.write_text("p0 1 0 0 0 1 0 0 0 1 1 0 0\n", encoding="utf-8")

    report = tmp_path / "pose.txt"
    code = cli.main(["eval-pose", "--dataset", str(tmp_path / "data"), "--poses", str(poses), "--report", str(report)])
    assert code == 0
    assert "1.0000" in report.read_text(encoding="utf-8")


def test_eval_pose_needs_a_source(tmp_path):
    (tmp_path / "data").mkdir()
    assert cli.main(["eval-pose", "--dataset", str(tmp_path / "data")]) == 2


def test_missing_checkpoint_reports_error(tmp_path, capsys):
    code = cli.main(["match", "--checkpoint", str(tmp_path / "none.bin"), "--image-a", "a.png",
                     "--image-b", "b.png", "--out", str(tmp_path / "m.txt")])
    assert code == 1
    assert "❌" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["train", "--config", str(Path(tmp_path) / "absent.cfg"), "--out", str(tmp_path)]) == 1
