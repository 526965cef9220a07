import numpy as np
import pytest
import torch

from scalematch.dataset import (
    load_dataset,
    read_depth,
    read_homography,
    read_image,
    read_pose,
    write_depth,
    write_homography,
    write_image,
    write_pair,
    write_pose,
)
from scalematch.errors import DatasetError
from scalematch.supervision import GroundTruthGeometry, ground_truth_coarse
from scalematch.synthetic import ImagePair


def _pair(name="p0", size=(64, 64)):
    image = torch.rand(3, *size, generator=torch.Generator().manual_seed(0))
    return ImagePair(image_a=image, image_b=image.clone(), name=name)


def _pose_geometry(size=(32, 32)):
    intrinsics = np.array([[40.0, 0.0, 15.5], [0.0, 42.0, 15.5], [0.0, 0.0, 1.0]])
    depth = np.random.default_rng(0).uniform(1.0, 10.0, size=size)
    return GroundTruthGeometry(
        rotation_a=np.eye(3), translation_a=np.zeros(3),
        rotation_b=np.eye(3), translation_b=np.array([0.1, -0.2, 0.3]),
        depth_a=depth, depth_b=depth,
        intrinsics_a=intrinsics, intrinsics_b=intrinsics,
    )


def test_empty_dataset_yields_nothing(tmp_path):
    (tmp_path / "pairs").mkdir()
    assert list(load_dataset(str(tmp_path))) == []


def test_missing_root_raises(tmp_path):
    with pytest.raises(DatasetError):
        list(load_dataset(str(tmp_path / "nowhere")))


def test_identity_pair_loads_with_diagonal_labels(tmp_path):
    write_pair(str(tmp_path), _pair(), GroundTruthGeometry(homography=np.eye(3)))
    [(pair, geometry)] = list(load_dataset(str(tmp_path)))
    assert pair.name == "p0" and pair.size_a == (64, 64)
    labels = ground_truth_coarse(geometry, pair.size_a, pair.size_b)
    assert np.array_equal(labels.matches[:, 0], labels.matches[:, 1])
    assert len(labels.matches) == 64


def test_pairs_are_sorted_by_name(tmp_path):
    for name in ("b", "c", "a"):
        write_pair(str(tmp_path), _pair(name), GroundTruthGeometry(homography=np.eye(3)))
    assert [p.name for p, _ in load_dataset(str(tmp_path))] == ["a", "b", "c"]


def test_homography_text_is_exact(tmp_path, rng):
    homography = rng.normal(size=(3, 3))
    write_homography(tmp_path / "gt.homog", homography)
    assert np.abs(read_homography(tmp_path / "gt.homog") - homography).max() <= 1e-15


def test_bad_homography_file(tmp_path):
    (tmp_path / "gt.homog").write_text("1 0 0\n0 1 0\n", encoding="utf-8")
    with pytest.raises(DatasetError):
        read_homography(tmp_path / "gt.homog")


def test_pose_and_depth_files(tmp_path):
    geometry = _pose_geometry()
    blocks = {"K_a": geometry.intrinsics_a, "R_a": geometry.rotation_a, "t_a": geometry.translation_a,
              "K_b": geometry.intrinsics_b, "R_b": geometry.rotation_b, "t_b": geometry.translation_b}
    write_pose(tmp_path / "gt.pose", blocks)
    parsed = read_pose(tmp_path / "gt.pose")
    for key, value in blocks.items():
        assert np.array_equal(parsed[key], np.asarray(value).reshape(parsed[key].shape))

    write_depth(tmp_path / "depth.bin", geometry.depth_a)
    raw = (tmp_path / "depth.bin").read_bytes()
    assert np.array_equal(np.frombuffer(raw[:12], dtype="<i4"), [32, 32, 1])
    assert np.array_equal(read_depth(tmp_path / "depth.bin"), geometry.depth_a.astype(np.float32))


def test_truncated_depth(tmp_path):
    write_depth(tmp_path / "depth.bin", np.ones((4, 4)))
    (tmp_path / "depth.bin").write_bytes((tmp_path / "depth.bin").read_bytes()[:-4])
    with pytest.raises(DatasetError):
        read_depth(tmp_path / "depth.bin")


def test_pose_pair_written_and_loaded(tmp_path):
    write_pair(str(tmp_path), _pair("pose", (32, 32)), _pose_geometry())
    [(_, geometry)] = list(load_dataset(str(tmp_path)))
    assert not geometry.is_homography
    assert np.allclose(geometry.translation_b, [0.1, -0.2, 0.3])


def test_image_round_trip_quantizes_to_8_bits(tmp_path):
    image = torch.rand(3, 16, 24)
    write_image(tmp_path / "x.png", image)
    loaded = read_image(tmp_path / "x.png")
    assert loaded.shape == (3, 16, 24)
    assert float((loaded - image).abs().max()) <= 0.5 / 255 + 1e-6


def test_strict_and_lenient_loading(tmp_path):
    write_pair(str(tmp_path), _pair("good"), GroundTruthGeometry(homography=np.eye(3)))
    broken = write_pair(str(tmp_path), _pair("broken"), GroundTruthGeometry(homography=np.eye(3)))
    (broken / "gt.homog").unlink()

    with pytest.raises(DatasetError, match="broken"):
        list(load_dataset(str(tmp_path)))
    assert [p.name for p, _ in load_dataset(str(tmp_path), strict=False)] == ["good"]


def test_missing_image_is_reported(tmp_path):
    pair_dir = write_pair(str(tmp_path), _pair("p"), GroundTruthGeometry(homography=np.eye(3)))
    (pair_dir / "b.png").unlink()
    with pytest.raises(DatasetError):
        list(load_dataset(str(tmp_path)))
