"""Tests for the on-disk dataset layout."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from nasgs.dataset import Dataset, SonarFrame, default_split, load_dataset, write_dataset
from nasgs.errors import DatasetError
from nasgs.models import Pose, SonarIntrinsics


@pytest.fixture
def intrinsics() -> SonarIntrinsics:
    """Tiny 6 x 5 sensor."""
    return SonarIntrinsics.from_fov(min_range=1.0, max_range=4.0, height=6, width=5)


def make_frames(count: int, intrinsics: SonarIntrinsics) -> list[SonarFrame]:
    rng = np.random.default_rng(0)
    return [
        SonarFrame(
            index=i,
            image=rng.uniform(size=(intrinsics.height, intrinsics.width)),
            pose=Pose(rotation=np.eye(3), translation=[-float(i), 0.0, 0.0]),
        )
        for i in range(count)
    ]


class TestDefaultSplit:
    """Test the hold-out split."""

    def test_every_eighth(self) -> None:
        """Test positions 7 and 15 go to test."""
        train, test = default_split(list(range(16)))
        assert test == [7, 15]
        assert len(train) == 14

    def test_positions_not_indices(self) -> None:
        """Test the split follows list positions."""
        indices = [10 * i for i in range(9)]
        _, test = default_split(indices)
        assert test == [70]

    def test_short_sequence(self) -> None:
        """Test fewer than eight frames are all training frames."""
        assert default_split([0, 1, 2]) == ([0, 1, 2], [])


class TestDataset:
    """Test dataset validation and accessors."""

    def test_default_split_applied(self, intrinsics: SonarIntrinsics) -> None:
        """Test a missing split falls back to the hold-out rule."""
        dataset = Dataset(make_frames(9, intrinsics), intrinsics)
        assert dataset.test_indices == [7]
        assert len(dataset.train_frames()) == 8
        assert [f.index for f in dataset.split_frames("test")] == [7]
        assert len(dataset.split_frames("all")) == 9

    def test_unknown_split_name(self, intrinsics: SonarIntrinsics) -> None:
        """Test an unknown split name raises."""
        with pytest.raises(DatasetError, match="Unknown split"):
            Dataset(make_frames(2, intrinsics), intrinsics).split_frames("val")

    def test_image_shape(self, intrinsics: SonarIntrinsics) -> None:
        """Test images must match the intrinsics."""
        frames = make_frames(2, intrinsics)
        frames[1].image = np.zeros((3, 3))
        with pytest.raises(DatasetError, match="Frame 1 has shape"):
            Dataset(frames, intrinsics)

    def test_duplicate_indices(self, intrinsics: SonarIntrinsics) -> None:
        """Test repeated frame indices raise."""
        frames = make_frames(2, intrinsics)
        frames[1].index = 0
        with pytest.raises(DatasetError, match="unique"):
            Dataset(frames, intrinsics)

    def test_unknown_split_index(self, intrinsics: SonarIntrinsics) -> None:
        """Test a split naming a missing frame raises."""
        with pytest.raises(DatasetError, match="unknown frames"):
            Dataset(make_frames(2, intrinsics), intrinsics, train_indices=[0, 5])

    def test_overlapping_split(self, intrinsics: SonarIntrinsics) -> None:
        """Test a frame in both splits raises."""
        with pytest.raises(DatasetError, match="overlap"):
            Dataset(make_frames(2, intrinsics), intrinsics, train_indices=[0, 1], test_indices=[1])

    def test_missing_frame(self, intrinsics: SonarIntrinsics) -> None:
        """Test looking up an absent frame raises."""
        with pytest.raises(DatasetError, match="No frame with index 9"):
            Dataset(make_frames(2, intrinsics), intrinsics).frame(9)

    def test_scene_extent(self, intrinsics: SonarIntrinsics) -> None:
        """Test the extent is 1.1 x the largest distance to the centroid."""
        dataset = Dataset(make_frames(3, intrinsics), intrinsics, train_indices=[0, 1, 2])
        assert dataset.scene_extent() == pytest.approx(1.1)

    def test_single_view_extent(self, intrinsics: SonarIntrinsics) -> None:
        """Test one viewpoint falls back to max_range."""
        dataset = Dataset(make_frames(1, intrinsics), intrinsics)
        assert dataset.scene_extent() == 4.0


class TestDatasetFiles:
    """Test writing and loading dataset directories."""

    def test_round_trip(self, tmp_path: Path, intrinsics: SonarIntrinsics) -> None:
        """Test images, poses, split and ground truth come back."""
        gt = np.random.default_rng(1).normal(size=(10, 3))
        dataset = Dataset(
            make_frames(3, intrinsics), intrinsics, train_indices=[0, 2], test_indices=[1], gt_points=gt
        )
        root = write_dataset(dataset, tmp_path / "data")
        assert (root / "images" / "00002.png").is_file()
        back = load_dataset(root)
        assert back.intrinsics == intrinsics
        assert back.train_indices == [0, 2]
        assert back.test_indices == [1]
        for original, loaded in zip(dataset.frames, back.frames, strict=True):
            np.testing.assert_allclose(loaded.image, original.image, atol=1e-5)
            np.testing.assert_array_equal(loaded.pose.translation, original.pose.translation)
        assert back.gt_points is not None
        np.testing.assert_allclose(back.gt_points, gt, rtol=1e-6, atol=1e-6)

    def test_missing_directory(self, tmp_path: Path) -> None:
        """Test a missing directory raises."""
        with pytest.raises(DatasetError, match="not found"):
            load_dataset(tmp_path / "absent")

    def test_missing_poses(self, tmp_path: Path, intrinsics: SonarIntrinsics) -> None:
        """Test a dataset without poses.json raises."""
        root = write_dataset(Dataset(make_frames(2, intrinsics), intrinsics), tmp_path / "data")
        (root / "poses.json").unlink()
        with pytest.raises(DatasetError, match="Missing dataset file"):
            load_dataset(root)

    def test_invalid_pose(self, tmp_path: Path, intrinsics: SonarIntrinsics) -> None:
        """Test a non-orthonormal rotation raises DatasetError."""
        root = write_dataset(Dataset(make_frames(1, intrinsics), intrinsics), tmp_path / "data")
        records = json.loads((root / "poses.json").read_text())
        records[0]["R"] = [2.0, 0, 0, 0, 1, 0, 0, 0, 1]
        (root / "poses.json").write_text(json.dumps(records))
        with pytest.raises(DatasetError, match="Invalid pose record"):
            load_dataset(root)

    def test_missing_image(self, tmp_path: Path, intrinsics: SonarIntrinsics) -> None:
        """Test a pose without an image raises."""
        root = write_dataset(Dataset(make_frames(2, intrinsics), intrinsics), tmp_path / "data")
        (root / "images" / "00001.png").unlink()
        with pytest.raises(DatasetError, match="Image not found"):
            load_dataset(root)
