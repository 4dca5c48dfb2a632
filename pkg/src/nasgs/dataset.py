"""
Sonar datasets on disk.

Layout:
    images/NNNNN.png   16-bit grayscale polar images
    poses.json         [{"index", "R" (9 floats row-major), "t" (3 floats)}, ...]
    intrinsics.json    SonarIntrinsics fields (SI units, radians)
    split.json         {"train": [...], "test": [...]} (optional)
    gt.ply             ground-truth surface samples (optional)
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from .errors import DatasetError
from .gaussians import load_points_ply, save_points_ply
from .images import load_image_png, save_image_png
from .models import Pose, SonarIntrinsics

logger = logging.getLogger(__name__)

# Every TEST_HOLDOUT-th frame (positions 7, 15, ...) is a test frame when no split is stored
TEST_HOLDOUT = 8


@dataclass
class SonarFrame:
    """One polar image and the pose it was captured from."""

    index: int
    image: np.ndarray
    pose: Pose


@dataclass
class Dataset:
    """Frames, intrinsics and the train/test split (frame indices)."""

    frames: list[SonarFrame]
    intrinsics: SonarIntrinsics
    train_indices: list[int] = field(default_factory=list)
    test_indices: list[int] = field(default_factory=list)
    gt_points: np.ndarray | None = None

    def __post_init__(self) -> None:
        shape = (self.intrinsics.height, self.intrinsics.width)
        for frame in self.frames:
            if frame.image.shape != shape:
                raise DatasetError(
                    f"Frame {frame.index} has shape {frame.image.shape}, intrinsics declare {shape}",
                    details={"index": frame.index},
                )
        known = {f.index for f in self.frames}
        if len(known) != len(self.frames):
            raise DatasetError("Frame indices must be unique")
        if not self.train_indices and not self.test_indices:
            self.train_indices, self.test_indices = default_split([f.index for f in self.frames])
        unknown = (set(self.train_indices) | set(self.test_indices)) - known
        if unknown:
            raise DatasetError(f"Split references unknown frames {sorted(unknown)}")
        if set(self.train_indices) & set(self.test_indices):
            raise DatasetError("Train and test splits overlap")

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, index: int) -> SonarFrame:
        for f in self.frames:
            if f.index == index:
                return f
        raise DatasetError(f"No frame with index {index}", details={"index": index})

    def train_frames(self) -> list[SonarFrame]:
        return [self.frame(i) for i in self.train_indices]

    def test_frames(self) -> list[SonarFrame]:
        return [self.frame(i) for i in self.test_indices]

    def split_frames(self, split: str) -> list[SonarFrame]:
        """Frames of 'train', 'test' or 'all'."""
        if split == "train":
            return self.train_frames()
        if split == "test":
            return self.test_frames()
        if split == "all":
            return list(self.frames)
        raise DatasetError(f"Unknown split '{split}'", details={"split": split})

    def scene_extent(self) -> float:
        """
        Radius of the training sensor positions around their centroid (x1.1).

        Falls back to max_range for a single viewpoint.
        """
        positions = np.array([f.pose.position for f in self.train_frames() or self.frames])
        if positions.shape[0] < 2:
            return float(self.intrinsics.max_range)
        radius = float(np.linalg.norm(positions - positions.mean(axis=0), axis=1).max())
        return max(radius * 1.1, 1e-3)


def default_split(indices: list[int]) -> tuple[list[int], list[int]]:
    """Hold out every TEST_HOLDOUT-th frame for testing."""
    test = [idx for pos, idx in enumerate(indices) if pos % TEST_HOLDOUT == TEST_HOLDOUT - 1]
    train = [idx for idx in indices if idx not in set(test)]
    return train, test


def _read_json(path: Path) -> Any:
    if not path.is_file():
        raise DatasetError(f"Missing dataset file: {path}", details={"path": str(path)})
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"Malformed JSON in {path}: {e}", details={"path": str(path)}) from e


def image_path(root: Path, index: int) -> Path:
    return root / "images" / f"{index:05d}.png"


def load_dataset(path: Path | str) -> Dataset:
    """
    Load a dataset directory.

    Args:
        path: Dataset root

    Returns:
        Dataset with validated intrinsics, poses and images

    Raises:
        DatasetError: On any missing or malformed file
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory not found: {root}", details={"path": str(root)})
    try:
        intrinsics = SonarIntrinsics.model_validate(_read_json(root / "intrinsics.json"))
    except ValidationError as e:
        raise DatasetError(f"Invalid intrinsics.json: {e.errors(include_url=False)[0]['msg']}") from e

    records = _read_json(root / "poses.json")
    if not isinstance(records, list) or not records:
        raise DatasetError("poses.json must be a non-empty array", details={"path": str(root)})
    frames: list[SonarFrame] = []
    for record in records:
        try:
            pose = Pose.from_record(record)
            index = int(record["index"])
        except (KeyError, TypeError, ValueError, ValidationError) as e:
            raise DatasetError(f"Invalid pose record {record!r}: {e}") from e
        frames.append(SonarFrame(index, load_image_png(image_path(root, index)), pose))

    train: list[int] = []
    test: list[int] = []
    split_file = root / "split.json"
    if split_file.is_file():
        split = _read_json(split_file)
        train = [int(i) for i in split.get("train", [])]
        test = [int(i) for i in split.get("test", [])]

    gt_file = root / "gt.ply"
    gt_points = load_points_ply(gt_file) if gt_file.is_file() else None
    dataset = Dataset(frames, intrinsics, train, test, gt_points)
    logger.info(
        f"Loaded {len(frames)} frames from {root} "
        f"({len(dataset.train_indices)} train, {len(dataset.test_indices)} test)"
    )
    return dataset


def write_dataset(dataset: Dataset, path: Path | str) -> Path:
    """
    Write a dataset in the on-disk layout.

    Returns:
        Dataset root path
    """
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for frame in dataset.frames:
        save_image_png(frame.image, image_path(root, frame.index))
    (root / "poses.json").write_text(
        json.dumps([f.pose.to_record(f.index) for f in dataset.frames], indent=2)
    )
    (root / "intrinsics.json").write_text(dataset.intrinsics.model_dump_json(indent=2))
    (root / "split.json").write_text(
        json.dumps({"train": dataset.train_indices, "test": dataset.test_indices}, indent=2)
    )
    if dataset.gt_points is not None:
        save_points_ply(dataset.gt_points, root / "gt.ply")
    logger.info(f"Wrote {len(dataset.frames)} frames to {root}")
    return root
