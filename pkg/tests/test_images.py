"""Tests for PNG and raw float image files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from nasgs.errors import DatasetError, ShapeMismatchError
from nasgs.images import load_image_bin, load_image_png, save_image_bin, save_image_png


class TestPng:
    """Test 16-bit grayscale PNG files."""

    def test_round_trip(self, tmp_path: Path) -> None:
        """Test values survive to 16-bit precision."""
        image = np.random.default_rng(0).uniform(size=(7, 9))
        save_image_png(image, tmp_path / "a.png")
        back = load_image_png(tmp_path / "a.png")
        assert back.shape == (7, 9)
        np.testing.assert_allclose(back, image, atol=0.5 / 65535 + 1e-12)

    def test_clipped(self, tmp_path: Path) -> None:
        """Test out-of-range values are clipped."""
        save_image_png(np.array([[-0.5, 1.5]]), tmp_path / "a.png")
        np.testing.assert_array_equal(load_image_png(tmp_path / "a.png"), [[0.0, 1.0]])

    def test_eight_bit(self, tmp_path: Path) -> None:
        """Test 8-bit files scale by 255."""
        Image.fromarray(np.array([[0, 255, 51]], dtype=np.uint8)).save(tmp_path / "a.png")
        np.testing.assert_allclose(load_image_png(tmp_path / "a.png"), [[0.0, 1.0, 0.2]])

    def test_rgb_refused(self, tmp_path: Path) -> None:
        """Test colour images raise DatasetError."""
        Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(tmp_path / "a.png")
        with pytest.raises(DatasetError, match="single-channel"):
            load_image_png(tmp_path / "a.png")

    def test_missing(self, tmp_path: Path) -> None:
        """Test a missing file raises DatasetError."""
        with pytest.raises(DatasetError, match="not found"):
            load_image_png(tmp_path / "absent.png")

    def test_not_two_dimensional(self, tmp_path: Path) -> None:
        """Test saving a volume raises."""
        with pytest.raises(ShapeMismatchError):
            save_image_png(np.zeros((2, 2, 2)), tmp_path / "a.png")


class TestRawImage:
    """Test float32 images with a JSON sidecar."""

    def test_round_trip(self, tmp_path: Path) -> None:
        """Test float32 precision and the sidecar contents."""
        image = np.random.default_rng(1).uniform(size=(4, 6))
        sidecar = save_image_bin(image, tmp_path / "a.bin")
        assert json.loads(sidecar.read_text()) == {"height": 4, "width": 6, "dtype": "<f4"}
        np.testing.assert_allclose(load_image_bin(tmp_path / "a.bin"), image, rtol=1e-7)

    def test_size_mismatch(self, tmp_path: Path) -> None:
        """Test a sidecar disagreeing with the data raises."""
        sidecar = save_image_bin(np.zeros((2, 2)), tmp_path / "a.bin")
        sidecar.write_text(json.dumps({"height": 3, "width": 2, "dtype": "<f4"}))
        with pytest.raises(DatasetError, match="sidecar declares 6"):
            load_image_bin(tmp_path / "a.bin")

    def test_missing_sidecar(self, tmp_path: Path) -> None:
        """Test a raw file without a sidecar raises."""
        (tmp_path / "a.bin").write_bytes(b"\x00" * 8)
        with pytest.raises(DatasetError):
            load_image_bin(tmp_path / "a.bin")
