"""Tests for pydantic models: poses, intrinsics, configs, primitives and reports."""

from __future__ import annotations

import math

import numpy as np
import pytest
from pydantic import ValidationError

from nasgs.geometry import to_pixel
from nasgs.models import (
    BoxPrimitive,
    ImageScore,
    MeshPrimitive,
    MetricReport,
    Pose,
    RasterSettings,
    SceneSpec,
    SonarIntrinsics,
    SpherePrimitive,
    TrainConfig,
)


class TestPose:
    """Test rigid pose validation."""

    def test_identity(self) -> None:
        """Test the identity pose sits at the origin."""
        pose = Pose.identity()
        np.testing.assert_array_equal(pose.rotation, np.eye(3))
        np.testing.assert_array_equal(pose.position, np.zeros(3))

    def test_position(self) -> None:
        """Test the sonar origin is -R^T t."""
        rotation = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        pose = Pose(rotation=rotation, translation=[1.0, 2.0, 3.0])
        np.testing.assert_allclose(pose.position, -rotation.T @ np.array([1.0, 2.0, 3.0]))

    def test_rejects_non_orthonormal(self) -> None:
        """Test a scaled matrix is refused."""
        with pytest.raises(ValidationError, match="orthonormal"):
            Pose(rotation=2.0 * np.eye(3), translation=np.zeros(3))

    def test_rejects_reflection(self) -> None:
        """Test a determinant of -1 is refused."""
        with pytest.raises(ValidationError, match="determinant"):
            Pose(rotation=np.diag([1.0, 1.0, -1.0]), translation=np.zeros(3))

    def test_rejects_non_finite_translation(self) -> None:
        """Test NaN translations are refused."""
        with pytest.raises(ValidationError, match="finite"):
            Pose(rotation=np.eye(3), translation=[0.0, float("nan"), 0.0])

    def test_record_round_trip(self) -> None:
        """Test the poses.json record layout."""
        pose = Pose(rotation=np.eye(3), translation=[0.5, -1.0, 2.0])
        record = pose.to_record(7)
        assert record["index"] == 7
        assert len(record["R"]) == 9
        back = Pose.from_record(record)
        np.testing.assert_array_equal(back.translation, pose.translation)

    def test_frozen_arrays(self) -> None:
        """Test stored arrays are read-only."""
        pose = Pose.identity()
        with pytest.raises(ValueError):
            pose.translation[0] = 1.0


class TestSonarIntrinsics:
    """Test the standard pixel layout."""

    def test_range_rows(self) -> None:
        """Test min_range maps to the top edge and max_range to the bottom edge."""
        intr = SonarIntrinsics.from_fov(min_range=1.0, max_range=5.0, height=40, width=32)
        top = to_pixel(intr.polar_transform, np.array([1.0, 0.0]))
        bottom = to_pixel(intr.polar_transform, np.array([5.0, 0.0]))
        assert top[1] == pytest.approx(-0.5)
        assert bottom[1] == pytest.approx(39.5)
        assert top[0] == pytest.approx(15.5)

    def test_azimuth_columns(self) -> None:
        """Test positive azimuth lands on the left edge."""
        intr = SonarIntrinsics.from_fov(azimuth_fov=math.radians(60.0), height=10, width=20)
        left = to_pixel(intr.polar_transform, np.array([3.0, math.radians(30.0)]))
        right = to_pixel(intr.polar_transform, np.array([3.0, -math.radians(30.0)]))
        assert left[0] == pytest.approx(-0.5)
        assert right[0] == pytest.approx(19.5)

    def test_default_ea_size(self) -> None:
        """Test the elevation image keeps square angular pixels."""
        intr = SonarIntrinsics.from_fov(
            azimuth_fov=math.radians(90.0), elevation_fov=math.radians(20.0), width=90
        )
        assert intr.ea_width == 90
        assert intr.ea_height == 20

    def test_rejects_inverted_ranges(self) -> None:
        """Test max_range must exceed min_range."""
        base = SonarIntrinsics.from_fov(height=10, width=10)
        fields = {**base.model_dump(), "min_range": 5.0, "max_range": 5.0}
        with pytest.raises(ValidationError, match="must exceed"):
            SonarIntrinsics.model_validate(fields)


class TestConfigModels:
    """Test configuration records."""

    def test_train_defaults(self) -> None:
        """Test the documented defaults."""
        config = TrainConfig()
        assert config.stage1_iterations == 7000
        assert config.stage2_iterations == 8000
        assert config.batch_size == 8
        assert config.lambda_dssim == 0.2
        assert config.novel_view_noise == "clean"

    def test_novel_view_noise_values(self) -> None:
        """Test only clean and nearest are accepted."""
        assert TrainConfig(novel_view_noise="nearest").novel_view_noise == "nearest"
        with pytest.raises(ValidationError, match="novel_view_noise"):
            TrainConfig(novel_view_noise="random")

    def test_learning_rates_scale_means(self) -> None:
        """Test the mean rate scales with the scene extent."""
        rates = TrainConfig().learning_rates(10.0)
        assert rates["means"] == pytest.approx(1.6e-3)
        assert rates["log_scales"] == 5e-3

    def test_unknown_field(self) -> None:
        """Test extra keys are refused."""
        with pytest.raises(ValidationError):
            RasterSettings(tile=8)

    def test_raster_bounds(self) -> None:
        """Test out-of-range raster constants are refused."""
        with pytest.raises(ValidationError):
            RasterSettings(alpha_max=1.5)


class TestPrimitives:
    """Test simulator primitives."""

    def test_scene_discriminator(self) -> None:
        """Test primitives are parsed by kind."""
        spec = SceneSpec.model_validate(
            {
                "primitives": [
                    {"kind": "sphere", "center": [3, 0, 0], "radius": 1.0},
                    {"kind": "box", "center": [0, 0, 0], "half_extents": [1, 1, 1]},
                ]
            }
        )
        assert isinstance(spec.primitives[0], SpherePrimitive)
        assert isinstance(spec.primitives[1], BoxPrimitive)
        assert spec.name == "custom"

    def test_box_half_extents(self) -> None:
        """Test zero half extents are refused."""
        with pytest.raises(ValidationError, match="half_extents"):
            BoxPrimitive(center=(0, 0, 0), half_extents=(1, 0, 1))

    def test_mesh_indices(self) -> None:
        """Test triangles must reference existing vertices."""
        with pytest.raises(ValidationError, match="outside"):
            MeshPrimitive(vertices=[(0, 0, 0), (1, 0, 0), (0, 1, 0)], triangles=[(0, 1, 3)])

    def test_sphere_radius(self) -> None:
        """Test the radius must be positive."""
        with pytest.raises(ValidationError):
            SpherePrimitive(center=(0, 0, 0), radius=0.0)


class TestReports:
    """Test metric report serialization."""

    def test_infinite_psnr_serialized(self) -> None:
        """Test identical images serialize PSNR as "inf"."""
        score = ImageScore(index=0, psnr=math.inf, ssim=1.0)
        assert score.model_dump(mode="json")["psnr"] == "inf"
        assert ImageScore(index=1, psnr=20.0, ssim=0.5).model_dump(mode="json")["psnr"] == 20.0

    def test_ssim_bounded(self) -> None:
        """Test SSIM above 1 is refused."""
        with pytest.raises(ValidationError):
            ImageScore(index=0, psnr=1.0, ssim=1.5)

    def test_report_defaults(self) -> None:
        """Test an empty report."""
        assert MetricReport(mean_psnr=0.0, mean_ssim=0.0).per_image == []
