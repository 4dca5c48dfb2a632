"""Tests for point cloud sampling, meshing and geometric accuracy."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from nasgs.errors import EmptyCloudError, IndexOutOfRangeError
from nasgs.gaussians import GaussianScene, quaternion_to_rotation
from nasgs.models import ReconstructionConfig
from nasgs.reconstruction import (
    STL_RECORD,
    TriangleMesh,
    chamfer_distance,
    extract_mesh,
    hausdorff_distance,
    marching_cubes,
    sample_point_cloud,
    save_obj,
    save_stl,
)

TETRA_VERTICES = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
TETRA_FACES = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])


def lattice(lo: float, hi: float, step: float) -> np.ndarray:
    axis = np.arange(lo, hi + 1e-9, step)
    return np.stack(np.meshgrid(axis, axis, axis, indexing='ij'), axis=-1).reshape(-1, 3)


def single_gaussian(opacity: float = 0.9) -> GaussianScene:
    q = np.array([0.9, 0.1, -0.3, 0.2])
    return GaussianScene(
        means=np.array([[1.0, -2.0, 0.5]]),
        log_scales=np.log([[0.3, 0.1, 0.05]]),
        rotations=(q / np.linalg.norm(q))[None, :],
        intensity_logits=np.zeros(1),
        opacity_logits=np.array([math.log(opacity / (1.0 - opacity))]),
    )


def mahalanobis(scene: GaussianScene, points: np.ndarray) -> np.ndarray:
    rotation = quaternion_to_rotation(scene.unit_rotations())[0]
    local = (points - scene.means[0]) @ rotation
    return np.linalg.norm(local / scene.scales[0], axis=1)


class TestSamplePointCloud:
    """Test density-filtered sampling."""

    def test_within_three_sigma(self) -> None:
        """Test every sample lies within Mahalanobis radius 3."""
        scene = single_gaussian()
        points = sample_point_cloud(scene, density_threshold=0.0, samples_per_gaussian=500)
        assert points.shape == (500, 3)
        assert mahalanobis(scene, points).max() <= 3.0 + 1e-9

    def test_threshold_filters(self) -> None:
        """Test surviving samples satisfy the density cut."""
        scene = single_gaussian(opacity=0.8)
        points = sample_point_cloud(scene, density_threshold=0.4, samples_per_gaussian=400)
        assert 0 < points.shape[0] < 400
        assert mahalanobis(scene, points).max() < math.sqrt(2.0 * math.log(2.0))

    def test_mean_of_samples(self) -> None:
        """Test samples centre on the Gaussian mean."""
        scene = single_gaussian()
        points = sample_point_cloud(scene, density_threshold=0.0, samples_per_gaussian=20000)
        np.testing.assert_allclose(points.mean(axis=0), scene.means[0], atol=0.01)

    def test_deterministic(self) -> None:
        """Test equal seeds give equal clouds."""
        scene = single_gaussian()
        np.testing.assert_array_equal(
            sample_point_cloud(scene, seed=5), sample_point_cloud(scene, seed=5)
        )

    def test_empty_scene(self) -> None:
        """Test an empty scene raises."""
        with pytest.raises(EmptyCloudError):
            sample_point_cloud(GaussianScene())

    def test_threshold_above_opacity(self) -> None:
        """Test a cut above every opacity raises."""
        with pytest.raises(EmptyCloudError, match="density threshold"):
            sample_point_cloud(single_gaussian(opacity=0.5), density_threshold=0.6)


class TestTriangleMesh:
    """Test mesh helpers."""

    def test_tetrahedron(self) -> None:
        """Test volume and areas of the unit tetrahedron."""
        mesh = TriangleMesh(TETRA_VERTICES, TETRA_FACES)
        assert mesh.signed_volume() == pytest.approx(1.0 / 6.0)
        assert mesh.flipped().signed_volume() == pytest.approx(-1.0 / 6.0)
        assert mesh.areas()[:3] == pytest.approx([0.5, 0.5, 0.5])

    def test_bad_index(self) -> None:
        """Test out-of-range vertex indices raise."""
        with pytest.raises(IndexOutOfRangeError, match="index 4"):
            TriangleMesh(TETRA_VERTICES, [[0, 1, 4]])


class TestMarchingCubes:
    """Test iso-surface extraction from point density."""

    def test_ball(self) -> None:
        """Test a solid ball of radius 1 gives a closed outward surface."""
        points = lattice(-1.0, 1.0, 0.05)
        points = points[np.linalg.norm(points, axis=1) <= 1.0]
        mesh = marching_cubes(points, voxel_size=0.1)
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert radii.min() > 0.85
        assert radii.max() < 1.15
        assert mesh.signed_volume() == pytest.approx(4.0 / 3.0 * math.pi, rel=0.15)

    def test_cube(self) -> None:
        """Test a solid cube keeps its bounds."""
        mesh = marching_cubes(lattice(-1.0, 1.0, 0.05), voxel_size=0.1)
        lo, hi = mesh.bounds()
        np.testing.assert_allclose(lo, -1.0, atol=0.15)
        np.testing.assert_allclose(hi, 1.0, atol=0.15)
        assert mesh.signed_volume() > 0.0

    def test_single_point(self) -> None:
        """Test one point gives a small blob around it."""
        point = np.array([[0.3, -0.2, 0.7]])
        mesh = marching_cubes(point, voxel_size=0.1)
        assert len(mesh) > 0
        assert np.linalg.norm(mesh.vertices - point, axis=1).max() <= 0.1 + 1e-9
        assert mesh.signed_volume() > 0.0

    def test_empty(self) -> None:
        """Test no points raise."""
        with pytest.raises(EmptyCloudError):
            marching_cubes(np.zeros((0, 3)), voxel_size=0.1)

    def test_extract_mesh(self) -> None:
        """Test sampling plus meshing of a compact Gaussian."""
        scene = GaussianScene.from_points(np.zeros((1, 3)), opacity=0.9, scales=np.array([0.3]))
        config = ReconstructionConfig(samples_per_gaussian=4000, voxel_size=0.1)
        mesh, points = extract_mesh(scene, config)
        assert points.shape[1] == 3
        assert len(mesh) > 0
        lo, hi = mesh.bounds()
        assert np.all(lo > -0.9)
        assert np.all(hi < 0.9)


class TestDistances:
    """Test Chamfer and Hausdorff distances."""

    def test_single_points(self) -> None:
        """Test two single points one metre apart."""
        assert chamfer_distance(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == 1.0
        assert hausdorff_distance(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == 1.0

    def test_identical(self) -> None:
        """Test identical clouds are zero apart."""
        points = np.random.default_rng(0).normal(size=(30, 3))
        assert chamfer_distance(points, points) == 0.0
        assert hausdorff_distance(points, points) == 0.0

    def test_asymmetric_sets(self) -> None:
        """Test an outlier counts once in Chamfer and fully in Hausdorff."""
        a = np.zeros((1, 3))
        b = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        assert chamfer_distance(a, b) == pytest.approx(0.75)
        assert hausdorff_distance(a, b) == pytest.approx(3.0)

    def test_brute_force(self) -> None:
        """Test against all-pairs distances."""
        rng = np.random.default_rng(1)
        a = rng.normal(size=(40, 3))
        b = rng.normal(size=(25, 3)) + 0.5
        pairwise = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
        expected = 0.5 * pairwise.min(axis=1).mean() + 0.5 * pairwise.min(axis=0).mean()
        assert chamfer_distance(a, b) == pytest.approx(expected, rel=1e-12)
        assert hausdorff_distance(a, b) == pytest.approx(
            max(pairwise.min(axis=1).max(), pairwise.min(axis=0).max()), rel=1e-12
        )

    def test_empty(self) -> None:
        """Test an empty cloud raises."""
        with pytest.raises(EmptyCloudError):
            chamfer_distance(np.zeros((0, 3)), np.zeros((2, 3)))


class TestExport:
    """Test STL and OBJ files."""

    def test_stl(self, tmp_path: Path) -> None:
        """Test header, count and triangle records."""
        mesh = TriangleMesh(TETRA_VERTICES, TETRA_FACES)
        save_stl(mesh, tmp_path / "mesh.stl")
        raw = (tmp_path / "mesh.stl").read_bytes()
        assert len(raw) == 84 + 50 * 4
        assert raw.startswith(b"nasgs mesh")
        assert int(np.frombuffer(raw, dtype='<u4', count=1, offset=80)[0]) == 4
        records = np.frombuffer(raw, dtype=STL_RECORD, offset=84)
        np.testing.assert_allclose(records['vertices'][3], TETRA_VERTICES[[1, 2, 3]])
        np.testing.assert_allclose(records['normal'][3], np.ones(3) / math.sqrt(3.0), rtol=1e-6)

    def test_obj(self, tmp_path: Path) -> None:
        """Test vertex and 1-based face lines."""
        save_obj(TriangleMesh(TETRA_VERTICES, TETRA_FACES), tmp_path / "mesh.obj")
        lines = (tmp_path / "mesh.obj").read_text().splitlines()
        assert sum(line.startswith("v ") for line in lines) == 4
        assert lines[4] == "f 1 3 2"
        assert lines[-1] == "f 2 3 4"
