"""
Surface reconstruction from a Gaussian scene and geometric accuracy metrics.

Gaussians are sampled into a point cloud, the points are deposited into a
voxel density grid and the iso-surface is extracted with marching cubes.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import EmptyCloudError, EmptyMeshError, IndexOutOfRangeError
from .gaussians import GaussianScene, quaternion_to_rotation, save_points_ply
from .models import ReconstructionConfig

logger = logging.getLogger(__name__)

# Samples are truncated at this Mahalanobis radius
TRUNCATION = 3.0
MIN_TRIANGLE_AREA = 1e-12
GRID_PADDING = 2
DEFAULT_VOXELS_PER_EXTENT = 256
DEFAULT_THRESHOLD_FRACTION = 0.3

__all__ = [
    "TriangleMesh",
    "chamfer_distance",
    "extract_mesh",
    "hausdorff_distance",
    "marching_cubes",
    "sample_point_cloud",
    "save_obj",
    "save_points_ply",
    "save_stl",
]


@dataclass
class TriangleMesh:
    """Indexed triangle mesh in world coordinates (meters)."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = self.vertices.shape[0]
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            bad = int(self.triangles.max() if self.triangles.max() >= n else self.triangles.min())
            raise IndexOutOfRangeError("mesh vertex", bad, n)

    def __len__(self) -> int:
        return int(self.triangles.shape[0])

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        tri = self.vertices[self.triangles]
        return tri[:, 0], tri[:, 1], tri[:, 2]

    def face_normals(self) -> np.ndarray:
        """Unnormalized normals (b - a) x (c - a); length is twice the area."""
        a, b, c = self.corners()
        return np.cross(b - a, c - a)

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def signed_volume(self) -> float:
        """Enclosed volume, positive when faces wind counter-clockwise seen from outside."""
        a, b, c = self.corners()
        return float(np.einsum('ij,ij->i', a, np.cross(b, c)).sum() / 6.0)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles[:, ::-1])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


# Point cloud sampling

def _truncated_normal(rng: np.random.Generator, shape: tuple[int, int, int]) -> np.ndarray:
    """Standard 3D normal samples conditioned on norm <= TRUNCATION."""
    z = rng.standard_normal(shape)
    outside = np.linalg.norm(z, axis=-1) > TRUNCATION
    while outside.any():
        z[outside] = rng.standard_normal((int(outside.sum()), 3))
        outside = np.linalg.norm(z, axis=-1) > TRUNCATION
    return z


def sample_point_cloud(
    scene: GaussianScene,
    density_threshold: float | None = None,
    samples_per_gaussian: int = 32,
    seed: int = 0,
) -> np.ndarray:
    """
    Sample every Gaussian within three standard deviations and keep dense points.

    A sample p of Gaussian i survives when
    opacity_i * exp(-0.5 (p - mu_i)^T Sigma_i^-1 (p - mu_i)) > density_threshold.

    Args:
        scene: Trained scene
        density_threshold: Density cut (None = 0.3 x median opacity)
        samples_per_gaussian: Draws per Gaussian
        seed: Sampling seed

    Returns:
        (M, 3) surviving points

    Raises:
        EmptyCloudError: If the scene is empty or no sample survives
    """
    if len(scene) == 0:
        raise EmptyCloudError("Cannot sample an empty scene")
    opacity = scene.opacities
    if density_threshold is None:
        density_threshold = DEFAULT_THRESHOLD_FRACTION * float(np.median(opacity))
    rng = np.random.default_rng(seed)

    z = _truncated_normal(rng, (len(scene), samples_per_gaussian, 3))
    # Sigma = M M^T with M = R(q) diag(s), so p = mu + M z has Mahalanobis radius |z|
    M = quaternion_to_rotation(scene.unit_rotations()) * scene.scales[:, None, :]
    points = scene.means[:, None, :] + np.einsum('nij,nsj->nsi', M, z)
    density = opacity[:, None] * np.exp(-0.5 * np.sum(z * z, axis=-1))
    keep = density > density_threshold
    cloud = points[keep]
    if cloud.shape[0] == 0:
        raise EmptyCloudError(
            f"No sample exceeds density threshold {density_threshold:.4g}",
            details={"threshold": density_threshold, "max_opacity": float(opacity.max())},
        )
    logger.info(f"Sampled {cloud.shape[0]} points from {len(scene)} Gaussians")
    return cloud


# Meshing

def _deposit(points: np.ndarray, voxel_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear splat of unit weights into a padded grid; returns (grid, origin)."""
    lo = points.min(axis=0) - GRID_PADDING * voxel_size
    hi = points.max(axis=0) + GRID_PADDING * voxel_size
    shape = tuple(int(s) for s in np.ceil((hi - lo) / voxel_size).astype(np.int64) + 1)
    grid = np.zeros(shape)
    f = (points - lo) / voxel_size
    base = np.floor(f).astype(np.int64)
    frac = f - base
    for corner in range(8):
        offset = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        weight = np.prod(np.where(offset == 1, frac, 1.0 - frac), axis=1)
        idx = base + offset
        np.add.at(grid, (idx[:, 0], idx[:, 1], idx[:, 2]), weight)
    return grid, lo


def marching_cubes(points: np.ndarray, voxel_size: float, iso: float = 0.5) -> TriangleMesh:
    """
    Extract the iso-surface of the deposited point density.

    The density grid is normalized by its maximum before extraction. Faces are
    oriented outward (positive signed volume) and zero-area faces dropped.

    Args:
        points: (N, 3) samples
        voxel_size: Grid spacing in meters
        iso: Level in the normalized grid, in (0, 1)

    Returns:
        TriangleMesh

    Raises:
        EmptyCloudError: If there are no points
        EmptyMeshError: If no cell crosses the iso level
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyCloudError("Cannot mesh an empty point cloud")
    grid, origin = _deposit(pts, voxel_size)
    peak = float(grid.max())
    if peak <= 0.0:
        raise EmptyMeshError(iso, grid.shape)
    grid /= peak
    if not grid.min() < iso < grid.max():
        raise EmptyMeshError(iso, grid.shape)
    try:
        verts, faces, _, _ = measure.marching_cubes(grid, level=iso, spacing=(voxel_size,) * 3)
    except (ValueError, RuntimeError) as e:
        raise EmptyMeshError(iso, grid.shape) from e

    mesh = TriangleMesh(verts + origin, faces)
    mesh = TriangleMesh(mesh.vertices, mesh.triangles[mesh.areas() > MIN_TRIANGLE_AREA])
    if len(mesh) == 0:
        raise EmptyMeshError(iso, grid.shape)
    if mesh.signed_volume() < 0.0:
        mesh = mesh.flipped()
    logger.info(
        f"Marching cubes on {grid.shape} grid (voxel {voxel_size:.4g} m): "
        f"{mesh.vertices.shape[0]} vertices, {len(mesh)} triangles"
    )
    return mesh


def extract_mesh(
    scene: GaussianScene, config: ReconstructionConfig | None = None
) -> tuple[TriangleMesh, np.ndarray]:
    """
    Sample the scene and mesh the samples.

    Voxel size defaults to the largest side of the sample bounding box / 256.

    Returns:
        (mesh, sampled points)
    """
    config = config or ReconstructionConfig()
    points = sample_point_cloud(
        scene, config.density_threshold, config.samples_per_gaussian, config.seed
    )
    voxel = config.voxel_size
    if voxel is None:
        side = float(np.ptp(points, axis=0).max())
        voxel = max(side, 1e-6) / DEFAULT_VOXELS_PER_EXTENT
    return marching_cubes(points, voxel, config.iso), points


# Metrics

def _nearest(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Distance from every source point to its nearest target point."""
    dist, _ = cKDTree(target).query(source, k=1, workers=-1)
    return np.asarray(dist, dtype=np.float64)


def _clouds(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyCloudError(
            "Distance needs two non-empty point sets",
            details={"size_a": a.shape[0], "size_b": b.shape[0]},
        )
    return a, b


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """
    Symmetric mean nearest-neighbour distance (meters, not squared).

    Examples:
        >>> chamfer_distance(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]))
        1.0
    """
    a, b = _clouds(a, b)
    return 0.5 * float(_nearest(a, b).mean()) + 0.5 * float(_nearest(b, a).mean())


def hausdorff_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Largest nearest-neighbour distance over both directions."""
    a, b = _clouds(a, b)
    return max(float(_nearest(a, b).max()), float(_nearest(b, a).max()))


# Export

STL_RECORD = np.dtype(
    [('normal', '<f4', (3,)), ('vertices', '<f4', (3, 3)), ('attribute', '<u2')]
)


def save_stl(mesh: TriangleMesh, path: Path | str) -> None:
    """Write a binary STL (80-byte header, uint32 count, 50-byte records)."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    normals = mesh.face_normals()
    length = np.linalg.norm(normals, axis=1, keepdims=True)
    records = np.zeros(len(mesh), dtype=STL_RECORD)
    records['normal'] = normals / np.where(length > 0, length, 1.0)
    records['vertices'] = mesh.vertices[mesh.triangles]
    with out.open('wb') as f:
        f.write(b'nasgs mesh'.ljust(80, b'\0'))
        f.write(np.uint32(len(mesh)).astype('<u4').tobytes())
        f.write(records.tobytes())


def save_obj(mesh: TriangleMesh, path: Path | str) -> None:
    """Write an ASCII OBJ with 1-based face indices."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open('w') as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles + 1:
            f.write(f"f {t[0]} {t[1]} {t[2]}\n")
