"""
Scene representation: 3D Gaussians with factored covariance.

Parameters are stored unconstrained (log-scales, raw quaternion, logits) so any
optimizer step yields a valid Gaussian. Activations map them to the physical
quantities. Projection produces per-frame 2D splats for the rasterizer.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.spatial import cKDTree
from scipy.special import expit, logit

from .errors import DatasetError, EmptyCloudError, ShapeMismatchError
from .geometry import (
    cartesian_to_polar_elevation_batch,
    degenerate_mask,
    polar_elevation_jacobian_batch,
    projection_matrices,
    to_pixel_batch,
    world_to_sonar_batch,
)
from .models import Pose, RasterSettings, SonarIntrinsics

logger = logging.getLogger(__name__)

# Order of per-Gaussian parameter groups; optimizer state and PLY columns follow it
PARAMETER_NAMES = ("means", "log_scales", "rotations", "intensity_logits", "opacity_logits")

PLY_PROPERTIES = (
    "x", "y", "z",
    "log_scale_0", "log_scale_1", "log_scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "intensity_logit", "opacity_logit",
)

MIN_SCALE = 1e-7


# Quaternion helpers (w, x, y, z)

def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Normalize (N, 4) quaternions; zero rows become the identity."""
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    out = np.where(norms > 0, q / np.where(norms > 0, norms, 1.0), 0.0)
    out[norms[..., 0] == 0] = (1.0, 0.0, 0.0, 0.0)
    return out


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (N, 4) quaternions (normalized internally)."""
    u = normalize_quaternions(np.atleast_2d(q))
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    R = np.empty((u.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[:, 0, 1] = 2.0 * (x * y - w * z)
    R[:, 0, 2] = 2.0 * (x * z + w * y)
    R[:, 1, 0] = 2.0 * (x * y + w * z)
    R[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[:, 1, 2] = 2.0 * (y * z - w * x)
    R[:, 2, 0] = 2.0 * (x * z - w * y)
    R[:, 2, 1] = 2.0 * (y * z + w * x)
    R[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def rotation_derivatives(q_unit: np.ndarray) -> np.ndarray:
    """
    dR/dq for (N, 4) unit quaternions.

    Returns:
        (N, 4, 3, 3) array, one 3x3 derivative per quaternion component
    """
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=-1)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=-1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=-1)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1).reshape(-1, 4, 3, 3)


def build_covariance_batch(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(log_scales))^2 R^T for (N, 3) scales and (N, 4) quaternions."""
    R = quaternion_to_rotation(rotations)
    M = R * np.exp(np.asarray(log_scales, dtype=np.float64))[:, None, :]
    cov = np.einsum('nij,nkj->nik', M, M)
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


def build_covariance(log_scales: np.ndarray, q: np.ndarray) -> np.ndarray:
    """
    Build one 3D covariance from log-scales and a unit quaternion.

    Args:
        log_scales: 3-vector of log axis lengths
        q: Quaternion (w, x, y, z)

    Returns:
        3x3 symmetric positive definite matrix

    Examples:
        >>> build_covariance(np.array([np.log(2.0), 0.0, 0.0]), np.array([1.0, 0, 0, 0]))
        array([[4., 0., 0.],
               [0., 1., 0.],
               [0., 0., 1.]])
    """
    return build_covariance_batch(
        np.asarray(log_scales, dtype=np.float64).reshape(1, 3),
        np.asarray(q, dtype=np.float64).reshape(1, 4),
    )[0]


def nearest_neighbor_scales(points: np.ndarray, neighbors: int = 3) -> np.ndarray:
    """
    Isotropic scale per point: mean distance to its nearest neighbours.

    A lone point gets scale 1e-2 m.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < 2:
        return np.full(n, 1e-2)
    k = min(neighbors, n - 1)
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    mean = np.asarray(dist[:, 1:]).mean(axis=1)
    return np.maximum(mean, MIN_SCALE)


# Scene records

@dataclass(frozen=True)
class Gaussian3D:
    """One scene primitive in unconstrained parameters."""

    mean: np.ndarray
    log_scales: np.ndarray
    rotation: np.ndarray
    intensity_logit: float
    opacity_logit: float

    @property
    def intensity(self) -> float:
        return float(expit(self.intensity_logit))

    @property
    def opacity(self) -> float:
        return float(expit(self.opacity_logit))

    def covariance(self) -> np.ndarray:
        return build_covariance(self.log_scales, self.rotation)


@dataclass
class GaussianScene:
    """
    Flat array-of-fields container for N Gaussians.

    Mutation (optimizer steps, densification) must not overlap with projection.
    """

    means: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    log_scales: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rotations: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    intensity_logits: np.ndarray = field(default_factory=lambda: np.zeros(0))
    opacity_logits: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.intensity_logits = np.asarray(self.intensity_logits, dtype=np.float64).reshape(-1)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        for name in PARAMETER_NAMES[1:]:
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ShapeMismatchError(name, (n, *arr.shape[1:]), tuple(arr.shape))

    def __len__(self) -> int:
        return int(self.means.shape[0])

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3D]) -> "GaussianScene":
        """Stack individual Gaussians into a scene."""
        if not gaussians:
            return cls()
        return cls(
            means=np.stack([g.mean for g in gaussians]),
            log_scales=np.stack([g.log_scales for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            intensity_logits=np.array([g.intensity_logit for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
        )

    @classmethod
    def from_points(
        cls,
        points: np.ndarray,
        intensities: np.ndarray | float = 0.5,
        opacity: float = 0.1,
        scales: np.ndarray | None = None,
    ) -> "GaussianScene":
        """
        Seed one isotropic Gaussian per point.

        Args:
            points: (N, 3) world positions
            intensities: Per-point intensity in (0, 1) or one shared value
            opacity: Initial opacity in (0, 1)
            scales: Per-point isotropic scale; default is nearest-neighbour distance

        Returns:
            New scene with identity rotations
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = pts.shape[0]
        if scales is None:
            scales = nearest_neighbor_scales(pts)
        log_s = np.log(np.maximum(np.asarray(scales, dtype=np.float64), MIN_SCALE))
        inten = np.clip(np.broadcast_to(np.asarray(intensities, dtype=np.float64), (n,)), 1e-4, 1 - 1e-4)
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        return cls(
            means=pts.copy(),
            log_scales=np.repeat(log_s.reshape(-1, 1), 3, axis=1),
            rotations=rotations,
            intensity_logits=logit(inten),
            opacity_logits=np.full(n, float(logit(opacity))),
        )

    def gaussian(self, index: int) -> Gaussian3D:
        """Single Gaussian view by index."""
        return Gaussian3D(
            mean=self.means[index].copy(),
            log_scales=self.log_scales[index].copy(),
            rotation=self.rotations[index].copy(),
            intensity_logit=float(self.intensity_logits[index]),
            opacity_logit=float(self.opacity_logits[index]),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """Parameter arrays keyed by group name (shared, not copied)."""
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    def copy(self) -> "GaussianScene":
        return GaussianScene(**{name: getattr(self, name).copy() for name in PARAMETER_NAMES})

    def subset(self, selector: np.ndarray) -> "GaussianScene":
        """Scene holding the rows picked by a boolean mask or index array."""
        return GaussianScene(**{name: getattr(self, name)[selector].copy() for name in PARAMETER_NAMES})

    def concatenate(self, other: "GaussianScene") -> "GaussianScene":
        return GaussianScene(
            **{
                name: np.concatenate([getattr(self, name), getattr(other, name)])
                for name in PARAMETER_NAMES
            }
        )

    # Activations

    @property
    def intensities(self) -> np.ndarray:
        return np.asarray(expit(self.intensity_logits))

    @property
    def opacities(self) -> np.ndarray:
        return np.asarray(expit(self.opacity_logits))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def unit_rotations(self) -> np.ndarray:
        return normalize_quaternions(self.rotations)

    def covariances(self) -> np.ndarray:
        return build_covariance_batch(self.log_scales, self.rotations)

    def scene_extent(self) -> float:
        """Largest distance of a mean from the centroid (at least 1e-3 m)."""
        if len(self) == 0:
            return 1e-3
        centroid = self.means.mean(axis=0)
        return max(float(np.linalg.norm(self.means - centroid, axis=1).max()), 1e-3)


# PLY serialization

def save_ply(scene: GaussianScene, path: Path | str) -> None:
    """
    Write a scene as binary little-endian PLY.

    Args:
        scene: Scene to serialize
        path: Output file; parent directories are created
    """
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    elements = np.empty(len(scene), dtype=[(name, '<f4') for name in PLY_PROPERTIES])
    columns = np.concatenate(
        [
            scene.means,
            scene.log_scales,
            scene.rotations,
            scene.intensity_logits[:, None],
            scene.opacity_logits[:, None],
        ],
        axis=1,
    )
    for i, name in enumerate(PLY_PROPERTIES):
        elements[name] = columns[:, i]
    PlyData([PlyElement.describe(elements, 'vertex')], byte_order='<').write(str(out))
    logger.debug(f"Wrote {len(scene)} Gaussians to {out}")


def _read_vertex(path: Path | str) -> np.ndarray:
    source = Path(path)
    if not source.is_file():
        raise DatasetError(f"PLY file not found: {source}", details={"path": str(source)})
    try:
        ply = PlyData.read(str(source))
        return np.asarray(ply['vertex'].data)
    except (KeyError, ValueError, OSError) as e:
        raise DatasetError(f"Unreadable PLY {source}: {e}", details={"path": str(source)}) from e


def load_points_ply(path: Path | str) -> np.ndarray:
    """Read vertex positions (N, 3) from any PLY with x/y/z properties."""
    vertex = _read_vertex(path)
    names = vertex.dtype.names or ()
    if not {"x", "y", "z"} <= set(names):
        raise DatasetError(f"PLY {path} lacks x/y/z vertex properties")
    return np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)


def save_points_ply(points: np.ndarray, path: Path | str) -> None:
    """Write an (N, 3) point set as a binary PLY with x/y/z float properties."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    elements = np.empty(pts.shape[0], dtype=[("x", '<f4'), ("y", '<f4'), ("z", '<f4')])
    elements["x"], elements["y"], elements["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    PlyData([PlyElement.describe(elements, 'vertex')], byte_order='<').write(str(out))


def load_ply(path: Path | str) -> GaussianScene:
    """
    Read a scene PLY.

    Files carrying only x/y/z are accepted: each point becomes an isotropic
    Gaussian with nearest-neighbour scale, intensity 0.5 and opacity 0.1.

    Raises:
        DatasetError: If the file is missing or lacks vertex positions
    """
    vertex = _read_vertex(path)
    names = set(vertex.dtype.names or ())
    points = load_points_ply(path)
    if not set(PLY_PROPERTIES) <= names:
        logger.info(f"{path} holds plain points; assigning default Gaussian parameters")
        if points.shape[0] == 0:
            raise EmptyCloudError(f"PLY {path} contains no points")
        return GaussianScene.from_points(points)
    column = {name: np.asarray(vertex[name], dtype=np.float64) for name in PLY_PROPERTIES}
    return GaussianScene(
        means=points,
        log_scales=np.stack([column[f"log_scale_{i}"] for i in range(3)], axis=1),
        rotations=np.stack([column[f"rot_{i}"] for i in range(4)], axis=1),
        intensity_logits=column["intensity_logit"],
        opacity_logits=column["opacity_logit"],
    )


# Projection

@dataclass(frozen=True)
class Splat2D:
    """A Gaussian projected into one image frame."""

    mean: np.ndarray
    covariance: np.ndarray
    conic: np.ndarray
    range: float
    transmittance: float
    intensity: float
    opacity: float


class Culled(NamedTuple):
    """Marker returned for Gaussians outside the sensor frustum."""

    reason: str


class SplatPair(NamedTuple):
    polar: Splat2D
    elevation_azimuth: Splat2D


def conic_from_covariance(cov: np.ndarray) -> np.ndarray:
    """(N, 2, 2) SPD covariances to (N, 3) conics (a, b, c) of [[a, b], [b, c]]."""
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=-1)


@dataclass
class ProjectedSplats:
    """
    Visible Gaussians of a scene projected into both frames.

    Arrays are aligned with `indices`, the scene rows that survived culling.
    """

    indices: np.ndarray
    sonar_points: np.ndarray
    ranges: np.ndarray
    mean_polar: np.ndarray
    mean_ea: np.ndarray
    cov_polar: np.ndarray
    cov_ea: np.ndarray
    conic_polar: np.ndarray
    conic_ea: np.ndarray
    intensity: np.ndarray
    opacity: np.ndarray
    jacobians: np.ndarray
    A_polar: np.ndarray
    A_ea: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def splat(self, i: int, frame: str = "polar", transmittance: float = 1.0) -> Splat2D:
        """Splat2D record of row i in the given frame."""
        polar = frame == "polar"
        return Splat2D(
            mean=(self.mean_polar if polar else self.mean_ea)[i].copy(),
            covariance=(self.cov_polar if polar else self.cov_ea)[i].copy(),
            conic=(self.conic_polar if polar else self.conic_ea)[i].copy(),
            range=float(self.ranges[i]),
            transmittance=transmittance,
            intensity=float(self.intensity[i]),
            opacity=float(self.opacity[i]),
        )


def _outside(center: np.ndarray, half: np.ndarray, size: int, margin: float) -> np.ndarray:
    return (center + half < -0.5 - margin) | (center - half > size - 0.5 + margin)


def project_scene(
    scene: GaussianScene,
    pose: Pose,
    intrinsics: SonarIntrinsics,
    settings: RasterSettings | None = None,
    cull: bool = True,
) -> ProjectedSplats:
    """
    Project every Gaussian into the polar and elevation-azimuth frames.

    Degenerate Gaussians (near the sonar origin or z-axis) are always dropped.
    With cull=True, Gaussians whose 3-sigma pixel box plus margin misses the
    polar image (range rows, azimuth columns) or the elevation rows of the
    elevation-azimuth image are dropped too.

    Args:
        scene: Gaussians to project
        pose: Sensor pose
        intrinsics: Sensor description
        settings: Rasterizer constants (regularization, cutoff, margin)
        cull: Apply frustum culling

    Returns:
        ProjectedSplats for the surviving Gaussians
    """
    settings = settings or RasterSettings()
    sonar = world_to_sonar_batch(pose, scene.means)
    keep = ~degenerate_mask(sonar)
    idx = np.nonzero(keep)[0]
    sonar = sonar[idx]

    r, theta, phi = cartesian_to_polar_elevation_batch(sonar)
    mean_polar = to_pixel_batch(intrinsics.polar_transform, np.stack([r, theta], axis=-1))
    mean_ea = to_pixel_batch(intrinsics.elevation_transform, np.stack([phi, theta], axis=-1))

    J = polar_elevation_jacobian_batch(sonar)
    A_polar = projection_matrices(pose, J, "polar", intrinsics)
    A_ea = projection_matrices(pose, J, "elevation_azimuth", intrinsics)
    cov3 = build_covariance_batch(scene.log_scales[idx], scene.rotations[idx])
    reg = settings.cov_regularization * np.eye(2)
    cov_polar = np.einsum('nai,nij,nbj->nab', A_polar, cov3, A_polar)
    cov_polar = 0.5 * (cov_polar + np.swapaxes(cov_polar, 1, 2)) + reg
    cov_ea = np.einsum('nai,nij,nbj->nab', A_ea, cov3, A_ea)
    cov_ea = 0.5 * (cov_ea + np.swapaxes(cov_ea, 1, 2)) + reg

    if cull:
        k = settings.sigma_cutoff
        m = settings.cull_margin
        half_p = k * np.sqrt(np.stack([cov_polar[:, 0, 0], cov_polar[:, 1, 1]], axis=-1))
        half_e = k * np.sqrt(cov_ea[:, 1, 1])
        culled = (
            _outside(mean_polar[:, 0], half_p[:, 0], intrinsics.width, m)
            | _outside(mean_polar[:, 1], half_p[:, 1], intrinsics.height, m)
            | _outside(mean_ea[:, 1], half_e, intrinsics.ea_height, m)
        )
        visible = ~culled
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(
                f"Projected {len(scene)} Gaussians: {len(scene) - idx.size} degenerate, "
                f"{int(culled.sum())} culled"
            )
        idx = idx[visible]
        sonar, r = sonar[visible], r[visible]
        mean_polar, mean_ea = mean_polar[visible], mean_ea[visible]
        J, A_polar, A_ea = J[visible], A_polar[visible], A_ea[visible]
        cov_polar, cov_ea = cov_polar[visible], cov_ea[visible]

    return ProjectedSplats(
        indices=idx,
        sonar_points=sonar,
        ranges=r,
        mean_polar=mean_polar,
        mean_ea=mean_ea,
        cov_polar=cov_polar,
        cov_ea=cov_ea,
        conic_polar=conic_from_covariance(cov_polar),
        conic_ea=conic_from_covariance(cov_ea),
        intensity=scene.intensities[idx],
        opacity=scene.opacities[idx],
        jacobians=J,
        A_polar=A_polar,
        A_ea=A_ea,
    )


def project_gaussian(
    gaussian: Gaussian3D,
    pose: Pose,
    intrinsics: SonarIntrinsics,
    settings: RasterSettings | None = None,
) -> SplatPair | Culled:
    """
    Project one Gaussian into both frames.

    Returns:
        SplatPair(polar, elevation_azimuth) with transmittance 1, or Culled
    """
    projected = project_scene(GaussianScene.from_gaussians([gaussian]), pose, intrinsics, settings)
    if len(projected) == 0:
        sonar = world_to_sonar_batch(pose, gaussian.mean.reshape(1, 3))
        if degenerate_mask(sonar)[0]:
            return Culled("degenerate")
        r = float(np.linalg.norm(sonar[0]))
        if r < intrinsics.min_range or r > intrinsics.max_range:
            return Culled("range")
        return Culled("outside field of view")
    return SplatPair(projected.splat(0, "polar"), projected.splat(0, "elevation_azimuth"))
