"""
Sonar coordinate frames, projections and their derivatives.

Frames:
- World: arbitrary right-handed frame the scene lives in
- Sonar: x forward along the acoustic axis, y left, z up
- Polar-elevation: (range r, azimuth theta, elevation phi)
- Polar image: (r, theta) through the polar similarity transform
- Elevation-azimuth image: (phi, theta) through the elevation similarity transform

Every scalar operation is the batch operation applied to a single row, so the
two always agree bit for bit.
"""

import logging
from typing import Literal, NamedTuple

import numpy as np

from .errors import DegeneratePointError, ShapeMismatchError
from .models import Pose, SimilarityTransform2D, SonarIntrinsics

logger = logging.getLogger(__name__)

EPS_RANGE = 1e-6

Frame = Literal["polar", "elevation_azimuth"]

# Rows of (r, theta, phi) kept by each image frame, in output order
FRAME_ROWS: dict[str, tuple[int, int]] = {
    "polar": (0, 1),
    "elevation_azimuth": (2, 1),
}


class PolarElevationPoint(NamedTuple):
    """A point in polar-elevation coordinates."""

    range: float
    azimuth: float
    elevation: float


def _as_points(points: np.ndarray, name: str = "points") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeMismatchError(name, (-1, 3), tuple(arr.shape))
    return arr


def transform_for(intrinsics: SonarIntrinsics, frame: Frame) -> SimilarityTransform2D:
    """Similarity transform of the given image frame."""
    return intrinsics.polar_transform if frame == "polar" else intrinsics.elevation_transform


# World <-> sonar

def world_to_sonar_batch(pose: Pose, points: np.ndarray) -> np.ndarray:
    """
    Map (N, 3) world points into the sonar frame.

    Uses explicit elementwise products so results do not depend on the BLAS
    kernel chosen for the batch size.
    """
    p = _as_points(points)
    R = pose.rotation
    t = pose.translation
    out = np.empty_like(p)
    for i in range(3):
        out[:, i] = R[i, 0] * p[:, 0] + R[i, 1] * p[:, 1] + R[i, 2] * p[:, 2] + t[i]
    return out


def world_to_sonar(pose: Pose, p: np.ndarray) -> np.ndarray:
    """
    Map a world point into the sonar frame: R_SW p + t_SW.

    Examples:
        >>> world_to_sonar(Pose.identity(), np.array([1.0, 2.0, 3.0]))
        array([1., 2., 3.])
    """
    return world_to_sonar_batch(pose, np.asarray(p, dtype=np.float64).reshape(1, 3))[0]


def sonar_to_world_batch(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Inverse of world_to_sonar_batch: R^T (p - t)."""
    p = _as_points(points) - pose.translation
    R = pose.rotation
    out = np.empty_like(p)
    for i in range(3):
        out[:, i] = R[0, i] * p[:, 0] + R[1, i] * p[:, 1] + R[2, i] * p[:, 2]
    return out


# Cartesian <-> polar-elevation

def cartesian_to_polar_elevation_batch(
    points: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Convert (N, 3) sonar-frame points to (r, theta, phi) arrays.

    No degeneracy check; callers mask rows with r <= EPS_RANGE.
    """
    p = _as_points(points)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    theta = np.arctan2(y, x)
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.where(r > 0, z / np.where(r > 0, r, 1.0), 0.0)
    phi = np.arcsin(np.clip(ratio, -1.0, 1.0))
    return r, theta, phi


def cartesian_to_polar_elevation(p: np.ndarray) -> PolarElevationPoint:
    """
    Convert a sonar-frame point to polar-elevation coordinates.

    Args:
        p: 3-vector in the sonar frame (meters)

    Returns:
        PolarElevationPoint(r=|p|, theta=atan2(y, x), phi=arcsin(z/r))

    Raises:
        DegeneratePointError: If |p| <= EPS_RANGE
    """
    row = np.asarray(p, dtype=np.float64).reshape(1, 3)
    r, theta, phi = cartesian_to_polar_elevation_batch(row)
    if r[0] <= EPS_RANGE:
        raise DegeneratePointError(float(r[0]))
    return PolarElevationPoint(float(r[0]), float(theta[0]), float(phi[0]))


def polar_elevation_to_cartesian_batch(
    r: np.ndarray, theta: np.ndarray, phi: np.ndarray
) -> np.ndarray:
    """Inverse of the polar-elevation map; returns (N, 3) sonar-frame points."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    cos_phi = np.cos(phi)
    return np.stack(
        [r * cos_phi * np.cos(theta), r * cos_phi * np.sin(theta), r * np.sin(phi)], axis=-1
    )


def degenerate_mask(points: np.ndarray) -> np.ndarray:
    """True for rows too close to the sonar origin or to the sonar z-axis."""
    p = _as_points(points)
    rho2 = p[:, 0] ** 2 + p[:, 1] ** 2
    r2 = rho2 + p[:, 2] ** 2
    return (r2 <= EPS_RANGE**2) | (rho2 <= EPS_RANGE**2)


def _check_regular(p: np.ndarray) -> None:
    rho = float(np.hypot(p[0], p[1]))
    r = float(np.linalg.norm(p))
    if r <= EPS_RANGE:
        raise DegeneratePointError(r)
    if rho <= EPS_RANGE:
        raise DegeneratePointError(r, axis_distance=rho)


# Derivatives of the polar-elevation map

def polar_elevation_jacobian_batch(points: np.ndarray) -> np.ndarray:
    """
    Jacobians d(r, theta, phi)/d(x, y, z) for (N, 3) points.

    Returns:
        (N, 3, 3) array; degenerate rows contain non-finite values
    """
    p = _as_points(points)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    rho2 = x * x + y * y
    r2 = rho2 + z * z
    with np.errstate(divide='ignore', invalid='ignore'):
        r = np.sqrt(r2)
        rho = np.sqrt(rho2)
        J = np.empty((p.shape[0], 3, 3), dtype=np.float64)
        J[:, 0, 0] = x / r
        J[:, 0, 1] = y / r
        J[:, 0, 2] = z / r
        J[:, 1, 0] = -y / rho2
        J[:, 1, 1] = x / rho2
        J[:, 1, 2] = 0.0
        J[:, 2, 0] = -x * z / (r2 * rho)
        J[:, 2, 1] = -y * z / (r2 * rho)
        J[:, 2, 2] = rho / r2
    return J


def polar_elevation_jacobian(p: np.ndarray) -> np.ndarray:
    """
    Analytic Jacobian of the polar-elevation map at a sonar-frame point.

    Args:
        p: 3-vector in the sonar frame

    Returns:
        3x3 matrix; rows are gradients of r, theta and phi

    Raises:
        DegeneratePointError: Near the origin or the sonar z-axis

    Examples:
        >>> polar_elevation_jacobian(np.array([2.0, 0.0, 0.0]))
        array([[1. , 0. , 0. ],
               [0. , 0.5, 0. ],
               [0. , 0. , 0.5]])
    """
    row = np.asarray(p, dtype=np.float64).reshape(3)
    _check_regular(row)
    return polar_elevation_jacobian_batch(row.reshape(1, 3))[0]


def polar_elevation_hessian_batch(points: np.ndarray) -> np.ndarray:
    """
    Second derivatives of (r, theta, phi) for (N, 3) points.

    Returns:
        (N, 3, 3, 3) array H with H[n, i, j, k] = d^2 f_i / dx_j dx_k
    """
    p = _as_points(points)
    n = p.shape[0]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    rho2 = x * x + y * y
    r2 = rho2 + z * z
    H = np.zeros((n, 3, 3, 3), dtype=np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        r = np.sqrt(r2)
        rho = np.sqrt(rho2)
        r3 = r2 * r
        r4 = r2 * r2
        rho4 = rho2 * rho2

        # range: delta_jk / r - p_j p_k / r^3
        for j in range(3):
            for k in range(3):
                H[:, 0, j, k] = (1.0 / r if j == k else 0.0) - p[:, j] * p[:, k] / r3

        # azimuth
        H[:, 1, 0, 0] = 2.0 * x * y / rho4
        H[:, 1, 0, 1] = (y * y - x * x) / rho4
        H[:, 1, 1, 0] = H[:, 1, 0, 1]
        H[:, 1, 1, 1] = -2.0 * x * y / rho4

        # elevation: d(phi)/dx = x g, d(phi)/dy = y g with g = -z / (r^2 rho)
        g = -z / (r2 * rho)
        common = z * (2.0 * rho2 + r2) / (r4 * rho2 * rho)
        dg_dx = x * common
        dg_dy = y * common
        dg_dz = (z * z - rho2) / (r4 * rho)
        H[:, 2, 0, 0] = g + x * dg_dx
        H[:, 2, 0, 1] = x * dg_dy
        H[:, 2, 1, 0] = H[:, 2, 0, 1]
        H[:, 2, 1, 1] = g + y * dg_dy
        H[:, 2, 0, 2] = x * dg_dz
        H[:, 2, 2, 0] = H[:, 2, 0, 2]
        H[:, 2, 1, 2] = y * dg_dz
        H[:, 2, 2, 1] = H[:, 2, 1, 2]
        H[:, 2, 2, 2] = -2.0 * z * rho / r4
    return H


def polar_elevation_hessian(p: np.ndarray) -> np.ndarray:
    """
    Second derivatives of the polar-elevation map at one point.

    Raises:
        DegeneratePointError: Near the origin or the sonar z-axis
    """
    row = np.asarray(p, dtype=np.float64).reshape(3)
    _check_regular(row)
    return polar_elevation_hessian_batch(row.reshape(1, 3))[0]


# 2D projections

def project_polar(pe: PolarElevationPoint) -> np.ndarray:
    """Drop elevation: (r, theta)."""
    return np.array([pe.range, pe.azimuth], dtype=np.float64)


def project_elevation_azimuth(pe: PolarElevationPoint) -> np.ndarray:
    """Drop range: (phi, theta)."""
    return np.array([pe.elevation, pe.azimuth], dtype=np.float64)


def to_pixel_batch(transform: SimilarityTransform2D, coords: np.ndarray) -> np.ndarray:
    """
    Apply a similarity transform to (N, 2) coordinates.

    Returns:
        (N, 2) pixel coordinates (x = column, y = row)
    """
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2:
        raise ShapeMismatchError("coords", (-1, 2), tuple(c.shape))
    L = transform.linear()
    out = np.empty_like(c)
    out[:, 0] = L[0, 0] * c[:, 0] + L[0, 1] * c[:, 1] + transform.t_x
    out[:, 1] = L[1, 0] * c[:, 0] + L[1, 1] * c[:, 1] + transform.t_y
    return out


def to_pixel(transform: SimilarityTransform2D, p: np.ndarray) -> np.ndarray:
    """
    Apply a similarity transform to one 2D coordinate pair.

    Examples:
        >>> t = SimilarityTransform2D(scale_a=10, scale_b=100, t_y=256)
        >>> to_pixel(t, np.array([2.0, 0.5]))
        array([ 20., 306.])
    """
    return to_pixel_batch(transform, np.asarray(p, dtype=np.float64).reshape(1, 2))[0]


def from_pixel_batch(transform: SimilarityTransform2D, pixels: np.ndarray) -> np.ndarray:
    """Invert a similarity transform for (N, 2) pixel coordinates."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 2 or px.shape[1] != 2:
        raise ShapeMismatchError("pixels", (-1, 2), tuple(px.shape))
    inv = np.linalg.inv(transform.linear())
    d0 = px[:, 0] - transform.t_x
    d1 = px[:, 1] - transform.t_y
    return np.stack([inv[0, 0] * d0 + inv[0, 1] * d1, inv[1, 0] * d0 + inv[1, 1] * d1], axis=-1)


# Covariance projection

def projection_matrices(
    pose: Pose, jacobians: np.ndarray, frame: Frame, intrinsics: SonarIntrinsics
) -> np.ndarray:
    """
    Linear maps A = S_hat J_sel J_pe R_SW from world offsets to pixel offsets.

    Args:
        pose: Sensor pose
        jacobians: (N, 3, 3) polar-elevation Jacobians at the sonar-frame means
        frame: Image frame
        intrinsics: Sensor intrinsics

    Returns:
        (N, 2, 3) array
    """
    rows = FRAME_ROWS[frame]
    S = transform_for(intrinsics, frame).linear()
    J_sel = jacobians[:, rows, :]
    return np.einsum('ab,nbc,cd->nad', S, J_sel, pose.rotation)


def project_covariance_batch(
    covariances: np.ndarray,
    pose: Pose,
    sonar_points: np.ndarray,
    frame: Frame,
    intrinsics: SonarIntrinsics,
) -> np.ndarray:
    """
    Project (N, 3, 3) world covariances into 2D pixel covariances.

    sonar_points are the means already expressed in the sonar frame.
    Degenerate rows yield non-finite output; callers cull them first.
    """
    J = polar_elevation_jacobian_batch(sonar_points)
    A = projection_matrices(pose, J, frame, intrinsics)
    cov2 = np.einsum('nai,nij,nbj->nab', A, covariances, A)
    return 0.5 * (cov2 + np.swapaxes(cov2, 1, 2))


def project_covariance(
    covariance: np.ndarray,
    pose: Pose,
    p_world: np.ndarray,
    frame: Frame,
    intrinsics: SonarIntrinsics,
) -> np.ndarray:
    """
    Project a 3D world covariance into a 2D image frame.

    Computes S_hat J_sel J_pe R Sigma R^T J_pe^T J_sel^T S_hat^T, symmetrized.

    Args:
        covariance: 3x3 symmetric positive semidefinite matrix (world frame)
        pose: Sensor pose
        p_world: Gaussian mean in world coordinates
        frame: 'polar' or 'elevation_azimuth'
        intrinsics: Sensor intrinsics supplying the similarity transform

    Returns:
        2x2 symmetric matrix in pixel units

    Raises:
        DegeneratePointError: If the mean maps near the sonar origin or z-axis
    """
    cov = np.asarray(covariance, dtype=np.float64)
    if cov.shape != (3, 3):
        raise ShapeMismatchError("covariance", (3, 3), tuple(cov.shape))
    p_sonar = world_to_sonar(pose, p_world)
    _check_regular(p_sonar)
    return project_covariance_batch(cov[None], pose, p_sonar[None], frame, intrinsics)[0]


def project_points_batch(
    pose: Pose, points: np.ndarray, intrinsics: SonarIntrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Full nonlinear chain for (N, 3) world points.

    Returns:
        (polar pixels (N, 2), elevation-azimuth pixels (N, 2), r, sonar points)
    """
    sonar = world_to_sonar_batch(pose, points)
    r, theta, phi = cartesian_to_polar_elevation_batch(sonar)
    polar_px = to_pixel_batch(intrinsics.polar_transform, np.stack([r, theta], axis=-1))
    ea_px = to_pixel_batch(intrinsics.elevation_transform, np.stack([phi, theta], axis=-1))
    return polar_px, ea_px, r, sonar


def pose_distance(a: Pose, b: Pose) -> float:
    """Distance between sensor positions plus relative rotation angle (radians)."""
    translation = float(np.linalg.norm(a.position - b.position))
    relative = a.rotation @ b.rotation.T
    cos_angle = np.clip((np.trace(relative) - 1.0) / 2.0, -1.0, 1.0)
    return translation + float(np.arccos(cos_angle))
