"""
Ray-based forward-looking sonar simulator.

Each azimuth column casts `subdivisions` rays across the elevation aperture.
The first hit deposits reflectivity * max(0, -d.n) / subdivisions into the
pixel at its range and the column's azimuth. Used to build ground-truth
datasets for training and evaluation.
"""

import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, SonarFrame
from .errors import ConfigError, EmptyCloudError
from .geometry import to_pixel_batch
from .models import (
    BoxPrimitive,
    MeshPrimitive,
    Pose,
    SceneSpec,
    SimConfig,
    SonarIntrinsics,
    SpherePrimitive,
)
from .noise import PixelGrid
from .rasterizer import resolve_threads

logger = logging.getLogger(__name__)

# Hits closer than this to the ray origin are ignored
RAY_EPSILON = 1e-9
# Rays per mesh intersection batch
MESH_RAY_CHUNK = 2048


# Ray-primitive intersection; each returns (t, normal) with t = inf on a miss

def _intersect_sphere(
    origin: np.ndarray, dirs: np.ndarray, sphere: SpherePrimitive
) -> tuple[np.ndarray, np.ndarray]:
    center = np.asarray(sphere.center, dtype=np.float64)
    oc = origin - center
    b = dirs @ oc
    c = float(oc @ oc) - sphere.radius**2
    disc = b * b - c
    hit = disc >= 0.0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = -b - root
    far = -b + root
    t = np.where(near > RAY_EPSILON, near, far)
    t = np.where(hit & (t > RAY_EPSILON), t, np.inf)
    points = origin + dirs * np.where(np.isfinite(t), t, 0.0)[:, None]
    return t, (points - center) / sphere.radius


def _intersect_box(
    origin: np.ndarray, dirs: np.ndarray, box: BoxPrimitive
) -> tuple[np.ndarray, np.ndarray]:
    center = np.asarray(box.center, dtype=np.float64)
    half = np.asarray(box.half_extents, dtype=np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / dirs
        t1 = (center - half - origin) * inv
        t2 = (center + half - origin) * inv
    # Parallel rays: inside the slab spans everything, outside misses
    parallel = dirs == 0.0
    inside_slab = np.abs(origin - center) <= half
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = lo.max(axis=1)
    t_exit = hi.min(axis=1)
    hit = (t_exit >= t_enter) & (t_exit > RAY_EPSILON)
    entering = t_enter > RAY_EPSILON
    t = np.where(hit, np.where(entering, t_enter, t_exit), np.inf)
    axis = np.where(entering, lo.argmax(axis=1), hi.argmin(axis=1))
    rows = np.arange(dirs.shape[0])
    normal = np.zeros_like(dirs)
    # Entry faces oppose the ray, exit faces follow it
    sign = np.where(entering, -np.sign(dirs[rows, axis]), np.sign(dirs[rows, axis]))
    normal[rows, axis] = sign
    return t, normal


def _intersect_mesh(
    origin: np.ndarray, dirs: np.ndarray, mesh: MeshPrimitive
) -> tuple[np.ndarray, np.ndarray]:
    """Moller-Trumbore against every triangle; normals face the incoming ray."""
    t_best = np.full(dirs.shape[0], np.inf)
    normal = np.zeros_like(dirs)
    if not mesh.triangles:
        return t_best, normal
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    tris = np.asarray(mesh.triangles, dtype=np.int64)
    v0, v1, v2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    e1, e2 = v1 - v0, v2 - v0
    face_n = np.cross(e1, e2)
    face_n /= np.maximum(np.linalg.norm(face_n, axis=1, keepdims=True), 1e-300)
    s = origin - v0
    q = np.cross(s, e1)

    for start in range(0, dirs.shape[0], MESH_RAY_CHUNK):
        d = dirs[start : start + MESH_RAY_CHUNK]
        p = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum('tk,rtk->rt', e1, p)
        valid = np.abs(det) > 1e-12
        inv = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
        u = np.einsum('tk,rtk->rt', s, p) * inv
        v = np.einsum('rk,tk->rt', d, q) * inv
        t = (q * e2).sum(axis=1)[None, :] * inv
        hit = valid & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > RAY_EPSILON)
        t = np.where(hit, t, np.inf)
        best = t.argmin(axis=1)
        rows = np.arange(d.shape[0])
        t_best[start : start + d.shape[0]] = t[rows, best]
        n = face_n[best]
        flip = np.sign(np.einsum('rk,rk->r', d, n))
        normal[start : start + d.shape[0]] = -np.where(flip == 0.0, 1.0, flip)[:, None] * n
    return t_best, normal


def intersect_scene(
    scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    First hit of every ray.

    Args:
        scene: Primitives
        origin: Shared ray origin (3,)
        dirs: (R, 3) unit directions

    Returns:
        (distance or inf, unit normal, reflectivity) per ray
    """
    t_best = np.full(dirs.shape[0], np.inf)
    normal = np.zeros_like(dirs)
    reflectivity = np.zeros(dirs.shape[0])
    for primitive in scene.primitives:
        if isinstance(primitive, SpherePrimitive):
            t, n = _intersect_sphere(origin, dirs, primitive)
        elif isinstance(primitive, BoxPrimitive):
            t, n = _intersect_box(origin, dirs, primitive)
        else:
            t, n = _intersect_mesh(origin, dirs, primitive)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        normal[closer] = n[closer]
        reflectivity[closer] = primitive.reflectivity
    return t_best, normal, reflectivity


# Frames

def _elevations(intrinsics: SonarIntrinsics, subdivisions: int) -> np.ndarray:
    """Midpoint samples across the elevation aperture."""
    step = intrinsics.elevation_fov / subdivisions
    return -0.5 * intrinsics.elevation_fov + (np.arange(subdivisions) + 0.5) * step


def render_clean(
    scene: SceneSpec,
    pose: Pose,
    intrinsics: SonarIntrinsics,
    config: SimConfig | None = None,
    threads: int | None = 1,
) -> np.ndarray:
    """Noise-free polar image of a scene from one pose."""
    config = config or SimConfig()
    grid = PixelGrid.from_intrinsics(intrinsics)
    phi = _elevations(intrinsics, config.subdivisions)
    origin = pose.position
    image = np.zeros((intrinsics.height, intrinsics.width))
    if not scene.primitives:
        return image

    def cast(columns: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        theta = np.repeat(grid.theta[columns], phi.size)
        elev = np.tile(phi, columns.size)
        sonar_dirs = np.stack(
            [np.cos(elev) * np.cos(theta), np.cos(elev) * np.sin(theta), np.sin(elev)], axis=-1
        )
        dirs = sonar_dirs @ pose.rotation
        t, normal, refl = intersect_scene(scene, origin, dirs)
        hit = np.isfinite(t) & (t >= intrinsics.min_range) & (t <= intrinsics.max_range)
        value = refl * np.maximum(0.0, -np.einsum('rk,rk->r', dirs, normal)) / config.subdivisions
        if config.range_falloff:
            value = value / np.maximum(t, RAY_EPSILON) ** 2
        pixels = to_pixel_batch(intrinsics.polar_transform, np.stack([t[hit], theta[hit]], axis=-1))
        rows = np.rint(pixels[:, 1]).astype(np.int64)
        cols = np.repeat(columns, phi.size)[hit]
        inside = (rows >= 0) & (rows < intrinsics.height)
        return rows[inside], cols[inside], value[hit][inside] * config.intensity_gain

    chunks = np.array_split(np.arange(intrinsics.width), max(1, min(intrinsics.width, 16)))
    workers = resolve_threads(threads)
    if workers == 1:
        results = list(map(cast, chunks))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(cast, chunks))
    for rows, cols, values in results:
        np.add.at(image, (rows, cols), values)
    return np.clip(image, 0.0, 1.0)


def inject_noise(
    image: np.ndarray,
    intrinsics: SonarIntrinsics,
    config: SimConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Add azimuth streaks and speckle to a clean image.

    Streaks are range rows carrying a Gaussian bump across azimuth (side-lobe
    style); speckle is exponential per-pixel noise.

    Returns:
        (noisy image clipped to [0, 1], sorted streak rows)
    """
    grid = PixelGrid.from_intrinsics(intrinsics)
    noisy = np.asarray(image, dtype=np.float64).copy()
    count = min(config.streak_count, intrinsics.height)
    rows = np.sort(rng.choice(intrinsics.height, size=count, replace=False))
    half = 0.5 * intrinsics.azimuth_fov
    for row in rows:
        center = rng.uniform(-half, half)
        noisy[row] += config.streak_amplitude * np.exp(
            -0.5 * ((grid.theta - center) / config.streak_width) ** 2
        )
    if config.speckle_amplitude > 0.0:
        noisy += config.speckle_amplitude * rng.exponential(1.0, size=noisy.shape)
    return np.clip(noisy, 0.0, 1.0), rows


def simulate_frame(
    scene: SceneSpec,
    pose: Pose,
    intrinsics: SonarIntrinsics,
    config: SimConfig | None = None,
    seed: int = 0,
    index: int = 0,
    threads: int | None = 1,
) -> SonarFrame:
    """
    Simulate one polar frame, with synthetic noise when config.noise_enabled.

    Args:
        scene: Primitives
        pose: Sensor pose
        intrinsics: Sensor description
        config: Simulator settings
        seed: Noise seed
        index: Frame index stored on the result
        threads: Worker threads over azimuth columns

    Returns:
        SonarFrame
    """
    config = config or SimConfig()
    image = render_clean(scene, pose, intrinsics, config, threads)
    if config.noise_enabled:
        image, _ = inject_noise(image, intrinsics, config, np.random.default_rng([seed, index]))
    return SonarFrame(index, image, pose)


# Trajectories

def look_at(position: np.ndarray, target: np.ndarray) -> Pose:
    """
    Pose at `position` whose forward (x) axis points at `target`, z kept up.

    Raises:
        ConfigError: If target coincides with position or lies straight above/below
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ConfigError("look_at target coincides with the sensor position")
    x = forward / norm
    up = np.array([0.0, 0.0, 1.0])
    z = up - (up @ x) * x
    z_norm = np.linalg.norm(z)
    if z_norm < 1e-9:
        raise ConfigError("look_at cannot keep z up when looking straight up or down")
    z /= z_norm
    y = np.cross(z, x)
    rotation = np.stack([x, y, z])
    return Pose(rotation=rotation, translation=-rotation @ position)


def generate_orbit_trajectory(
    center: np.ndarray | tuple[float, float, float],
    radius: float,
    n_views: int,
    height: float = 0.0,
) -> list[Pose]:
    """
    Poses evenly spaced on a horizontal circle, each looking at the centre.

    View k sits at centre + (r cos a_k, r sin a_k, height) with a_k = 2 pi k / n.

    Raises:
        ConfigError: If n_views < 1 or radius <= 0
    """
    if n_views < 1:
        raise ConfigError(f"n_views must be at least 1, got {n_views}")
    if radius <= 0:
        raise ConfigError(f"radius must be positive, got {radius}")
    c = np.asarray(center, dtype=np.float64)
    poses = []
    for k in range(n_views):
        angle = 2.0 * math.pi * k / n_views
        position = c + np.array([radius * math.cos(angle), radius * math.sin(angle), height])
        poses.append(look_at(position, c))
    return poses


# Surface sampling

def _box_faces(box: BoxPrimitive) -> list[tuple[float, Callable[[np.random.Generator, int], np.ndarray]]]:
    center = np.asarray(box.center, dtype=np.float64)
    half = np.asarray(box.half_extents, dtype=np.float64)
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        area = 4.0 * half[u] * half[v]
        for sign in (-1.0, 1.0):

            def sampler(rng: np.random.Generator, n: int, axis=axis, u=u, v=v, sign=sign) -> np.ndarray:
                pts = np.empty((n, 3))
                pts[:, axis] = center[axis] + sign * half[axis]
                pts[:, u] = center[u] + rng.uniform(-half[u], half[u], n)
                pts[:, v] = center[v] + rng.uniform(-half[v], half[v], n)
                return pts

            faces.append((float(area), sampler))
    return faces


def _sphere_patch(sphere: SpherePrimitive) -> tuple[float, Callable[[np.random.Generator, int], np.ndarray]]:
    center = np.asarray(sphere.center, dtype=np.float64)

    def sampler(rng: np.random.Generator, n: int) -> np.ndarray:
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return center + sphere.radius * d

    return 4.0 * math.pi * sphere.radius**2, sampler


def _triangle_patches(mesh: MeshPrimitive) -> list[tuple[float, Callable[[np.random.Generator, int], np.ndarray]]]:
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    patches = []
    for tri in mesh.triangles:
        a, b, c = verts[list(tri)]
        area = 0.5 * float(np.linalg.norm(np.cross(b - a, c - a)))
        if area <= 0.0:
            continue

        def sampler(rng: np.random.Generator, n: int, a=a, b=b, c=c) -> np.ndarray:
            r1 = np.sqrt(rng.uniform(size=(n, 1)))
            r2 = rng.uniform(size=(n, 1))
            return (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c

        patches.append((area, sampler))
    return patches


def sample_surface(scene: SceneSpec, n_points: int, seed: int = 0) -> np.ndarray:
    """
    Area-weighted uniform samples over every primitive surface.

    Returns:
        (n_points, 3) points (empty for n_points = 0)

    Raises:
        EmptyCloudError: If points are requested from a scene without surface
    """
    if n_points <= 0:
        return np.zeros((0, 3))
    patches: list[tuple[float, Callable[[np.random.Generator, int], np.ndarray]]] = []
    for primitive in scene.primitives:
        if isinstance(primitive, SpherePrimitive):
            patches.append(_sphere_patch(primitive))
        elif isinstance(primitive, BoxPrimitive):
            patches.extend(_box_faces(primitive))
        else:
            patches.extend(_triangle_patches(primitive))
    if not patches:
        raise EmptyCloudError(f"Scene '{scene.name}' has no surface to sample")
    rng = np.random.default_rng(seed)
    areas = np.array([area for area, _ in patches])
    counts = rng.multinomial(n_points, areas / areas.sum())
    parts = [sampler(rng, int(k)) for (_, sampler), k in zip(patches, counts, strict=True) if k > 0]
    return np.concatenate(parts)


# Presets

def cylinder_mesh(radius: float, height: float, segments: int = 48) -> tuple[list, list]:
    """Closed cylinder about the z-axis, centred on the origin, outward winding."""
    angles = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    h = 0.5 * height
    vertices = [(float(x), float(y), -h) for x, y in ring] + [(float(x), float(y), h) for x, y in ring]
    bottom, top = 2 * segments, 2 * segments + 1
    vertices += [(0.0, 0.0, -h), (0.0, 0.0, h)]
    triangles = []
    for i in range(segments):
        j = (i + 1) % segments
        triangles.append((i, j, segments + j))
        triangles.append((i, segments + j, segments + i))
        triangles.append((bottom, j, i))
        triangles.append((top, segments + i, segments + j))
    return vertices, triangles


def _cube() -> SceneSpec:
    return SceneSpec(name="cube", primitives=[BoxPrimitive(center=(0.0, 0.0, 0.0), half_extents=(0.5, 0.5, 0.5))])


def _sphere() -> SceneSpec:
    return SceneSpec(name="sphere", primitives=[SpherePrimitive(center=(0.0, 0.0, 0.0), radius=0.6)])


def _panel() -> SceneSpec:
    return SceneSpec(
        name="panel",
        primitives=[BoxPrimitive(center=(0.0, 0.0, 0.0), half_extents=(0.03, 0.6, 0.4), reflectivity=0.9)],
    )


def _barrel() -> SceneSpec:
    vertices, triangles = cylinder_mesh(radius=0.4, height=1.0)
    return SceneSpec(
        name="barrel",
        primitives=[MeshPrimitive(vertices=vertices, triangles=triangles, reflectivity=0.8)],
    )


SCENE_PRESETS: dict[str, Callable[[], SceneSpec]] = {
    "cube": _cube,
    "sphere": _sphere,
    "panel": _panel,
    "barrel": _barrel,
}


def scene_preset(name: str) -> SceneSpec:
    """
    Built-in scene by name.

    Raises:
        ConfigError: If the name is unknown
    """
    factory = SCENE_PRESETS.get(name)
    if factory is None:
        raise ConfigError(
            f"Unknown scene '{name}'. Must be one of: {', '.join(sorted(SCENE_PRESETS))}",
            details={"scene": name},
        )
    return factory()


# Datasets

@dataclass
class Simulation:
    """Simulated dataset plus clean references and injected streak rows."""

    dataset: Dataset
    clean_images: dict[int, np.ndarray] = field(default_factory=dict)
    streak_rows: dict[int, np.ndarray] = field(default_factory=dict)


def build_dataset(
    scene: SceneSpec,
    n_views: int,
    intrinsics: SonarIntrinsics | None = None,
    config: SimConfig | None = None,
    seed: int = 0,
    radius: float = 5.0,
    height: float = 1.0,
    surface_points: int = 20_000,
    threads: int | None = 1,
) -> Simulation:
    """
    Orbit the scene, simulate every view and sample the ground-truth surface.

    Args:
        scene: Primitives (centred near the origin)
        n_views: Number of orbit poses
        intrinsics: Sensor description (default from_fov())
        config: Simulator settings; noise is injected when noise_enabled
        seed: Seed for noise and surface samples
        radius: Orbit radius in meters
        height: Orbit height above the scene centre
        surface_points: Ground-truth surface samples
        threads: Worker threads per frame

    Returns:
        Simulation with the dataset (default split), clean images and streak rows
    """
    intrinsics = intrinsics or SonarIntrinsics.from_fov()
    config = config or SimConfig()
    poses = generate_orbit_trajectory((0.0, 0.0, 0.0), radius, n_views, height)
    frames: list[SonarFrame] = []
    clean: dict[int, np.ndarray] = {}
    streaks: dict[int, np.ndarray] = {}
    for index, pose in enumerate(poses):
        image = render_clean(scene, pose, intrinsics, config, threads)
        clean[index] = image
        if config.noise_enabled:
            image, streaks[index] = inject_noise(
                image, intrinsics, config, np.random.default_rng([seed, index])
            )
        frames.append(SonarFrame(index, image, pose))
    gt = sample_surface(scene, surface_points, seed) if scene.primitives else None
    logger.info(f"Simulated {n_views} views of '{scene.name}' (noise {'on' if config.noise_enabled else 'off'})")
    return Simulation(Dataset(frames, intrinsics, gt_points=gt), clean, streaks)
