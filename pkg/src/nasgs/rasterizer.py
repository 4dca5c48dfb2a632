"""
Two-ways splatting rasterizer.

Rendering runs in two frames:
1. Elevation-azimuth frame: one transmittance per Gaussian, the product of
   (1 - alpha_hat) over every Gaussian strictly nearer in range, evaluated at
   the receiving Gaussian's elevation-azimuth mean,
   with alpha_hat capped at alpha_max.
2. Polar frame: tiled accumulation of I * alpha * T per pixel (a plain sum).

The backward pass returns analytic gradients for every scene parameter,
including the path through the transmittance products.
"""

import logging
import math
import os
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .gaussians import (
    GaussianScene,
    ProjectedSplats,
    Splat2D,
    build_covariance_batch,
    normalize_quaternions,
    project_scene,
    quaternion_to_rotation,
    rotation_derivatives,
)
from .geometry import FRAME_ROWS, from_pixel_batch, polar_elevation_hessian_batch, to_pixel_batch
from .models import Pose, RasterSettings, SonarIntrinsics
from .utils import require_same_shape

logger = logging.getLogger(__name__)

# Upper bound on splat x pixel elements evaluated at once inside a tile
CHUNK_ELEMENTS = 1 << 21


def resolve_threads(threads: int | None) -> int:
    """None or 0 selects the CPU count."""
    if not threads:
        return os.cpu_count() or 1
    return max(1, int(threads))


# Transmittance pre-pass

@dataclass
class TransmittancePairs:
    """Occluder/receiver pairs that entered the transmittance products."""

    receivers: np.ndarray
    occluders: np.ndarray
    offsets: np.ndarray
    alpha_hat: np.ndarray
    saturated: np.ndarray

    @classmethod
    def empty(cls) -> "TransmittancePairs":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=bool))


def _expand_ranges(starts: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row i emit counts[i] entries; return (row ids, offset within row)."""
    total = int(counts.sum())
    rows = np.repeat(np.arange(counts.size), counts)
    first = np.cumsum(counts) - counts
    offsets = np.arange(total) - np.repeat(first, counts)
    return rows, offsets + np.repeat(starts, counts)


def _candidate_pairs(
    means: np.ndarray, half: np.ndarray, cell: float
) -> tuple[np.ndarray, np.ndarray]:
    """
    Pairs (receiver, occluder) whose receiver mean lies in a grid cell touched
    by the occluder's cutoff box.
    """
    origin = means.min(axis=0)
    recv_cells = np.floor((means - origin) / cell).astype(np.int64)
    dims = recv_cells.max(axis=0) + 1
    keys = recv_cells[:, 0] * dims[1] + recv_cells[:, 1]
    order = np.argsort(keys, kind='stable')
    sorted_keys = keys[order]

    lo = np.clip(np.floor((means - half - origin) / cell).astype(np.int64), 0, dims - 1)
    hi = np.clip(np.floor((means + half - origin) / cell).astype(np.int64), 0, dims - 1)
    below = (means + half - origin) < 0
    above = np.floor((means - half - origin) / cell) > dims - 1
    span = np.where(below | above, 0, hi - lo + 1)
    ny = span[:, 1]
    counts = span[:, 0] * ny

    occ_rows, flat = _expand_ranges(np.zeros_like(counts), counts)
    cx = lo[occ_rows, 0] + flat // np.maximum(ny[occ_rows], 1)
    cy = lo[occ_rows, 1] + flat % np.maximum(ny[occ_rows], 1)
    cell_keys = cx * dims[1] + cy

    first = np.searchsorted(sorted_keys, cell_keys, side='left')
    last = np.searchsorted(sorted_keys, cell_keys, side='right')
    hits = last - first
    entry, pos = _expand_ranges(first, hits)
    return order[pos], occ_rows[entry]


def transmittance_prepass(
    mean_ea: np.ndarray,
    cov_ea: np.ndarray,
    conic_ea: np.ndarray,
    opacity: np.ndarray,
    ranges: np.ndarray,
    settings: RasterSettings,
) -> tuple[np.ndarray, TransmittancePairs]:
    """
    Per-splat transmittance from the elevation-azimuth footprints.

    Pairs are pruned with a coarse grid whose cell is the cutoff extent of the
    median splat; the product itself is exact for every pair inside the cutoff.
    Each occluder factor uses min(alpha_hat, alpha_max), the same cap the polar
    accumulation applies, so T never reaches zero. Pairs above the cap are
    flagged saturated and pass no gradient through alpha_hat.

    Returns:
        (T of shape (M,), the contributing pairs)
    """
    m = mean_ea.shape[0]
    if m < 2:
        return np.ones(m), TransmittancePairs.empty()

    k = settings.sigma_cutoff
    sigma = np.sqrt(np.stack([cov_ea[:, 0, 0], cov_ea[:, 1, 1]], axis=-1))
    half = k * sigma
    cell = max(float(np.median(half.max(axis=1))), 1.0)
    recv, occ = _candidate_pairs(mean_ea, half, cell)

    nearer = ranges[occ] < ranges[recv]
    recv, occ = recv[nearer], occ[nearer]
    d = mean_ea[recv] - mean_ea[occ]
    a, b, c = conic_ea[occ, 0], conic_ea[occ, 1], conic_ea[occ, 2]
    maha2 = a * d[:, 0] ** 2 + 2.0 * b * d[:, 0] * d[:, 1] + c * d[:, 1] ** 2
    alpha_hat = opacity[occ] * np.exp(-0.5 * maha2)
    keep = (maha2 <= k * k) & (alpha_hat >= settings.alpha_min)
    recv, occ, d, alpha_hat = recv[keep], occ[keep], d[keep], alpha_hat[keep]

    saturated = alpha_hat > settings.alpha_max
    alpha_used = np.minimum(alpha_hat, settings.alpha_max)
    log_t = np.bincount(recv, weights=np.log1p(-alpha_used), minlength=m)
    pairs = TransmittancePairs(recv, occ, d, alpha_used, saturated)
    return np.exp(log_t), pairs


def compute_transmittances(
    splats_ea: list[Splat2D], settings: RasterSettings | None = None
) -> np.ndarray:
    """
    Transmittance of each elevation-azimuth splat.

    T_i is the product of (1 - alpha_hat_j) over splats j strictly nearer in
    range, alpha_hat_j = opacity_j * exp(-0.5 d^T C_j d) with d the offset of
    splat i's mean from splat j's mean. alpha_hat_j is capped at
    settings.alpha_max inside the product.

    Args:
        splats_ea: Elevation-azimuth splats (any order)
        settings: Cutoff and alpha thresholds

    Returns:
        Array of T values aligned with the input list

    Examples:
        A single splat is never occluded: T = [1.0].
    """
    settings = settings or RasterSettings()
    if not splats_ea:
        return np.zeros(0)
    means = np.stack([s.mean for s in splats_ea])
    covs = np.stack([s.covariance for s in splats_ea])
    conics = np.stack([s.conic for s in splats_ea])
    opacity = np.array([s.opacity for s in splats_ea])
    ranges = np.array([s.range for s in splats_ea])
    T, _ = transmittance_prepass(means, covs, conics, opacity, ranges, settings)
    return T


# Polar tiling

@dataclass
class TileLists:
    """Splats binned by the polar tiles their cutoff box touches."""

    tile_ids: np.ndarray
    starts: np.ndarray
    splats: np.ndarray
    tiles_x: int
    tiles_y: int

    def items(self) -> Iterator[tuple[int, np.ndarray]]:
        for i, tile in enumerate(self.tile_ids):
            yield int(tile), self.splats[self.starts[i] : self.starts[i + 1]]


def bin_tiles(
    projected: ProjectedSplats,
    order: np.ndarray,
    intrinsics: SonarIntrinsics,
    settings: RasterSettings,
) -> TileLists:
    """Bin splats into tiles; each tile keeps splats in the global range order."""
    ts = settings.tile_size
    width, height = intrinsics.width, intrinsics.height
    tiles_x = -(-width // ts)
    tiles_y = -(-height // ts)
    mean = projected.mean_polar[order]
    half = settings.sigma_cutoff * np.sqrt(
        np.stack([projected.cov_polar[order, 0, 0], projected.cov_polar[order, 1, 1]], axis=-1)
    )
    c0 = np.ceil(mean[:, 0] - half[:, 0])
    c1 = np.floor(mean[:, 0] + half[:, 0])
    r0 = np.ceil(mean[:, 1] - half[:, 1])
    r1 = np.floor(mean[:, 1] + half[:, 1])
    inside = (c1 >= 0) & (c0 <= width - 1) & (r1 >= 0) & (r0 <= height - 1) & (c0 <= c1) & (r0 <= r1)

    tx0 = (np.clip(c0, 0, width - 1) // ts).astype(np.int64)
    tx1 = (np.clip(c1, 0, width - 1) // ts).astype(np.int64)
    ty0 = (np.clip(r0, 0, height - 1) // ts).astype(np.int64)
    ty1 = (np.clip(r1, 0, height - 1) // ts).astype(np.int64)
    nx = np.where(inside, tx1 - tx0 + 1, 0)
    ny = np.where(inside, ty1 - ty0 + 1, 0)

    rows, flat = _expand_ranges(np.zeros_like(nx), nx * ny)
    tx = tx0[rows] + flat % np.maximum(nx[rows], 1)
    ty = ty0[rows] + flat // np.maximum(nx[rows], 1)
    tile = ty * tiles_x + tx

    perm = np.argsort(tile, kind='stable')
    tile_sorted = tile[perm]
    splats = order[rows[perm]]
    unique, first = np.unique(tile_sorted, return_index=True)
    starts = np.append(first, tile_sorted.size)
    return TileLists(unique, starts, splats, tiles_x, tiles_y)


def _tile_grid(
    tile: int, lists: TileLists, ts: int, width: int, height: int
) -> tuple[slice, slice, np.ndarray, np.ndarray]:
    ty, tx = divmod(tile, lists.tiles_x)
    ys = slice(ty * ts, min((ty + 1) * ts, height))
    xs = slice(tx * ts, min((tx + 1) * ts, width))
    X, Y = np.meshgrid(
        np.arange(xs.start, xs.stop, dtype=np.float64),
        np.arange(ys.start, ys.stop, dtype=np.float64),
    )
    return ys, xs, X.reshape(-1), Y.reshape(-1)


@dataclass
class _Footprint:
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray
    raw_alpha: np.ndarray
    alpha: np.ndarray
    mask: np.ndarray


def _footprint(
    projected: ProjectedSplats, ids: np.ndarray, X: np.ndarray, Y: np.ndarray, settings: RasterSettings
) -> _Footprint:
    conic = projected.conic_polar[ids]
    mean = projected.mean_polar[ids]
    dx = X[None, :] - mean[:, 0:1]
    dy = Y[None, :] - mean[:, 1:2]
    maha2 = conic[:, 0:1] * dx * dx + 2.0 * conic[:, 1:2] * dx * dy + conic[:, 2:3] * dy * dy
    gauss = np.exp(-0.5 * maha2)
    raw_alpha = projected.opacity[ids, None] * gauss
    alpha = np.minimum(raw_alpha, settings.alpha_max)
    k = settings.sigma_cutoff
    mask = (maha2 <= k * k) & (alpha >= settings.alpha_min)
    return _Footprint(dx, dy, gauss, raw_alpha, alpha, mask)


def _chunks(ids: np.ndarray, pixels: int) -> Iterator[np.ndarray]:
    step = max(1, CHUNK_ELEMENTS // max(pixels, 1))
    for start in range(0, ids.size, step):
        yield ids[start : start + step]


# Forward

@dataclass
class RasterState:
    """Forward-pass state kept for the backward pass."""

    projected: ProjectedSplats
    order: np.ndarray
    transmittance: np.ndarray
    pairs: TransmittancePairs
    tiles: TileLists
    settings: RasterSettings


@dataclass
class RenderOutput:
    """Rendered polar image with diagnostics."""

    image: np.ndarray
    contributors: np.ndarray
    pre_clamp: np.ndarray
    state: RasterState | None = None


def _prepare(
    scene: GaussianScene,
    pose: Pose,
    intrinsics: SonarIntrinsics,
    settings: RasterSettings,
    cull: bool,
) -> RasterState:
    projected = project_scene(scene, pose, intrinsics, settings, cull=cull)
    order = np.argsort(projected.ranges, kind='stable')
    T, pairs = transmittance_prepass(
        projected.mean_ea,
        projected.cov_ea,
        projected.conic_ea,
        projected.opacity,
        projected.ranges,
        settings,
    )
    tiles = bin_tiles(projected, order, intrinsics, settings)
    return RasterState(projected, order, T, pairs, tiles, settings)


def render(
    scene: GaussianScene,
    pose: Pose,
    intrinsics: SonarIntrinsics,
    settings: RasterSettings | None = None,
    threads: int | None = None,
    cull: bool = True,
) -> RenderOutput:
    """
    Render the clean polar image of a scene.

    I(pixel) = clamp(sum_i I_i * alpha_i(pixel) * T_i, 0, 1) with
    alpha_i = min(opacity_i * G_i(pixel), alpha_max).

    Args:
        scene: Gaussians to render (may be empty)
        pose: Sensor pose
        intrinsics: Sensor description
        settings: Rasterizer constants
        threads: Worker threads over tiles; None or 0 uses all cores
        cull: Drop Gaussians outside the frustum before rendering

    Returns:
        RenderOutput with the retained state for render_backward
    """
    settings = settings or RasterSettings()
    state = _prepare(scene, pose, intrinsics, settings, cull)
    height, width = intrinsics.height, intrinsics.width
    pre = np.zeros((height, width))
    counts = np.zeros((height, width), dtype=np.int32)
    projected, T = state.projected, state.transmittance
    weight = projected.intensity * T

    def shade(item: tuple[int, np.ndarray]) -> tuple[slice, slice, np.ndarray, np.ndarray]:
        tile, ids = item
        ys, xs, X, Y = _tile_grid(tile, state.tiles, settings.tile_size, width, height)
        acc = np.zeros(X.size)
        cnt = np.zeros(X.size, dtype=np.int32)
        for chunk in _chunks(ids, X.size):
            fp = _footprint(projected, chunk, X, Y, settings)
            contrib = np.where(fp.mask, fp.alpha, 0.0) * weight[chunk, None]
            acc += contrib.sum(axis=0)
            cnt += fp.mask.sum(axis=0).astype(np.int32)
        shape = (ys.stop - ys.start, xs.stop - xs.start)
        return ys, xs, acc.reshape(shape), cnt.reshape(shape)

    items = list(state.tiles.items())
    workers = resolve_threads(threads)
    if workers == 1 or len(items) < 2:
        results = map(shade, items)
        for ys, xs, patch, cnt in results:
            pre[ys, xs] = patch
            counts[ys, xs] = cnt
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for ys, xs, patch, cnt in pool.map(shade, items):
                pre[ys, xs] = patch
                counts[ys, xs] = cnt

    return RenderOutput(np.clip(pre, 0.0, 1.0), counts, pre, state)


# Backward

@dataclass
class SceneGradients:
    """Gradients for every scene parameter group plus densification stats."""

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    intensity_logits: np.ndarray
    opacity_logits: np.ndarray
    pixel_mean_grad: np.ndarray
    visible: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SceneGradients":
        return cls(
            np.zeros((n, 3)),
            np.zeros((n, 3)),
            np.zeros((n, 4)),
            np.zeros(n),
            np.zeros(n),
            np.zeros(n),
            np.zeros(n, dtype=bool),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "means": self.means,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "intensity_logits": self.intensity_logits,
            "opacity_logits": self.opacity_logits,
        }

    def add(self, other: "SceneGradients") -> None:
        """Accumulate another view's gradients in place."""
        for name, value in other.as_dict().items():
            getattr(self, name)[:] += value
        self.pixel_mean_grad += other.pixel_mean_grad
        self.visible |= other.visible


def _conic_grad_to_cov(conic: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a 2x2 covariance from gradients w.r.t. its conic (a, b, c)."""
    C = np.empty((conic.shape[0], 2, 2))
    C[:, 0, 0], C[:, 0, 1], C[:, 1, 0], C[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
    G = np.empty_like(C)
    G[:, 0, 0], G[:, 1, 1] = grad[:, 0], grad[:, 2]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * grad[:, 1]
    return -np.einsum('nij,njk,nkl->nil', C, G, C)


def render_backward(
    scene: GaussianScene,
    pose: Pose,
    intrinsics: SonarIntrinsics,
    grad_image: np.ndarray,
    output: RenderOutput | None = None,
    settings: RasterSettings | None = None,
    threads: int | None = None,
) -> SceneGradients:
    """
    Analytic gradients of a loss through render().

    Gradient is zero at pixels where the output clamp saturated. The
    transmittance products pass gradients to the receiving Gaussian's mean and
    to every occluder's mean, shape and opacity.

    Args:
        scene: Scene that was rendered
        pose: Sensor pose of the render
        intrinsics: Sensor description
        grad_image: dL/dImage, shape (H, W)
        output: Forward result; recomputed when None
        settings: Rasterizer constants (ignored when output carries state)
        threads: Worker threads over tiles

    Returns:
        SceneGradients aligned with the scene rows
    """
    height, width = intrinsics.height, intrinsics.width
    grad_image = np.asarray(grad_image, dtype=np.float64)
    require_same_shape("grad_image", (height, width), grad_image)
    if output is None or output.state is None:
        output = render(scene, pose, intrinsics, settings, threads)
    state = output.state
    assert state is not None
    settings = state.settings
    projected, T = state.projected, state.transmittance
    grads = SceneGradients.zeros(len(scene))
    m = len(projected)
    if m == 0:
        return grads

    g_pre = np.where(output.pre_clamp <= 1.0, grad_image, 0.0)
    intensity = projected.intensity
    weight = intensity * T

    def shade_grad(item: tuple[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        tile, ids = item
        ys, xs, X, Y = _tile_grid(tile, state.tiles, settings.tile_size, width, height)
        g = g_pre[ys, xs].reshape(-1)
        out = np.zeros((ids.size, 8))
        start = 0
        for chunk in _chunks(ids, X.size):
            fp = _footprint(projected, chunk, X, Y, settings)
            w = np.where(fp.mask, g[None, :], 0.0)
            wa = (w * fp.alpha).sum(axis=1)
            unclamped = np.where(fp.raw_alpha < settings.alpha_max, w, 0.0)
            dpow = unclamped * fp.raw_alpha
            conic = projected.conic_polar[chunk]
            a, b, c = conic[:, 0:1], conic[:, 1:2], conic[:, 2:3]
            rows = slice(start, start + chunk.size)
            wt = weight[chunk]
            out[rows, 0] = wa * T[chunk]
            out[rows, 1] = wa * intensity[chunk]
            out[rows, 2] = (unclamped * fp.gauss).sum(axis=1) * wt
            out[rows, 3] = (dpow * (a * fp.dx + b * fp.dy)).sum(axis=1) * wt
            out[rows, 4] = (dpow * (b * fp.dx + c * fp.dy)).sum(axis=1) * wt
            out[rows, 5] = (dpow * (-0.5 * fp.dx * fp.dx)).sum(axis=1) * wt
            out[rows, 6] = (dpow * (-fp.dx * fp.dy)).sum(axis=1) * wt
            out[rows, 7] = (dpow * (-0.5 * fp.dy * fp.dy)).sum(axis=1) * wt
            start += chunk.size
        return ids, out

    items = list(state.tiles.items())
    acc = np.zeros((m, 8))
    workers = resolve_threads(threads)
    if workers == 1 or len(items) < 2:
        partials = list(map(shade_grad, items))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(shade_grad, items))
    for ids, out in partials:
        np.add.at(acc, ids, out)

    g_intensity = acc[:, 0]
    g_T = acc[:, 1]
    g_opacity = acc[:, 2].copy()
    g_mean_polar = acc[:, 3:5]
    g_conic_polar = acc[:, 5:8]

    # Transmittance products
    g_mean_ea = np.zeros((m, 2))
    g_conic_ea = np.zeros((m, 3))
    pairs = state.pairs
    if pairs.receivers.size:
        recv, occ = pairs.receivers, pairs.occluders
        live = ~pairs.saturated
        g_alpha = np.where(live, -g_T[recv] * T[recv] / (1.0 - pairs.alpha_hat), 0.0)
        gauss = pairs.alpha_hat / projected.opacity[occ]
        g_opacity += np.bincount(occ, weights=g_alpha * gauss, minlength=m)
        dpow = g_alpha * pairs.alpha_hat
        conic = projected.conic_ea[occ]
        d = pairs.offsets
        Cd = np.stack(
            [conic[:, 0] * d[:, 0] + conic[:, 1] * d[:, 1], conic[:, 1] * d[:, 0] + conic[:, 2] * d[:, 1]],
            axis=-1,
        )
        for axis in range(2):
            g_mean_ea[:, axis] -= np.bincount(recv, weights=dpow * Cd[:, axis], minlength=m)
            g_mean_ea[:, axis] += np.bincount(occ, weights=dpow * Cd[:, axis], minlength=m)
        g_conic_ea[:, 0] = np.bincount(occ, weights=dpow * (-0.5 * d[:, 0] ** 2), minlength=m)
        g_conic_ea[:, 1] = np.bincount(occ, weights=dpow * (-d[:, 0] * d[:, 1]), minlength=m)
        g_conic_ea[:, 2] = np.bincount(occ, weights=dpow * (-0.5 * d[:, 1] ** 2), minlength=m)

    # 2D footprints -> 3D parameters
    idx = projected.indices
    R_sw = pose.rotation
    cov3 = build_covariance_batch(scene.log_scales[idx], scene.rotations[idx])
    hessian = polar_elevation_hessian_batch(projected.sonar_points)

    g_means = np.einsum('nai,na->ni', projected.A_polar, g_mean_polar)
    g_means += np.einsum('nai,na->ni', projected.A_ea, g_mean_ea)
    g_cov3 = np.zeros((m, 3, 3))
    g_sonar = np.zeros((m, 3))
    for frame, A, conic, g_conic in (
        ("polar", projected.A_polar, projected.conic_polar, g_conic_polar),
        ("elevation_azimuth", projected.A_ea, projected.conic_ea, g_conic_ea),
    ):
        g_cov2 = _conic_grad_to_cov(conic, g_conic)
        g_cov3 += np.einsum('nai,nab,nbj->nij', A, g_cov2, A)
        g_A = 2.0 * np.einsum('nab,nbj,njk->nak', g_cov2, A, cov3)
        transform = intrinsics.polar_transform if frame == "polar" else intrinsics.elevation_transform
        SP = transform.linear() @ np.eye(3)[list(FRAME_ROWS[frame])]
        g_J = np.einsum('ai,nab,jb->nij', SP, g_A, R_sw)
        g_sonar += np.einsum('nij,nijk->nk', g_J, hessian)
    g_means += g_sonar @ R_sw

    # Sigma = M M^T with M = R(q) diag(s)
    q_raw = scene.rotations[idx]
    q_unit = normalize_quaternions(q_raw)
    R_q = quaternion_to_rotation(q_unit)
    s = np.exp(scene.log_scales[idx])
    M = R_q * s[:, None, :]
    g_M = 2.0 * np.einsum('nij,njk->nik', g_cov3, M)
    g_log_scales = np.einsum('nik,nik->nk', g_M, R_q) * s
    g_R = g_M * s[:, None, :]
    g_q_unit = np.einsum('nij,ncij->nc', g_R, rotation_derivatives(q_unit))
    q_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    radial = np.sum(g_q_unit * q_unit, axis=1, keepdims=True)
    g_q = (g_q_unit - radial * q_unit) / q_norm

    opac = projected.opacity
    grads.means[idx] = g_means
    grads.log_scales[idx] = g_log_scales
    grads.rotations[idx] = g_q
    grads.intensity_logits[idx] = g_intensity * intensity * (1.0 - intensity)
    grads.opacity_logits[idx] = g_opacity * opac * (1.0 - opac)
    grads.pixel_mean_grad[idx] = np.linalg.norm(g_mean_polar, axis=1)
    grads.visible[idx] = True
    return grads


# Oracles

def render_per_pixel_transmittance_oracle(
    scene: GaussianScene,
    pose: Pose,
    intrinsics: SonarIntrinsics,
    settings: RasterSettings | None = None,
    threads: int | None = None,
) -> RenderOutput:
    """
    Render with transmittance recomputed for every pixel and splat.

    For splat i at polar pixel p, occluders are evaluated at the
    elevation-azimuth point with p's azimuth and splat i's elevation. Used
    for benchmarking and for measuring the one-T-per-Gaussian approximation.

    Raises:
        ConfigError: If elevation-azimuth columns do not follow azimuth alone
            (|cos omega| > 1e-9)
    """
    settings = settings or RasterSettings()
    rotation = intrinsics.elevation_transform.rotation
    if abs(math.cos(rotation)) > 1e-9:
        raise ConfigError(
            "Per-pixel oracle needs an elevation-azimuth transform whose columns follow azimuth (omega = +-pi/2)",
            details={"rotation": rotation},
        )
    projected = project_scene(scene, pose, intrinsics, settings)
    order = np.argsort(projected.ranges, kind='stable')
    tiles = bin_tiles(projected, order, intrinsics, settings)
    height, width = intrinsics.height, intrinsics.width
    pre = np.zeros((height, width))
    counts = np.zeros((height, width), dtype=np.int32)
    k2 = settings.sigma_cutoff**2
    ea = projected.mean_ea
    conic_ea = projected.conic_ea
    half_ea_x = settings.sigma_cutoff * np.sqrt(projected.cov_ea[:, 0, 0])
    ranges = projected.ranges

    def shade(item: tuple[int, np.ndarray]) -> tuple[slice, slice, np.ndarray, np.ndarray]:
        tile, ids = item
        ys, xs, X, Y = _tile_grid(tile, tiles, settings.tile_size, width, height)
        polar_coords = from_pixel_batch(intrinsics.polar_transform, np.stack([X, Y], axis=-1))
        theta = polar_coords[:, 1]
        # EA column of each pixel's azimuth (independent of elevation when omega = pi/2)
        ea_x = to_pixel_batch(intrinsics.elevation_transform, np.stack([np.zeros_like(theta), theta], axis=-1))[:, 0]
        overlap = (ea[:, 0] + half_ea_x >= ea_x.min()) & (ea[:, 0] - half_ea_x <= ea_x.max())
        candidates = np.nonzero(overlap)[0]
        acc = np.zeros(X.size)
        cnt = np.zeros(X.size, dtype=np.int32)
        step = max(1, CHUNK_ELEMENTS // max(X.size * max(candidates.size, 1), 1))
        for start in range(0, ids.size, step):
            chunk = ids[start : start + step]
            fp = _footprint(projected, chunk, X, Y, settings)
            # (chunk, pixel, occluder)
            dx = ea_x[None, :, None] - ea[None, None, candidates, 0]
            dy = (ea[chunk, 1][:, None, None] - ea[None, None, candidates, 1])
            dx = np.broadcast_to(dx, (chunk.size, X.size, candidates.size))
            dy = np.broadcast_to(dy, (chunk.size, X.size, candidates.size))
            cj = conic_ea[candidates]
            maha2 = cj[:, 0] * dx * dx + 2.0 * cj[:, 1] * dx * dy + cj[:, 2] * dy * dy
            alpha_hat = projected.opacity[candidates] * np.exp(-0.5 * maha2)
            nearer = ranges[candidates][None, None, :] < ranges[chunk][:, None, None]
            use = nearer & (maha2 <= k2) & (alpha_hat >= settings.alpha_min)
            log_t = np.where(use, np.log1p(-np.minimum(alpha_hat, settings.alpha_max)), 0.0).sum(axis=2)
            contrib = np.where(fp.mask, fp.alpha, 0.0) * projected.intensity[chunk, None] * np.exp(log_t)
            acc += contrib.sum(axis=0)
            cnt += fp.mask.sum(axis=0).astype(np.int32)
        shape = (ys.stop - ys.start, xs.stop - xs.start)
        return ys, xs, acc.reshape(shape), cnt.reshape(shape)

    items = list(tiles.items())
    workers = resolve_threads(threads)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for ys, xs, patch, cnt in pool.map(shade, items):
            pre[ys, xs] = patch
            counts[ys, xs] = cnt
    return RenderOutput(np.clip(pre, 0.0, 1.0), counts, pre, None)


def render_reference(
    scene: GaussianScene,
    pose: Pose,
    intrinsics: SonarIntrinsics,
    settings: RasterSettings | None = None,
) -> np.ndarray:
    """
    Single-threaded scalar evaluation of the two-ways render.

    Loops splat pairs for the transmittances and pixels x splats for the sum.
    Slow; only for verifying render() on small frames.
    """
    settings = settings or RasterSettings()
    projected = project_scene(scene, pose, intrinsics, settings)
    m = len(projected)
    k2 = settings.sigma_cutoff**2

    def alpha_at(j: int, point: np.ndarray, means: np.ndarray, conics: np.ndarray) -> tuple[float, float]:
        dx = float(point[0] - means[j, 0])
        dy = float(point[1] - means[j, 1])
        a, b, c = conics[j]
        maha2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        return maha2, float(projected.opacity[j]) * float(np.exp(-0.5 * maha2))

    T = np.ones(m)
    for i in range(m):
        product = 1.0
        for j in range(m):
            if projected.ranges[j] >= projected.ranges[i]:
                continue
            maha2, alpha_hat = alpha_at(j, projected.mean_ea[i], projected.mean_ea, projected.conic_ea)
            if maha2 > k2 or alpha_hat < settings.alpha_min:
                continue
            product *= 1.0 - min(alpha_hat, settings.alpha_max)
        T[i] = product

    image = np.zeros((intrinsics.height, intrinsics.width))
    for row in range(intrinsics.height):
        for col in range(intrinsics.width):
            total = 0.0
            pixel = np.array([col, row], dtype=np.float64)
            for i in range(m):
                maha2, raw = alpha_at(i, pixel, projected.mean_polar, projected.conic_polar)
                alpha = min(raw, settings.alpha_max)
                if maha2 > k2 or alpha < settings.alpha_min:
                    continue
                total += float(projected.intensity[i]) * alpha * T[i]
            image[row, col] = min(max(total, 0.0), 1.0)
    return image
