"""
Two-stage optimization of a Gaussian scene against sonar images.

Stage 1 fits the Gaussians with a multi-view loss. Stage 2 keeps fitting them
while the per-image noise model is optimized jointly: its azimuth and range
maps are added to every clean render before the loss is taken.
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dataset import Dataset
from .errors import DatasetError, EmptyInitializationError, NonFiniteLossError, ShapeMismatchError
from .gaussians import PARAMETER_NAMES, GaussianScene, quaternion_to_rotation, save_ply
from .geometry import from_pixel_batch, polar_elevation_to_cartesian_batch, sonar_to_world_batch
from .metrics import ssim_with_gradient
from .models import RasterSettings, SonarIntrinsics, TrainConfig
from .noise import (
    NOISE_PARAMETER_NAMES,
    NoiseModel,
    PixelGrid,
    apply_noise,
    apply_noise_backward,
    noise_gradients,
    render_noise,
    save_noise,
)
from .optim import AdamState, exponential_decay, optimizer_step
from .rasterizer import SceneGradients, render, render_backward
from .utils import ensure_directory, require_same_shape

logger = logging.getLogger(__name__)

# Mean learning rate decays log-linearly to this fraction over both stages
MEANS_LR_FINAL_RATIO = 0.01

SPLIT_CHILDREN = 2
SPLIT_SHRINK = 0.8

METRICS_COLUMNS = ("stage", "iteration", "loss", "gaussians", "wall_clock")


# Initialization

def initialize_from_images(
    dataset: Dataset,
    threshold: float = 0.2,
    samples_per_pixel: int = 3,
    seed: int = 0,
    budget: int | None = 20_000,
    opacity: float = 0.1,
) -> GaussianScene:
    """
    Seed Gaussians from bright training pixels.

    Each pixel brighter than the threshold is back-projected at its (range,
    azimuth) with samples_per_pixel elevations drawn uniformly over the
    elevation FOV. Pixels are subsampled to the budget first.

    Args:
        dataset: Dataset whose training frames are scanned
        threshold: Intensity threshold tau
        samples_per_pixel: Elevation samples per bright pixel
        seed: Seed for subsampling and elevation draws
        budget: Max number of bright pixels used (None = all)
        opacity: Initial opacity

    Returns:
        Scene with one isotropic Gaussian per sample, intensity = pixel value

    Raises:
        EmptyInitializationError: If no training pixel exceeds the threshold
    """
    frames = dataset.train_frames() or dataset.frames
    if not frames:
        raise EmptyInitializationError("Dataset has no frames to initialize from")
    intrinsics = dataset.intrinsics
    rng = np.random.default_rng(seed)

    # (frame position, row, col) of every bright pixel
    hits: list[np.ndarray] = []
    values: list[np.ndarray] = []
    for pos, frame in enumerate(frames):
        rows, cols = np.nonzero(frame.image > threshold)
        hits.append(np.stack([np.full(rows.size, pos), rows, cols], axis=1))
        values.append(frame.image[rows, cols])
    pixels = np.concatenate(hits)
    intensity = np.concatenate(values)
    if pixels.shape[0] == 0:
        raise EmptyInitializationError(
            f"No training pixel exceeds the intensity threshold {threshold}",
            details={"threshold": threshold, "frames": len(frames)},
        )
    if budget is not None and pixels.shape[0] > budget:
        keep = np.sort(rng.choice(pixels.shape[0], size=budget, replace=False))
        pixels, intensity = pixels[keep], intensity[keep]

    coords = from_pixel_batch(intrinsics.polar_transform, pixels[:, [2, 1]].astype(np.float64))
    r = np.repeat(coords[:, 0], samples_per_pixel)
    theta = np.repeat(coords[:, 1], samples_per_pixel)
    half = 0.5 * intrinsics.elevation_fov
    phi = rng.uniform(-half, half, size=r.size)
    sonar = polar_elevation_to_cartesian_batch(r, theta, phi)

    owner = np.repeat(pixels[:, 0], samples_per_pixel)
    world = np.empty_like(sonar)
    for pos, frame in enumerate(frames):
        sel = owner == pos
        if sel.any():
            world[sel] = sonar_to_world_batch(frame.pose, sonar[sel])

    scene = GaussianScene.from_points(
        world, intensities=np.repeat(intensity, samples_per_pixel), opacity=opacity
    )
    logger.info(
        f"Initialized {len(scene)} Gaussians from {pixels.shape[0]} pixels above {threshold} "
        f"in {len(frames)} frames"
    )
    return scene


def initialize_from_pointcloud(
    points: np.ndarray,
    budget: int | None = None,
    seed: int = 0,
    intensity: float = 0.5,
    opacity: float = 0.1,
) -> GaussianScene:
    """
    Seed one Gaussian per point, uniformly subsampled to the budget.

    Raises:
        EmptyInitializationError: If the cloud has no points
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyInitializationError("Point cloud is empty")
    if budget is not None and pts.shape[0] > budget:
        rng = np.random.default_rng(seed)
        pts = pts[np.sort(rng.choice(pts.shape[0], size=budget, replace=False))]
    scene = GaussianScene.from_points(pts, intensities=intensity, opacity=opacity)
    logger.info(f"Initialized {len(scene)} Gaussians from a point cloud")
    return scene


def initialize_noise(dataset: Dataset, config: TrainConfig) -> NoiseModel:
    """Noise model with one row per training frame."""
    grid = PixelGrid.from_intrinsics(dataset.intrinsics)
    return NoiseModel.initialize(
        len(dataset.train_indices),
        grid,
        components=config.noise_components,
        frame_indices=np.asarray(dataset.train_indices, dtype=np.int64),
    )


# Loss

def multiview_loss(
    rendered: list[np.ndarray], reference: list[np.ndarray], lambda_dssim: float = 0.2
) -> tuple[float, list[np.ndarray]]:
    """
    Mean over views of (1 - lambda) * L1 + lambda * (1 - SSIM).

    Args:
        rendered: B predicted images
        reference: B target images
        lambda_dssim: Weight of the structural term (0 skips SSIM entirely)

    Returns:
        (loss, gradient w.r.t. each rendered image)

    Raises:
        ShapeMismatchError: On an empty batch, differing batch sizes or image shapes
    """
    if len(rendered) != len(reference):
        raise ShapeMismatchError("reference", (len(rendered),), (len(reference),))
    if not rendered:
        raise ShapeMismatchError("rendered", (1,), (0,))
    views = len(rendered)
    total = 0.0
    grads: list[np.ndarray] = []
    for image, target in zip(rendered, reference, strict=True):
        image = np.asarray(image, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        require_same_shape("reference", image.shape, target)
        diff = image - target
        loss = (1.0 - lambda_dssim) * float(np.mean(np.abs(diff)))
        grad = (1.0 - lambda_dssim) * np.sign(diff) / diff.size
        if lambda_dssim > 0.0:
            value, d_ssim = ssim_with_gradient(image, target)
            loss += lambda_dssim * (1.0 - value)
            grad = grad - lambda_dssim * d_ssim
        total += loss / views
        grads.append(grad / views)
    return total, grads


# Densification

@dataclass
class GradientStats:
    """Accumulated polar-pixel mean-gradient norms and visibility counts."""

    accum: np.ndarray
    counts: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.accum.shape[0])

    def add(self, grads: SceneGradients) -> None:
        """Record one view's gradients."""
        self.accum += np.where(grads.visible, grads.pixel_mean_grad, 0.0)
        self.counts += grads.visible

    def average(self) -> np.ndarray:
        return np.where(self.counts > 0, self.accum / np.maximum(self.counts, 1), 0.0)

    def is_empty(self) -> bool:
        return not bool(self.counts.any())


def densify_and_prune(
    scene: GaussianScene,
    stats: GradientStats,
    config: TrainConfig,
    scene_extent: float,
    rng: np.random.Generator | None = None,
) -> tuple[GaussianScene, np.ndarray]:
    """
    Clone, split and prune Gaussians.

    Gaussians whose mean gradient norm reaches the threshold are cloned when
    small and split into two shrunken children when their largest scale
    exceeds percent_dense of the scene extent. Gaussians below the opacity
    threshold are removed, then the lowest-opacity ones until max_gaussians.

    Args:
        scene: Current scene
        stats: Gradient statistics aligned with the scene rows
        config: Densification thresholds
        scene_extent: Scene radius in meters
        rng: Generator for split offsets

    Returns:
        (new scene, source row of every new row or -1 for a new Gaussian)
    """
    n = len(scene)
    if len(stats) != n:
        raise ShapeMismatchError("stats", (n,), (len(stats),))
    rng = rng or np.random.default_rng(config.seed)

    if stats.is_empty():
        selected = np.zeros(n, dtype=bool)
    else:
        selected = stats.average() >= config.densify_grad_threshold
    large = scene.scales.max(axis=1) > config.percent_dense * scene_extent
    clone = selected & ~large
    split = selected & large

    pieces = [scene]
    sources = [np.arange(n)]
    if clone.any():
        pieces.append(scene.subset(clone))
        sources.append(np.full(int(clone.sum()), -1))
    if split.any():
        parents = np.repeat(np.nonzero(split)[0], SPLIT_CHILDREN)
        children = scene.subset(parents)
        stds = children.scales
        offsets = rng.normal(size=stds.shape) * stds
        rotation = quaternion_to_rotation(children.unit_rotations())
        children.means += np.einsum('nij,nj->ni', rotation, offsets)
        children.log_scales[:] = np.log(stds / (SPLIT_SHRINK * SPLIT_CHILDREN))
        pieces.append(children)
        sources.append(np.full(parents.size, -1))

    dense = pieces[0].copy()
    for piece in pieces[1:]:
        dense = dense.concatenate(piece)
    source = np.concatenate(sources)

    keep = np.ones(len(dense), dtype=bool)
    keep[:n][split] = False
    opacity = dense.opacities
    keep &= opacity >= config.prune_opacity
    kept = np.nonzero(keep)[0]
    if kept.size > config.max_gaussians:
        strongest = np.argsort(-opacity[kept], kind='stable')[: config.max_gaussians]
        kept = np.sort(kept[strongest])

    result = dense.subset(kept)
    logger.info(
        f"Densified {n} -> {len(result)} Gaussians "
        f"({int(clone.sum())} cloned, {int(split.sum())} split, {len(dense) - kept.size} removed)"
    )
    return result, source[kept]


# Optimization

class TrainRecord(NamedTuple):
    stage: int
    iteration: int
    loss: float
    gaussians: int
    wall_clock: float


@dataclass
class TrainResult:
    """Outcome of one or both stages."""

    scene: GaussianScene
    noise: NoiseModel | None
    scene_state: AdamState
    noise_state: AdamState | None = None
    history: list[TrainRecord] = field(default_factory=list)
    iteration: int = 0

    @property
    def losses(self) -> list[float]:
        return [record.loss for record in self.history]

    @property
    def counts(self) -> list[int]:
        return [record.gaussians for record in self.history]

    @property
    def final_loss(self) -> float | None:
        return self.history[-1].loss if self.history else None


def _first_non_finite(groups: dict[str, np.ndarray]) -> str | None:
    for name, arr in groups.items():
        if not np.all(np.isfinite(arr)):
            return name
    return None


def _sample_batch(rng: np.random.Generator, available: int, size: int) -> np.ndarray:
    if size >= available:
        return rng.permutation(available)
    return rng.choice(available, size=size, replace=False)


def save_checkpoint(
    directory: Path | str,
    scene: GaussianScene,
    intrinsics: SonarIntrinsics,
    scene_state: AdamState,
    noise: NoiseModel | None = None,
    noise_state: AdamState | None = None,
) -> Path:
    """
    Write scene.ply, optimizer.bin and, when present, noise.bin and noise_optimizer.bin.

    Returns:
        Checkpoint directory
    """
    out = ensure_directory(directory)
    save_ply(scene, out / "scene.ply")
    scene_state.save(out / "optimizer.bin")
    if noise is not None:
        save_noise(noise, intrinsics, out / "noise.bin")
        if noise_state is not None:
            noise_state.save(out / "noise_optimizer.bin")
    logger.info(f"Checkpoint written to {out}")
    return out


def write_metrics(path: Path | str, history: list[TrainRecord]) -> None:
    """Write the per-iteration history as CSV."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open('w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for record in history:
            writer.writerow(
                [record.stage, record.iteration, f"{record.loss:.8g}", record.gaussians, f"{record.wall_clock:.3f}"]
            )


def _optimize(
    stage: int,
    scene: GaussianScene,
    noise: NoiseModel | None,
    dataset: Dataset,
    config: TrainConfig,
    iterations: int,
    start_iteration: int,
    settings: RasterSettings,
    threads: int | None,
    scene_state: AdamState,
    noise_state: AdamState | None,
    out_dir: Path | None,
) -> TrainResult:
    frames = dataset.train_frames()
    if not frames:
        raise DatasetError("Dataset has no training frames")
    intrinsics = dataset.intrinsics
    extent = dataset.scene_extent()
    rates = config.learning_rates(extent)
    max_log_scale = math.log(extent)
    total_iterations = config.stage1_iterations + config.stage2_iterations
    grid = PixelGrid.from_intrinsics(intrinsics) if noise is not None else None
    noise_rates = {name: config.lr_noise for name in NOISE_PARAMETER_NAMES}
    rng = np.random.default_rng([config.seed, start_iteration])

    scene = scene.copy()
    noise = noise.copy() if noise is not None else None
    stats = GradientStats.zeros(len(scene))
    history: list[TrainRecord] = []
    started = time.perf_counter()

    for step in range(iterations):
        it = start_iteration + step
        views = [frames[i] for i in _sample_batch(rng, len(frames), config.batch_size)]
        outputs = [render(scene, view.pose, intrinsics, settings, threads) for view in views]

        # Noise maps enter the loss as clamp(clean + N_theta + N_r)
        maps: list[tuple[int, np.ndarray, np.ndarray] | None] = []
        predicted: list[np.ndarray] = []
        for view, output in zip(views, outputs, strict=True):
            if noise is None or grid is None:
                maps.append(None)
                predicted.append(output.image)
                continue
            row = noise.row_for_frame(view.index)
            n_az, n_r = render_noise(noise, row, grid)
            maps.append((row, n_az, n_r))
            predicted.append(apply_noise(output.image, n_az, n_r))

        loss, grad_images = multiview_loss(predicted, [v.image for v in views], config.lambda_dssim)

        grads = SceneGradients.zeros(len(scene))
        noise_grads = {name: np.zeros_like(arr) for name, arr in noise.parameters().items()} if noise else {}
        rows: list[int] = []
        for view, output, grad, noise_map in zip(views, outputs, grad_images, maps, strict=True):
            if noise is not None and noise_map is not None and grid is not None:
                row, n_az, n_r = noise_map
                grad = apply_noise_backward(output.image, n_az, n_r, grad)
                for name, value in noise_gradients(noise, row, grid, grad, grad).as_dict().items():
                    noise_grads[name][row] += value
                rows.append(row)
            view_grads = render_backward(scene, view.pose, intrinsics, grad, output=output, threads=threads)
            stats.add(view_grads)
            grads.add(view_grads)

        culprit = _first_non_finite({**grads.as_dict(), **noise_grads})
        if not math.isfinite(loss) or culprit:
            raise NonFiniteLossError(it, loss, culprit or _first_non_finite(scene.parameters()))

        step_rates = dict(rates)
        step_rates["means"] = exponential_decay(
            rates["means"], rates["means"] * MEANS_LR_FINAL_RATIO, total_iterations, it
        )
        optimizer_step(scene.parameters(), grads.as_dict(), scene_state, step_rates)
        np.minimum(scene.log_scales, max_log_scale, out=scene.log_scales)
        if noise is not None and noise_state is not None:
            touched = np.unique(np.asarray(rows, dtype=np.int64))
            optimizer_step(
                noise.parameters(),
                noise_grads,
                noise_state,
                noise_rates,
                rows={name: touched for name in NOISE_PARAMETER_NAMES},
            )
        culprit = _first_non_finite({**scene.parameters(), **(noise.parameters() if noise else {})})
        if culprit:
            raise NonFiniteLossError(it, loss, culprit)

        history.append(TrainRecord(stage, it, loss, len(scene), time.perf_counter() - started))
        if step == 0 or (it + 1) % config.log_interval == 0:
            logger.info(f"Stage {stage} iteration {it + 1}: loss {loss:.6f}, {len(scene)} Gaussians")

        if config.densify_from <= it < config.densify_until and (it + 1) % config.densify_interval == 0:
            scene, source = densify_and_prune(scene, stats, config, extent, rng)
            scene_state.remap(PARAMETER_NAMES, source)
            stats = GradientStats.zeros(len(scene))

        if out_dir is not None and config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0:
            save_checkpoint(
                out_dir / "checkpoints" / f"iter_{it + 1:06d}",
                scene,
                intrinsics,
                scene_state,
                noise,
                noise_state,
            )

    return TrainResult(scene, noise, scene_state, noise_state, history, start_iteration + iterations)


def train_stage1(
    scene: GaussianScene,
    dataset: Dataset,
    config: TrainConfig,
    settings: RasterSettings | None = None,
    threads: int | None = None,
    start_iteration: int = 0,
    scene_state: AdamState | None = None,
    out_dir: Path | str | None = None,
) -> TrainResult:
    """
    Fit the Gaussians alone with the multi-view loss.

    Each iteration samples batch_size training views, renders them, takes the
    loss and its analytic gradient, steps the optimizer and periodically
    densifies and prunes.

    Returns:
        TrainResult with the fitted scene (the input scene is not modified)

    Raises:
        NonFiniteLossError: If the loss or any parameter stops being finite
    """
    return _optimize(
        1,
        scene,
        None,
        dataset,
        config,
        config.stage1_iterations,
        start_iteration,
        settings or RasterSettings(),
        threads,
        scene_state or AdamState(),
        None,
        Path(out_dir) if out_dir is not None else None,
    )


def train_stage2(
    scene: GaussianScene,
    noise: NoiseModel | None,
    dataset: Dataset,
    config: TrainConfig,
    settings: RasterSettings | None = None,
    threads: int | None = None,
    start_iteration: int | None = None,
    scene_state: AdamState | None = None,
    noise_state: AdamState | None = None,
    out_dir: Path | str | None = None,
) -> TrainResult:
    """
    Jointly fit the Gaussians and the noise model.

    Each training view's noise row only receives gradients from that view.
    With enable_noise off (or no model) this is plain continued stage-1
    training and the noise model is returned untouched.

    Returns:
        TrainResult with the fitted scene and noise model

    Raises:
        NonFiniteLossError: If the loss or any parameter stops being finite
    """
    active = noise if config.enable_noise else None
    result = _optimize(
        2,
        scene,
        active,
        dataset,
        config,
        config.stage2_iterations,
        config.stage1_iterations if start_iteration is None else start_iteration,
        settings or RasterSettings(),
        threads,
        scene_state or AdamState(),
        (noise_state or AdamState()) if active is not None else None,
        Path(out_dir) if out_dir is not None else None,
    )
    if active is None:
        result.noise = noise
    return result


def train(
    dataset: Dataset,
    config: TrainConfig,
    settings: RasterSettings | None = None,
    threads: int | None = None,
    out_dir: Path | str | None = None,
    initial_points: np.ndarray | None = None,
) -> TrainResult:
    """
    Full pipeline: initialization, stage 1, stage 2 and final outputs.

    Args:
        dataset: Training data
        config: Hyperparameters
        settings: Rasterizer constants
        threads: Rendering worker threads
        out_dir: Where scene.ply, noise.bin, metrics.csv and checkpoints go
        initial_points: Seed from this point cloud instead of the images

    Returns:
        TrainResult spanning both stages
    """
    settings = settings or RasterSettings()
    out = ensure_directory(out_dir) if out_dir is not None else None
    if initial_points is not None:
        scene = initialize_from_pointcloud(
            initial_points, config.init_budget, config.seed, config.init_intensity, config.init_opacity
        )
    else:
        scene = initialize_from_images(
            dataset,
            config.init_threshold,
            config.init_samples_per_pixel,
            config.seed,
            config.init_budget,
            config.init_opacity,
        )

    first = train_stage1(scene, dataset, config, settings, threads, out_dir=out)
    if out is not None:
        save_checkpoint(out / "checkpoints" / "stage1", first.scene, dataset.intrinsics, first.scene_state)

    noise = initialize_noise(dataset, config) if config.enable_noise else None
    second = train_stage2(
        first.scene,
        noise,
        dataset,
        config,
        settings,
        threads,
        start_iteration=first.iteration,
        scene_state=first.scene_state,
        out_dir=out,
    )
    result = TrainResult(
        second.scene,
        second.noise,
        second.scene_state,
        second.noise_state,
        first.history + second.history,
        second.iteration,
    )
    if out is not None:
        save_checkpoint(
            out / "checkpoints" / "stage2",
            result.scene,
            dataset.intrinsics,
            result.scene_state,
            result.noise,
            result.noise_state,
        )
        save_ply(result.scene, out / "scene.ply")
        if result.noise is not None:
            save_noise(result.noise, dataset.intrinsics, out / "noise.bin")
        write_metrics(out / "metrics.csv", result.history)
        logger.info(f"Training finished after {result.iteration} iterations; outputs in {out}")
    return result
