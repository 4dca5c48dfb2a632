"""
Command-line entry points: simulate, train, render, mesh, eval and bench.

Every subcommand accepts --seed, --threads, --config and --out. Errors map to
exit codes: 1 usage/config, 2 data, 3 numerical failure.
"""

import argparse
import json
import logging
import math
import sys
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any, NoReturn

import numpy as np

from . import __version__
from .config import RunConfig, configure_logging, load_config
from .dataset import Dataset, SonarFrame, load_dataset, write_dataset
from .errors import DatasetError, NasgsError, UsageError
from .gaussians import GaussianScene, load_ply, load_points_ply, save_points_ply
from .geometry import polar_elevation_to_cartesian_batch, sonar_to_world_batch
from .images import save_image_bin, save_image_png
from .metrics import evaluate_images
from .models import Pose, SonarIntrinsics
from .noise import NoiseModel, PixelGrid, apply_noise, load_noise, nearest_training_view, render_noise
from .rasterizer import render, render_per_pixel_transmittance_oracle, resolve_threads
from .reconstruction import chamfer_distance, extract_mesh, hausdorff_distance, save_obj, save_stl
from .simulator import SCENE_PRESETS, build_dataset, scene_preset
from .trainer import train
from .utils import ensure_directory

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run.json"
BENCH_GAUSSIANS = 10_000


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that raises UsageError instead of exiting."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2))


def _run_config(args: argparse.Namespace) -> RunConfig:
    """Load --config and apply --seed to every seeded table."""
    config = load_config(args.config)
    if args.seed is None:
        return config
    return config.model_copy(
        update={
            "train": config.train.model_copy(update={"seed": args.seed}),
            "reconstruction": config.reconstruction.model_copy(update={"seed": args.seed}),
        }
    )


def _seed(args: argparse.Namespace) -> int:
    return 0 if args.seed is None else int(args.seed)


# Trained runs

def _load_run(run_dir: Path, data: str | None) -> tuple[GaussianScene, NoiseModel | None, Dataset]:
    """Scene, optional noise model and dataset of a training run."""
    if not run_dir.is_dir():
        raise DatasetError(f"Run directory not found: {run_dir}", details={"path": str(run_dir)})
    scene = load_ply(run_dir / "scene.ply")
    noise_file = run_dir / "noise.bin"
    noise = load_noise(noise_file) if noise_file.is_file() else None
    if data is None:
        manifest = run_dir / RUN_MANIFEST
        if not manifest.is_file():
            raise DatasetError(f"{manifest} missing; pass --data", details={"path": str(manifest)})
        data = json.loads(manifest.read_text())["data"]
    return scene, noise, load_dataset(data)


def _noise_row(noise: NoiseModel, dataset: Dataset, frame: SonarFrame, mode: str) -> int | None:
    """Row of the frame's own noise; for novel views None when mode is "clean"."""
    if frame.index in set(int(i) for i in noise.frame_indices):
        return noise.row_for_frame(frame.index)
    if mode == "clean":
        return None
    poses = {f.index: f.pose for f in dataset.train_frames()}
    return nearest_training_view(noise, poses, frame.pose)


def _render_frame(
    scene: GaussianScene,
    noise: NoiseModel | None,
    dataset: Dataset,
    frame: SonarFrame,
    config: RunConfig,
    threads: int,
    noisy: bool,
) -> np.ndarray:
    clean = render(scene, frame.pose, dataset.intrinsics, config.raster, threads).image
    if not noisy or noise is None:
        return clean
    row = _noise_row(noise, dataset, frame, config.train.novel_view_noise)
    if row is None:
        return clean
    grid = PixelGrid.from_intrinsics(dataset.intrinsics)
    n_az, n_r = render_noise(noise, row, grid)
    return apply_noise(clean, n_az, n_r)


# Subcommands

def cmd_simulate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    sim_config = config.sim
    if args.noise:
        sim_config = sim_config.model_copy(update={"noise_enabled": True})
    out = ensure_directory(args.out or f"data/{args.scene}")
    simulation = build_dataset(
        scene_preset(args.scene),
        args.views,
        config.intrinsics.build(),
        sim_config,
        seed=_seed(args),
        radius=args.radius,
        height=args.height,
        surface_points=args.surface_points,
        threads=args.threads,
    )
    write_dataset(simulation.dataset, out)
    if sim_config.noise_enabled:
        dataset = simulation.dataset
        clean = Dataset(
            [SonarFrame(f.index, simulation.clean_images[f.index], f.pose) for f in dataset.frames],
            dataset.intrinsics,
            dataset.train_indices,
            dataset.test_indices,
            dataset.gt_points,
        )
        write_dataset(clean, out / "reference")
        rows = {str(i): [int(r) for r in rows] for i, rows in simulation.streak_rows.items()}
        (out / "noise_rows.json").write_text(json.dumps(rows, indent=2))
    _emit({"dataset": str(out), "views": args.views, "scene": args.scene, "noise": sim_config.noise_enabled})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args)
    train_config = config.train
    if args.no_noise:
        train_config = train_config.model_copy(update={"enable_noise": False})
    dataset = load_dataset(args.data)
    out = ensure_directory(args.out or "runs/latest")
    (out / RUN_MANIFEST).write_text(
        json.dumps(
            {
                "data": str(Path(args.data).resolve()),
                "version": __version__,
                "config": config.model_copy(update={"train": train_config}).model_dump(mode='json'),
            },
            indent=2,
        )
    )
    points = load_points_ply(args.init_ply) if args.init_ply else None
    result = train(dataset, train_config, config.raster, args.threads, out, initial_points=points)
    _emit(
        {
            "run": str(out),
            "iterations": result.iteration,
            "final_loss": result.final_loss,
            "gaussians": len(result.scene),
        }
    )
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    config = _run_config(args)
    run_dir = Path(args.run)
    scene, noise, dataset = _load_run(run_dir, args.data)
    frame = dataset.frame(args.pose_index)
    image = _render_frame(scene, noise, dataset, frame, config, args.threads, args.noisy)
    out = ensure_directory(args.out or run_dir / "renders")
    mode = "noisy" if args.noisy else "denoise"
    png = out / f"{frame.index:05d}_{mode}.png"
    save_image_png(image, png)
    raw = save_image_bin(image, png.with_suffix(".bin"))
    _emit({"image": str(png), "raw": str(raw), "mode": mode, "index": frame.index})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _run_config(args)
    run_dir = Path(args.run)
    scene, noise, dataset = _load_run(run_dir, args.data)
    reference = load_dataset(args.reference) if args.reference else dataset
    pairs = []
    for frame in dataset.split_frames(args.split):
        image = _render_frame(scene, noise, dataset, frame, config, args.threads, args.noisy)
        pairs.append((frame.index, image, reference.frame(frame.index).image))
    report = evaluate_images(pairs)
    out = ensure_directory(args.out or run_dir)
    path = out / f"metrics_{args.split}.json"
    path.write_text(report.model_dump_json(indent=2))
    _emit(report.model_dump(mode='json'))
    return 0


def cmd_mesh(args: argparse.Namespace) -> int:
    config = _run_config(args)
    run_dir = Path(args.run)
    scene, _, dataset = _load_run(run_dir, args.data)
    mesh, points = extract_mesh(scene, config.reconstruction)
    out = ensure_directory(args.out or run_dir)
    save_stl(mesh, out / "mesh.stl")
    save_obj(mesh, out / "mesh.obj")
    save_points_ply(points, out / "points.ply")
    report: dict[str, Any] = {
        "vertices": int(mesh.vertices.shape[0]),
        "triangles": len(mesh),
        "points": int(points.shape[0]),
        "signed_volume": mesh.signed_volume(),
    }
    if dataset.gt_points is not None:
        report["chamfer"] = chamfer_distance(mesh.vertices, dataset.gt_points)
        report["hausdorff"] = hausdorff_distance(mesh.vertices, dataset.gt_points)
    (out / "geometry.json").write_text(json.dumps(report, indent=2))
    _emit(report)
    return 0


def benchmark_scene(n: int, intrinsics: SonarIntrinsics, pose: Pose, seed: int = 0) -> GaussianScene:
    """Random Gaussians spread through the sensor frustum of `pose`."""
    rng = np.random.default_rng(seed)
    span = intrinsics.max_range - intrinsics.min_range
    r = intrinsics.min_range + rng.uniform(0.1, 0.9, n) * span
    theta = rng.uniform(-0.45, 0.45, n) * intrinsics.azimuth_fov
    phi = rng.uniform(-0.45, 0.45, n) * intrinsics.elevation_fov
    points = sonar_to_world_batch(pose, polar_elevation_to_cartesian_batch(r, theta, phi))
    scene = GaussianScene.from_points(
        points, intensities=rng.uniform(0.2, 0.9, n), opacity=0.5, scales=rng.uniform(0.01, 0.04, n)
    )
    return scene


def _frames_per_second(fn: Any, repeats: int) -> float:
    started = time.perf_counter()
    for _ in range(repeats):
        fn()
    elapsed = time.perf_counter() - started
    return repeats / elapsed if elapsed > 0 else math.inf


def cmd_bench(args: argparse.Namespace) -> int:
    config = _run_config(args)
    threads = resolve_threads(args.threads)
    if args.run:
        scene, _, dataset = _load_run(Path(args.run), args.data)
        intrinsics, pose = dataset.intrinsics, dataset.frames[0].pose
        if len(scene) > args.gaussians:
            scene = scene.subset(np.arange(args.gaussians))
    else:
        intrinsics, pose = config.intrinsics.build(), Pose.identity()
        scene = benchmark_scene(args.gaussians, intrinsics, pose, _seed(args))
    fast = render(scene, pose, intrinsics, config.raster, threads).image
    exact = render_per_pixel_transmittance_oracle(scene, pose, intrinsics, config.raster, threads).image
    error = np.abs(fast - exact)
    render_fps = _frames_per_second(
        lambda: render(scene, pose, intrinsics, config.raster, threads), args.repeats
    )
    oracle_fps = _frames_per_second(
        lambda: render_per_pixel_transmittance_oracle(scene, pose, intrinsics, config.raster, threads),
        args.repeats,
    )
    report = {
        "gaussians": len(scene),
        "threads": threads,
        "height": intrinsics.height,
        "width": intrinsics.width,
        "render_fps": render_fps,
        "oracle_fps": oracle_fps,
        "speedup": render_fps / oracle_fps if oracle_fps > 0 else math.inf,
        "transmittance_max_error": float(error.max()) if error.size else 0.0,
        "transmittance_mean_error": float(error.mean()) if error.size else 0.0,
    }
    out = ensure_directory(args.out or ".")
    (out / "bench.json").write_text(json.dumps(report, indent=2))
    _emit(report)
    return 0


# Parser

def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Random seed (default 0)")
    common.add_argument("--threads", type=int, default=0, help="Worker threads; 0 = all cores")
    common.add_argument("--config", default=None, help="TOML configuration file")
    common.add_argument("--out", default=None, help="Output directory")

    parser = ArgumentParser(prog="nasgs", description="Noise-aware Gaussian splatting for imaging sonar")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", parents=[common], help="Simulate a sonar dataset")
    simulate.add_argument("--scene", choices=sorted(SCENE_PRESETS), default="cube")
    simulate.add_argument("--views", type=int, default=64)
    simulate.add_argument("--noise", action="store_true", help="Inject azimuth streaks and speckle")
    simulate.add_argument("--radius", type=float, default=5.0, help="Orbit radius (m)")
    simulate.add_argument("--height", type=float, default=1.0, help="Orbit height (m)")
    simulate.add_argument("--surface-points", type=int, default=20_000)
    simulate.set_defaults(handler=cmd_simulate)

    train_cmd = sub.add_parser("train", parents=[common], help="Train both stages")
    train_cmd.add_argument("--data", required=True, help="Dataset directory")
    train_cmd.add_argument("--no-noise", action="store_true", help="Disable the noise model")
    train_cmd.add_argument("--init-ply", default=None, help="Initialize from a point cloud")
    train_cmd.set_defaults(handler=cmd_train)

    render_cmd = sub.add_parser("render", parents=[common], help="Render one view of a run")
    render_cmd.add_argument("--run", required=True)
    render_cmd.add_argument("--data", default=None, help="Dataset (default: the run's)")
    render_cmd.add_argument("--pose-index", type=int, required=True)
    mode = render_cmd.add_mutually_exclusive_group()
    mode.add_argument("--denoise", action="store_true", help="Clean render (default)")
    mode.add_argument("--noisy", action="store_true", help="Add the learned noise maps")
    render_cmd.set_defaults(handler=cmd_render)

    mesh = sub.add_parser("mesh", parents=[common], help="Extract a mesh from a run")
    mesh.add_argument("--run", required=True)
    mesh.add_argument("--data", default=None)
    mesh.set_defaults(handler=cmd_mesh)

    evaluate = sub.add_parser("eval", parents=[common], help="Score renders against images")
    evaluate.add_argument("--run", required=True)
    evaluate.add_argument("--data", default=None)
    evaluate.add_argument("--split", choices=("train", "test", "all"), default="test")
    evaluate.add_argument("--reference", default=None, help="Dataset holding reference images")
    evaluate.add_argument("--noisy", action="store_true", help="Score the noisy composite")
    evaluate.set_defaults(handler=cmd_eval)

    bench = sub.add_parser("bench", parents=[common], help="Render throughput vs per-pixel oracle")
    bench.add_argument("--run", default=None, help="Benchmark a trained scene")
    bench.add_argument("--data", default=None)
    bench.add_argument("--gaussians", type=int, default=BENCH_GAUSSIANS)
    bench.add_argument("--repeats", type=int, default=3)
    bench.set_defaults(handler=cmd_bench)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    """
    Parse arguments and run one subcommand.

    Returns:
        Process exit code
    """
    try:
        configure_logging()
        args = build_parser().parse_args(argv)
        return int(args.handler(args))
    except NasgsError as e:
        logger.debug(f"Failure details: {e.to_dict()}")
        print(f"error [{e.code}]: {e.message}", file=sys.stderr)
        return e.exit_code
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)


def main() -> None:
    sys.exit(run())
