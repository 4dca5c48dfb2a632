"""Tests for the nasgs command line."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from nasgs import __version__
from nasgs.cli import benchmark_scene, run
from nasgs.dataset import load_dataset
from nasgs.images import load_image_bin, load_image_png
from nasgs.models import Pose, SonarIntrinsics

TINY_CONFIG = """
[intrinsics]
min_range = 1.0
max_range = 5.0
height = 16
width = 17

[sim]
subdivisions = 4

[train]
stage1_iterations = 2
stage2_iterations = 2
batch_size = 2
densify_from = 1000
init_budget = 30
noise_components = 2

[reconstruction]
voxel_size = 0.1
samples_per_gaussian = 8
"""


@pytest.fixture
def config_path(tmp_path: Path) -> Path:
    """Tiny configuration so every subcommand finishes quickly."""
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture
def dataset_dir(tmp_path: Path, config_path: Path) -> Path:
    """Noisy simulated cube orbit with nine views."""
    out = tmp_path / "data"
    code = run(
        [
            "simulate",
            "--scene", "cube",
            "--views", "9",
            "--noise",
            "--radius", "3",
            "--height", "0",
            "--surface-points", "200",
            "--threads", "1",
            "--config", str(config_path),
            "--out", str(out),
        ]
    )
    assert code == 0
    return out


@pytest.fixture
def run_dir(tmp_path: Path, config_path: Path, dataset_dir: Path) -> Path:
    """Training run on the simulated dataset."""
    out = tmp_path / "run"
    code = run(
        ["train", "--data", str(dataset_dir), "--threads", "1", "--config", str(config_path), "--out", str(out)]
    )
    assert code == 0
    return out


class TestUsage:
    """Test argument errors and exit codes."""

    def test_no_subcommand(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a missing subcommand exits with 1."""
        assert run([]) == 1
        assert "error [USAGE]" in capsys.readouterr().err

    def test_missing_required(self) -> None:
        """Test a missing required option exits with 1."""
        assert run(["train"]) == 1

    def test_bad_choice(self) -> None:
        """Test an unknown scene preset exits with 1."""
        assert run(["simulate", "--scene", "teapot"]) == 1

    def test_missing_config(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test an absent config file exits with 1."""
        assert run(["bench", "--config", str(tmp_path / "absent.toml")]) == 1
        assert "error [CONFIG_INVALID]" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path: Path) -> None:
        """Test an unknown key exits with 1."""
        path = tmp_path / "bad.toml"
        path.write_text("[train]\nunknown = 1\n")
        assert run(["bench", "--config", str(path)]) == 1

    def test_missing_dataset(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a missing dataset exits with 2."""
        assert run(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "run")]) == 2
        assert "error [DATASET_INVALID]" in capsys.readouterr().err

    def test_version(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test --version prints and exits with 0."""
        assert run(["--version"]) == 0
        assert __version__ in capsys.readouterr().out

    def test_bad_log_level(self, monkeypatch: pytest.MonkeyPatch) -> None:
        """Test an invalid NASGS_LOG exits with 1."""
        monkeypatch.setenv("NASGS_LOG", "loud")
        assert run(["bench"]) == 1


class TestSimulate:
    """Test dataset simulation."""

    def test_outputs(self, dataset_dir: Path) -> None:
        """Test images, poses, clean references and streak rows are written."""
        dataset = load_dataset(dataset_dir)
        assert len(dataset) == 9
        assert dataset.test_indices == [7]
        assert dataset.frame(0).image.shape == (16, 17)
        assert dataset.gt_points is not None
        reference = load_dataset(dataset_dir / "reference")
        assert len(reference) == 9
        rows = json.loads((dataset_dir / "noise_rows.json").read_text())
        assert sorted(rows, key=int) == [str(i) for i in range(9)]


class TestTrainedRun:
    """Test train, render, eval and mesh on one run."""

    def test_train_outputs(self, run_dir: Path, dataset_dir: Path) -> None:
        """Test the run manifest, scene, noise and metrics files."""
        manifest = json.loads((run_dir / "run.json").read_text())
        assert manifest["data"] == str(dataset_dir.resolve())
        assert manifest["config"]["train"]["stage1_iterations"] == 2
        for name in ("scene.ply", "noise.bin", "metrics.csv"):
            assert (run_dir / name).is_file()
        with (run_dir / "metrics.csv").open() as f:
            assert len(list(csv.DictReader(f))) == 4

    def test_render_modes(self, run_dir: Path) -> None:
        """Test clean and noisy renders of a held-out view are written."""
        assert run(["render", "--run", str(run_dir), "--pose-index", "7", "--threads", "1"]) == 0
        assert run(["render", "--run", str(run_dir), "--pose-index", "7", "--noisy", "--threads", "1"]) == 0
        clean = load_image_png(run_dir / "renders" / "00007_denoise.png")
        noisy = load_image_bin(run_dir / "renders" / "00007_noisy.bin")
        assert clean.shape == noisy.shape == (16, 17)

    def test_novel_view_renders_clean_by_default(self, run_dir: Path, config_path: Path) -> None:
        """Test a held-out view gets no borrowed noise unless asked for."""
        common = ["--run", str(run_dir), "--pose-index", "7", "--threads", "1", "--config", str(config_path)]
        assert run(["render", *common]) == 0
        assert run(["render", *common, "--noisy"]) == 0
        clean = load_image_bin(run_dir / "renders" / "00007_denoise.bin")
        noisy = load_image_bin(run_dir / "renders" / "00007_noisy.bin")
        np.testing.assert_array_equal(noisy, clean)

    def test_novel_view_borrows_nearest_noise(self, run_dir: Path, tmp_path: Path) -> None:
        """Test the nearest mode adds a training view's noise to a held-out view."""
        nearest = tmp_path / "nearest.toml"
        nearest.write_text(TINY_CONFIG.replace("[train]\n", "[train]\nnovel_view_noise = \"nearest\"\n"))
        common = ["--run", str(run_dir), "--pose-index", "7", "--threads", "1", "--config", str(nearest)]
        assert run(["render", *common]) == 0
        assert run(["render", *common, "--noisy"]) == 0
        clean = load_image_bin(run_dir / "renders" / "00007_denoise.bin")
        noisy = load_image_bin(run_dir / "renders" / "00007_noisy.bin")
        assert np.all(noisy >= clean)
        assert np.any(noisy > clean)

    def test_render_unknown_frame(self, run_dir: Path) -> None:
        """Test an unknown pose index exits with 2."""
        assert run(["render", "--run", str(run_dir), "--pose-index", "99"]) == 2

    def test_eval(self, run_dir: Path, dataset_dir: Path) -> None:
        """Test the metrics report for the test split."""
        code = run(
            [
                "eval",
                "--run", str(run_dir),
                "--split", "test",
                "--reference", str(dataset_dir / "reference"),
                "--threads", "1",
            ]
        )
        assert code == 0
        report = json.loads((run_dir / "metrics_test.json").read_text())
        assert [score["index"] for score in report["per_image"]] == [7]
        assert report["mean_ssim"] <= 1.0

    def test_mesh(self, run_dir: Path, config_path: Path) -> None:
        """Test mesh files and the geometry report."""
        code = run(["mesh", "--run", str(run_dir), "--config", str(config_path)])
        assert code == 0
        for name in ("mesh.stl", "mesh.obj", "points.ply"):
            assert (run_dir / name).is_file()
        report = json.loads((run_dir / "geometry.json").read_text())
        assert report["triangles"] > 0
        assert report["chamfer"] >= 0.0
        assert report["hausdorff"] >= report["chamfer"]


class TestBench:
    """Test the throughput benchmark."""

    def test_report(self, tmp_path: Path, config_path: Path) -> None:
        """Test bench.json lists both frame rates."""
        code = run(
            [
                "bench",
                "--gaussians", "40",
                "--repeats", "1",
                "--threads", "1",
                "--config", str(config_path),
                "--out", str(tmp_path),
            ]
        )
        assert code == 0
        report = json.loads((tmp_path / "bench.json").read_text())
        assert report["gaussians"] == 40
        assert (report["height"], report["width"]) == (16, 17)
        assert report["render_fps"] > 0.0
        assert report["oracle_fps"] > 0.0
        assert 0.0 <= report["transmittance_mean_error"] <= report["transmittance_max_error"]

    def test_benchmark_scene_in_frustum(self) -> None:
        """Test generated Gaussians lie inside the sensor range."""
        intr = SonarIntrinsics.from_fov(min_range=1.0, max_range=5.0, height=8, width=8)
        scene = benchmark_scene(100, intr, Pose.identity(), seed=1)
        ranges = np.linalg.norm(scene.means, axis=1)
        assert len(scene) == 100
        assert np.all((ranges > 1.0) & (ranges < 5.0))


@pytest.mark.slow
class TestEndToEnd:
    """Longer run through the whole pipeline."""

    def test_loss_falls(self, tmp_path: Path) -> None:
        """Test training several hundred iterations reduces the loss."""
        config = tmp_path / "e2e.toml"
        config.write_text(
            TINY_CONFIG.replace("stage1_iterations = 2", "stage1_iterations = 150")
            .replace("stage2_iterations = 2", "stage2_iterations = 150")
            .replace("init_budget = 30", "init_budget = 200")
        )
        data = tmp_path / "data"
        assert run(["simulate", "--scene", "sphere", "--views", "16", "--noise", "--radius", "3",
                    "--height", "0.5", "--config", str(config), "--out", str(data)]) == 0
        out = tmp_path / "run"
        assert run(["train", "--data", str(data), "--config", str(config), "--out", str(out)]) == 0
        with (out / "metrics.csv").open() as f:
            losses = [float(row["loss"]) for row in csv.DictReader(f)]
        assert len(losses) == 300
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
        assert run(["eval", "--run", str(out), "--split", "test", "--reference", str(data / "reference")]) == 0
