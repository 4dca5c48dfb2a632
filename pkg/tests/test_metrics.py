"""Tests for PSNR, SSIM and the evaluation report."""

from __future__ import annotations

import math

import numpy as np
import pytest

from nasgs.errors import ImageTooSmallError, ShapeMismatchError
from nasgs.metrics import evaluate_images, psnr, ssim, ssim_with_gradient


def ssim_scalar(a: np.ndarray, b: np.ndarray) -> float:
    """Direct loop over every valid 11 x 11 window."""
    x = np.arange(11) - 5.0
    taps = np.exp(-(x**2) / (2 * 1.5**2))
    window = np.outer(taps, taps) / taps.sum() ** 2
    c1, c2 = 0.01**2, 0.03**2
    values = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa = a[i : i + 11, j : j + 11]
            pb = b[i : i + 11, j : j + 11]
            mu_a = (window * pa).sum()
            mu_b = (window * pb).sum()
            var_a = (window * pa * pa).sum() - mu_a**2
            var_b = (window * pb * pb).sum() - mu_b**2
            cov = (window * pa * pb).sum() - mu_a * mu_b
            values.append(
                (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(values))


class TestPsnr:
    """Test peak signal-to-noise ratio."""

    def test_half_offset(self) -> None:
        """Test a 0.5 offset gives 6.0206 dB."""
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(6.0206, abs=1e-4)

    def test_tenth_offset(self) -> None:
        """Test a 0.1 offset gives 20 dB."""
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0)

    def test_identical(self) -> None:
        """Test identical images give infinity."""
        image = np.random.default_rng(0).uniform(size=(5, 5))
        assert psnr(image, image) == math.inf

    def test_shape_mismatch(self) -> None:
        """Test differing shapes raise."""
        with pytest.raises(ShapeMismatchError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSsim:
    """Test single-scale SSIM."""

    def test_identical(self) -> None:
        """Test an image compared with itself scores 1."""
        image = np.random.default_rng(1).uniform(size=(20, 24))
        assert ssim(image, image) == pytest.approx(1.0, abs=1e-12)

    def test_black_against_white(self) -> None:
        """Test constant 0 against constant 1 scores near zero."""
        assert ssim(np.zeros((16, 16)), np.ones((16, 16))) < 0.01

    def test_matches_scalar_windows(self) -> None:
        """Test against explicit window sums."""
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(15, 17))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_scalar(a, b), abs=1e-9)

    def test_symmetric(self) -> None:
        """Test swapping the arguments does not change the score."""
        rng = np.random.default_rng(3)
        a, b = rng.uniform(size=(2, 14, 14))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small(self) -> None:
        """Test images shorter than the window raise."""
        with pytest.raises(ImageTooSmallError, match="11x11"):
            ssim(np.zeros((10, 20)), np.zeros((10, 20)))

    def test_gradient_matches_finite_differences(self) -> None:
        """Test dSSIM/da against central differences."""
        rng = np.random.default_rng(4)
        a = rng.uniform(0.1, 0.9, size=(13, 14))
        b = rng.uniform(0.1, 0.9, size=(13, 14))
        value, grad = ssim_with_gradient(a, b)
        assert value == pytest.approx(ssim(a, b))
        h = 1e-6
        numeric = np.zeros_like(a)
        for index in np.ndindex(a.shape):
            plus, minus = a.copy(), a.copy()
            plus[index] += h
            minus[index] -= h
            numeric[index] = (ssim(plus, b) - ssim(minus, b)) / (2 * h)
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)

    def test_gradient_vanishes_at_identity(self) -> None:
        """Test SSIM is stationary when both images agree."""
        a = np.random.default_rng(5).uniform(size=(12, 12))
        _, grad = ssim_with_gradient(a, a)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)


class TestEvaluateImages:
    """Test the aggregate report."""

    def test_report(self) -> None:
        """Test per-image scores and means."""
        rng = np.random.default_rng(6)
        a = rng.uniform(size=(12, 12))
        report = evaluate_images([(0, np.zeros((12, 12)), np.full((12, 12), 0.1)), (4, a, a)])
        assert [s.index for s in report.per_image] == [0, 4]
        assert report.per_image[0].psnr == pytest.approx(20.0)
        assert report.per_image[1].ssim == pytest.approx(1.0)
        assert math.isinf(report.mean_psnr)
        assert report.model_dump(mode="json")["mean_psnr"] == "inf"

    def test_empty(self) -> None:
        """Test an empty batch scores zero."""
        report = evaluate_images([])
        assert report.per_image == []
        assert report.mean_psnr == 0.0
