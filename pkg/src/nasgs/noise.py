"""
Learnable per-image sonar noise model.

Each training image owns two Gaussian-mixture banks:
- azimuth bank: one mixture over azimuth per range row, scaled by a row gain
- range bank: one mixture over range per azimuth column, scaled by a column gain

The bumps are unnormalized (peak value 1), mixing weights come from a softmax
over logits, sigma = SIGMA_MIN + exp(log_sigma) and gain = exp(log_gain).
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import softmax

from .errors import ConfigError, DatasetError, IndexOutOfRangeError, ShapeMismatchError
from .geometry import from_pixel_batch, pose_distance
from .models import Pose, SonarIntrinsics
from .utils import read_tensor_blob, require_same_shape, write_tensor_blob

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-3
INITIAL_LOG_GAIN = -6.0

NOISE_PARAMETER_NAMES = (
    "az_logits",
    "az_means",
    "az_log_sigmas",
    "az_log_gains",
    "rg_logits",
    "rg_means",
    "rg_log_sigmas",
    "rg_log_gains",
)


@dataclass(frozen=True)
class PixelGrid:
    """Azimuth of every polar column and range of every polar row."""

    theta: np.ndarray
    ranges: np.ndarray

    @classmethod
    def from_intrinsics(cls, intrinsics: SonarIntrinsics) -> "PixelGrid":
        """
        Invert the polar transform at the pixel centres.

        Raises:
            ConfigError: If columns do not follow azimuth alone (|cos omega| > 1e-9)
        """
        transform = intrinsics.polar_transform
        if abs(math.cos(transform.rotation)) > 1e-9:
            raise ConfigError(
                "Noise grid needs a polar transform whose columns follow azimuth (omega = +-pi/2)",
                details={"rotation": transform.rotation},
            )
        cols = np.arange(intrinsics.width, dtype=np.float64)
        rows = np.arange(intrinsics.height, dtype=np.float64)
        theta = from_pixel_batch(transform, np.stack([cols, np.zeros_like(cols)], axis=-1))[:, 1]
        ranges = from_pixel_batch(transform, np.stack([np.zeros_like(rows), rows], axis=-1))[:, 0]
        return cls(theta=theta, ranges=ranges)

    @property
    def height(self) -> int:
        return int(self.ranges.size)

    @property
    def width(self) -> int:
        return int(self.theta.size)


@dataclass
class NoiseModel:
    """
    Azimuth and range mixture banks for N images.

    Azimuth arrays have shape (N, K, H) with gains (N, H); range arrays have
    shape (N, K, W) with gains (N, W). frame_indices maps each row back to the
    dataset frame it models.
    """

    az_logits: np.ndarray
    az_means: np.ndarray
    az_log_sigmas: np.ndarray
    az_log_gains: np.ndarray
    rg_logits: np.ndarray
    rg_means: np.ndarray
    rg_log_sigmas: np.ndarray
    rg_log_gains: np.ndarray
    frame_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        n, k, h = self.az_logits.shape
        w = self.rg_logits.shape[2]
        expected = {
            "az_means": (n, k, h),
            "az_log_sigmas": (n, k, h),
            "az_log_gains": (n, h),
            "rg_logits": (n, k, w),
            "rg_means": (n, k, w),
            "rg_log_sigmas": (n, k, w),
            "rg_log_gains": (n, w),
        }
        for name, shape in expected.items():
            actual = tuple(getattr(self, name).shape)
            if actual != shape:
                raise ShapeMismatchError(name, shape, actual)
        if self.frame_indices.size == 0:
            self.frame_indices = np.arange(n, dtype=np.int64)

    @classmethod
    def initialize(
        cls,
        n_images: int,
        grid: PixelGrid,
        components: int = 4,
        log_gain: float = INITIAL_LOG_GAIN,
        frame_indices: np.ndarray | None = None,
    ) -> "NoiseModel":
        """
        Create banks with means spread evenly over each domain and near-zero gains.

        Args:
            n_images: Number of images N
            grid: Pixel grid supplying H, W and the azimuth/range domains
            components: Mixture components K
            log_gain: Initial log gain (-6 gives gains of about 2.5e-3)
            frame_indices: Dataset frame of each row (default 0..N-1)

        Returns:
            NoiseModel with zero logits (uniform mixing)
        """
        h, w, k = grid.height, grid.width, components

        def bank(domain: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
            lo, hi = float(domain.min()), float(domain.max())
            span = max(hi - lo, 1e-6)
            centers = lo + (np.arange(k) + 0.5) / k * span
            sigma = max(span / (2 * k) - SIGMA_MIN, 1e-6)
            means = np.broadcast_to(centers[None, :, None], (n_images, k, bins)).copy()
            log_sigmas = np.full((n_images, k, bins), math.log(sigma))
            return means, log_sigmas

        az_means, az_log_sigmas = bank(grid.theta, h)
        rg_means, rg_log_sigmas = bank(grid.ranges, w)
        return cls(
            az_logits=np.zeros((n_images, k, h)),
            az_means=az_means,
            az_log_sigmas=az_log_sigmas,
            az_log_gains=np.full((n_images, h), log_gain),
            rg_logits=np.zeros((n_images, k, w)),
            rg_means=rg_means,
            rg_log_sigmas=rg_log_sigmas,
            rg_log_gains=np.full((n_images, w), log_gain),
            frame_indices=(
                np.arange(n_images, dtype=np.int64)
                if frame_indices is None
                else np.asarray(frame_indices, dtype=np.int64)
            ),
        )

    @property
    def n_images(self) -> int:
        return int(self.az_logits.shape[0])

    @property
    def components(self) -> int:
        return int(self.az_logits.shape[1])

    @property
    def height(self) -> int:
        return int(self.az_logits.shape[2])

    @property
    def width(self) -> int:
        return int(self.rg_logits.shape[2])

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in NOISE_PARAMETER_NAMES}

    def copy(self) -> "NoiseModel":
        return NoiseModel(
            **{name: arr.copy() for name, arr in self.parameters().items()},
            frame_indices=self.frame_indices.copy(),
        )

    def check_index(self, n: int) -> None:
        if not 0 <= n < self.n_images:
            raise IndexOutOfRangeError("NoiseModel image", n, self.n_images)

    def row_for_frame(self, frame: int) -> int:
        """Row of the bank that models a dataset frame."""
        hits = np.nonzero(self.frame_indices == frame)[0]
        if hits.size == 0:
            raise IndexOutOfRangeError("NoiseModel frame", frame, self.n_images)
        return int(hits[0])

    # Parameter maps

    def azimuth_mixing(self, n: int) -> np.ndarray:
        return np.asarray(softmax(self.az_logits[n], axis=0))

    def range_mixing(self, n: int) -> np.ndarray:
        return np.asarray(softmax(self.rg_logits[n], axis=0))

    def azimuth_gains(self) -> np.ndarray:
        return np.exp(self.az_log_gains)

    def range_gains(self) -> np.ndarray:
        return np.exp(self.rg_log_gains)

    def mean_gain(self) -> float:
        """Mean of all gains over both banks and every image."""
        gains = np.concatenate([self.azimuth_gains().reshape(-1), self.range_gains().reshape(-1)])
        return float(gains.mean()) if gains.size else 0.0


def _bumps(x: np.ndarray, means: np.ndarray, log_sigmas: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unnormalized Gaussian bumps E, offsets (x - mu) and sigma."""
    sigma = SIGMA_MIN + np.exp(log_sigmas)
    diff = x - means
    return np.exp(-0.5 * (diff / sigma) ** 2), diff, sigma


def _azimuth_terms(model: NoiseModel, n: int, grid: PixelGrid) -> tuple[np.ndarray, ...]:
    # (K, H, W)
    E, diff, sigma = _bumps(
        grid.theta[None, None, :], model.az_means[n][:, :, None], model.az_log_sigmas[n][:, :, None]
    )
    return E, diff, sigma, model.azimuth_mixing(n), np.exp(model.az_log_gains[n])


def _range_terms(model: NoiseModel, n: int, grid: PixelGrid) -> tuple[np.ndarray, ...]:
    # (K, H, W)
    E, diff, sigma = _bumps(
        grid.ranges[None, :, None], model.rg_means[n][:, None, :], model.rg_log_sigmas[n][:, None, :]
    )
    return E, diff, sigma, model.range_mixing(n), np.exp(model.rg_log_gains[n])


def _check_grid(model: NoiseModel, grid: PixelGrid) -> None:
    if (grid.height, grid.width) != (model.height, model.width):
        raise ShapeMismatchError("grid", (model.height, model.width), (grid.height, grid.width))


def azimuth_noise(model: NoiseModel, n: int, grid: PixelGrid) -> np.ndarray:
    """
    Azimuth noise map of image n.

    N(h, w) = g_h * sum_k pi_kh * exp(-(theta_w - mu_kh)^2 / (2 sigma_kh^2))

    Raises:
        IndexOutOfRangeError: If n is not a valid image index
    """
    model.check_index(n)
    _check_grid(model, grid)
    E, _, _, pi, gain = _azimuth_terms(model, n, grid)
    return gain[:, None] * np.einsum('kh,khw->hw', pi, E)


def range_noise(model: NoiseModel, n: int, grid: PixelGrid) -> np.ndarray:
    """
    Range noise map of image n.

    N(h, w) = g_w * sum_k pi_kw * exp(-(r_h - mu_kw)^2 / (2 sigma_kw^2))

    Raises:
        IndexOutOfRangeError: If n is not a valid image index
    """
    model.check_index(n)
    _check_grid(model, grid)
    E, _, _, pi, gain = _range_terms(model, n, grid)
    return gain[None, :] * np.einsum('kw,khw->hw', pi, E)


def apply_noise(clean: np.ndarray, noise_azimuth: np.ndarray, noise_range: np.ndarray) -> np.ndarray:
    """
    Combine the clean render with both noise maps: clamp(I + N_theta + N_r, 0, 1).

    Raises:
        ShapeMismatchError: If the three maps differ in shape
    """
    clean = np.asarray(clean, dtype=np.float64)
    require_same_shape("noise_azimuth", clean.shape, np.asarray(noise_azimuth))
    require_same_shape("noise_range", clean.shape, np.asarray(noise_range))
    return np.clip(clean + noise_azimuth + noise_range, 0.0, 1.0)


def apply_noise_backward(
    clean: np.ndarray, noise_azimuth: np.ndarray, noise_range: np.ndarray, grad_output: np.ndarray
) -> np.ndarray:
    """
    Gradient reaching each of the three summands (identical for all three).

    Zero at pixels where the clamp saturated.
    """
    total = np.asarray(clean) + noise_azimuth + noise_range
    return np.where((total >= 0.0) & (total <= 1.0), grad_output, 0.0)


@dataclass
class NoiseGradients:
    """Gradients for the parameters of one image (row n of every bank)."""

    az_logits: np.ndarray
    az_means: np.ndarray
    az_log_sigmas: np.ndarray
    az_log_gains: np.ndarray
    rg_logits: np.ndarray
    rg_means: np.ndarray
    rg_log_sigmas: np.ndarray
    rg_log_gains: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in NOISE_PARAMETER_NAMES}


def _bank_gradients(
    E: np.ndarray,
    diff: np.ndarray,
    sigma: np.ndarray,
    pi: np.ndarray,
    gain: np.ndarray,
    grad_map: np.ndarray,
    sum_axis: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradients of one bank given dL/dmap of shape (H, W).

    E and diff are (K, H, W); sigma broadcasts to them with a unit axis at
    sum_axis, the image axis that is not the bin axis (2 for azimuth rows,
    1 for range columns).
    """
    ge = grad_map[None, :, :] * E
    sum_e = ge.sum(axis=sum_axis)
    sum_mu = (ge * diff / sigma**2).sum(axis=sum_axis)
    sum_sigma = (ge * diff**2 / sigma**3).sum(axis=sum_axis)
    sigma_bins = np.squeeze(sigma, axis=sum_axis)

    d_gain = (pi * sum_e).sum(axis=0)
    d_pi = gain[None, :] * sum_e
    d_logits = pi * (d_pi - (pi * d_pi).sum(axis=0, keepdims=True))
    d_mu = gain[None, :] * pi * sum_mu
    d_sigma = gain[None, :] * pi * sum_sigma
    return d_logits, d_mu, d_sigma * (sigma_bins - SIGMA_MIN), d_gain * gain


def noise_gradients(
    model: NoiseModel,
    n: int,
    grid: PixelGrid,
    grad_azimuth: np.ndarray,
    grad_range: np.ndarray,
) -> NoiseGradients:
    """
    Analytic gradients of both noise maps of image n.

    Args:
        model: Noise model
        n: Image row
        grid: Pixel grid
        grad_azimuth: dL/dN_theta, shape (H, W)
        grad_range: dL/dN_r, shape (H, W)

    Returns:
        NoiseGradients shaped like row n of each bank
    """
    model.check_index(n)
    _check_grid(model, grid)
    E, diff, sigma, pi, gain = _azimuth_terms(model, n, grid)
    az = _bank_gradients(E, diff, sigma, pi, gain, np.asarray(grad_azimuth), sum_axis=2)
    E, diff, sigma, pi, gain = _range_terms(model, n, grid)
    rg = _bank_gradients(E, diff, sigma, pi, gain, np.asarray(grad_range), sum_axis=1)
    return NoiseGradients(*az, *rg)


def nearest_training_view(model: NoiseModel, train_poses: dict[int, Pose], pose: Pose) -> int:
    """
    Noise row of the training frame whose pose is closest to `pose`.

    Distance is sensor translation plus relative rotation angle (radians).
    """
    best_row, best = 0, math.inf
    for row, frame in enumerate(model.frame_indices):
        candidate = train_poses.get(int(frame))
        if candidate is None:
            continue
        dist = pose_distance(candidate, pose)
        if dist < best:
            best_row, best = row, dist
    return best_row


def render_noise(model: NoiseModel, n: int, grid: PixelGrid) -> tuple[np.ndarray, np.ndarray]:
    """Both noise maps of image n."""
    return azimuth_noise(model, n, grid), range_noise(model, n, grid)


def save_noise(model: NoiseModel, intrinsics: SonarIntrinsics, path: Path | str) -> None:
    """
    Serialize the noise model as a binary blob.

    The JSON header carries N, H, W, K, the FOVs, range bounds and frame indices;
    tensors follow as little-endian float32 in parameter order.
    """
    header = {
        "N": model.n_images,
        "H": model.height,
        "W": model.width,
        "K": model.components,
        "azimuth_fov": intrinsics.azimuth_fov,
        "elevation_fov": intrinsics.elevation_fov,
        "min_range": intrinsics.min_range,
        "max_range": intrinsics.max_range,
        "frame_indices": [int(i) for i in model.frame_indices],
    }
    write_tensor_blob(path, header, model.parameters(), dtype='<f4')
    logger.debug(f"Saved noise model for {model.n_images} images to {path}")


def load_noise(path: Path | str) -> NoiseModel:
    """
    Read a noise model blob.

    Raises:
        DatasetError: If the blob lacks a parameter tensor
    """
    header, tensors = read_tensor_blob(path)
    missing = [name for name in NOISE_PARAMETER_NAMES if name not in tensors]
    if missing:
        raise DatasetError(f"Noise blob {path} lacks tensors {missing}", details={"path": str(path)})
    return NoiseModel(
        **{name: tensors[name] for name in NOISE_PARAMETER_NAMES},
        frame_indices=np.asarray(header.get("frame_indices", []), dtype=np.int64),
    )
