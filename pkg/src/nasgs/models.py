"""
Pydantic v2 data models for sonar splatting.

This module defines the validated records shared across the package:
- Pose (rigid world-to-sonar transform) and the two image similarity transforms
- SonarIntrinsics aggregating FOVs, range limits and image sizes
- Configuration records for rendering, training, simulation and meshing
- Simulator scene primitives
- Metric reports
"""

import math
from typing import Annotated, Any, Literal

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_serializer,
    field_validator,
    model_validator,
)

# Constants for validation
ORTHONORMAL_TOLERANCE = 1e-9
VALID_NOISE_MODES = ("clean", "nearest")


# Geometry records

class Pose(BaseModel):
    """
    Rigid world-to-sonar transform T_SW.

    rotation is R_SW (world to sonar) and translation is t_SW expressed in the
    sonar frame, so a world point p maps to R_SW @ p + t_SW.
    """

    model_config = ConfigDict(
        arbitrary_types_allowed=True,
        frozen=True,
        extra='forbid',
    )

    rotation: np.ndarray = Field(..., description="3x3 orthonormal matrix R_SW")
    translation: np.ndarray = Field(..., description="Translation t_SW in meters (sonar frame)")

    @field_validator('rotation', mode='before')
    @classmethod
    def validate_rotation(cls, v: Any) -> np.ndarray:
        """Coerce to a 3x3 float64 matrix and enforce R^T R = I, det = +1."""
        matrix = np.asarray(v, dtype=np.float64).reshape(3, 3).copy()
        if not np.allclose(matrix.T @ matrix, np.eye(3), rtol=0.0, atol=ORTHONORMAL_TOLERANCE):
            raise ValueError("rotation must be orthonormal (R^T R = I within 1e-9)")
        if abs(np.linalg.det(matrix) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ValueError("rotation must have determinant +1")
        matrix.flags.writeable = False
        return matrix

    @field_validator('translation', mode='before')
    @classmethod
    def validate_translation(cls, v: Any) -> np.ndarray:
        """Coerce to a float64 3-vector."""
        vector = np.asarray(v, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(vector)):
            raise ValueError("translation must be finite")
        vector.flags.writeable = False
        return vector

    @classmethod
    def identity(cls) -> "Pose":
        """Pose whose sonar frame coincides with the world frame."""
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @property
    def position(self) -> np.ndarray:
        """Sonar origin in world coordinates (-R^T t)."""
        return np.asarray(-self.rotation.T @ self.translation)

    def to_record(self, index: int) -> dict[str, Any]:
        """
        Convert to the poses.json record layout.

        Args:
            index: Frame index the pose belongs to

        Returns:
            Dict with index, R (9 floats row-major) and t (3 floats)
        """
        return {
            "index": index,
            "R": [float(x) for x in self.rotation.reshape(-1)],
            "t": [float(x) for x in self.translation],
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> "Pose":
        """Build a pose from a poses.json record."""
        return cls(rotation=record["R"], translation=record["t"])


class SimilarityTransform2D(BaseModel):
    """
    2D similarity transform from a sonar representation to pixel coordinates.

    The homogeneous matrix is
        [[a cos w, -b sin w, t_x],
         [a sin w,  b cos w, t_y],
         [0,        0,       1  ]]
    where a scales the first input coordinate (range or elevation) and b the
    second (azimuth). Pixel coordinates are (x = column, y = row) with pixel
    centres on integer values.
    """

    model_config = ConfigDict(frozen=True, extra='forbid')

    scale_a: float = Field(..., gt=0, description="Scale of the first coordinate (px/m or px/rad)")
    scale_b: float = Field(..., gt=0, description="Scale of the azimuth coordinate (px/rad)")
    rotation: float = Field(default=0.0, description="Rotation angle omega (radians)")
    t_x: float = Field(default=0.0, description="x offset (pixels)")
    t_y: float = Field(default=0.0, description="y offset (pixels)")

    def linear(self) -> np.ndarray:
        """The 2x2 rotation-scale block (the transform without translation)."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array(
            [[self.scale_a * c, -self.scale_b * s], [self.scale_a * s, self.scale_b * c]],
            dtype=np.float64,
        )


class SonarIntrinsics(BaseModel):
    """
    Sensor description: FOVs, range limits, image sizes and both transforms.

    The polar image is height x width (range rows x azimuth columns); the
    elevation-azimuth image is ea_height x ea_width.
    """

    model_config = ConfigDict(frozen=True, extra='forbid')

    azimuth_fov: float = Field(..., gt=0, description="Horizontal FOV (radians)")
    elevation_fov: float = Field(..., gt=0, description="Vertical FOV (radians)")
    min_range: float = Field(..., ge=0, description="Minimum range (meters)")
    max_range: float = Field(..., gt=0, description="Maximum range (meters)")
    height: Annotated[int, Field(ge=1)] = Field(..., description="Polar image rows (range bins)")
    width: Annotated[int, Field(ge=1)] = Field(..., description="Polar image columns (beams)")
    ea_height: Annotated[int, Field(ge=1)] = Field(..., description="Elevation-azimuth rows")
    ea_width: Annotated[int, Field(ge=1)] = Field(..., description="Elevation-azimuth columns")
    polar_transform: SimilarityTransform2D
    elevation_transform: SimilarityTransform2D

    @model_validator(mode='after')
    def validate_range_limits(self) -> 'SonarIntrinsics':
        """Ensure max_range > min_range."""
        if self.max_range <= self.min_range:
            raise ValueError(
                f"max_range ({self.max_range}) must exceed min_range ({self.min_range})"
            )
        return self

    @classmethod
    def from_fov(
        cls,
        azimuth_fov: float = math.radians(90.0),
        elevation_fov: float = math.radians(20.0),
        min_range: float = 0.5,
        max_range: float = 10.0,
        height: int = 399,
        width: int = 512,
        ea_height: int | None = None,
        ea_width: int | None = None,
    ) -> "SonarIntrinsics":
        """
        Build intrinsics with the standard image layout.

        Columns follow azimuth (left column = positive azimuth), polar rows
        follow range (top row = min_range) and elevation-azimuth rows follow
        elevation (top row = -elevation_fov/2). Pixel centres land on integers.

        Args:
            azimuth_fov: Horizontal FOV (radians)
            elevation_fov: Vertical FOV (radians)
            min_range: Minimum range (meters)
            max_range: Maximum range (meters)
            height: Polar image rows
            width: Polar image columns
            ea_height: Elevation-azimuth rows (default keeps square angular pixels)
            ea_width: Elevation-azimuth columns (default = width)

        Returns:
            Validated SonarIntrinsics
        """
        if ea_width is None:
            ea_width = width
        if ea_height is None:
            ea_height = max(1, round(ea_width * elevation_fov / azimuth_fov))

        s_r = height / (max_range - min_range)
        polar = SimilarityTransform2D(
            scale_a=s_r,
            scale_b=width / azimuth_fov,
            rotation=math.pi / 2,
            t_x=(width - 1) / 2.0,
            t_y=-min_range * s_r - 0.5,
        )
        elevation = SimilarityTransform2D(
            scale_a=ea_height / elevation_fov,
            scale_b=ea_width / azimuth_fov,
            rotation=math.pi / 2,
            t_x=(ea_width - 1) / 2.0,
            t_y=(ea_height - 1) / 2.0,
        )
        return cls(
            azimuth_fov=azimuth_fov,
            elevation_fov=elevation_fov,
            min_range=min_range,
            max_range=max_range,
            height=height,
            width=width,
            ea_height=ea_height,
            ea_width=ea_width,
            polar_transform=polar,
            elevation_transform=elevation,
        )


# Configuration records

class RasterSettings(BaseModel):
    """Rasterizer constants (TOML table [raster])."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    tile_size: int = Field(default=16, ge=1, description="Tile side in pixels")
    sigma_cutoff: float = Field(default=3.0, gt=0, description="Footprint cutoff (std devs)")
    alpha_min: float = Field(default=1.0 / 255.0, ge=0, lt=1, description="Skip threshold")
    alpha_max: float = Field(default=0.99, gt=0, le=1, description="Opacity cap")
    cov_regularization: float = Field(
        default=0.3, ge=0, description="px^2 added to 2D covariance diagonals"
    )
    cull_margin: float = Field(default=1.0, ge=0, description="Extra cull margin (pixels)")


class TrainConfig(BaseModel):
    """
    Training hyperparameters (TOML table [train]).

    Learning rate for means is multiplied by the scene extent at run time.
    """

    model_config = ConfigDict(frozen=True, extra='forbid')

    stage1_iterations: int = Field(default=7000, ge=0)
    stage2_iterations: int = Field(default=8000, ge=0)
    lr_means: float = Field(default=1.6e-4, gt=0)
    lr_scales: float = Field(default=5e-3, gt=0)
    lr_rotations: float = Field(default=1e-3, gt=0)
    lr_intensity: float = Field(default=2.5e-2, gt=0)
    lr_opacity: float = Field(default=2.5e-2, gt=0)
    lr_noise: float = Field(default=1e-2, gt=0)
    batch_size: int = Field(default=8, ge=1, description="Views per multi-view step")
    lambda_dssim: float = Field(default=0.2, ge=0, le=1)
    densify_interval: int = Field(default=100, ge=1)
    densify_from: int = Field(default=500, ge=0)
    densify_until: int = Field(default=12000, ge=0)
    densify_grad_threshold: float = Field(default=2e-4, gt=0, lt=1)
    percent_dense: float = Field(default=0.01, gt=0, lt=1)
    prune_opacity: float = Field(default=0.005, gt=0, lt=1)
    max_gaussians: int = Field(default=200_000, ge=1)
    init_threshold: float = Field(default=0.2, gt=0, lt=1, description="Intensity threshold tau")
    init_samples_per_pixel: int = Field(default=3, ge=1)
    init_budget: int = Field(default=20_000, ge=1, description="Max seeded pixels/points")
    init_opacity: float = Field(default=0.1, gt=0, lt=1)
    init_intensity: float = Field(default=0.5, gt=0, lt=1, description="Point-cloud seeds")
    noise_components: int = Field(default=4, ge=1, description="GMM components K")
    enable_noise: bool = Field(default=True, description="False runs the no-GMM ablation")
    novel_view_noise: str = Field(default="clean", description="clean or nearest")
    log_interval: int = Field(default=100, ge=1)
    checkpoint_interval: int = Field(default=0, ge=0, description="0 = stage ends only")
    seed: int = Field(default=0)

    @field_validator('novel_view_noise')
    @classmethod
    def validate_novel_view_noise(cls, v: str) -> str:
        """Validate the novel-view noise mode."""
        if v not in VALID_NOISE_MODES:
            raise ValueError(f"novel_view_noise must be one of {VALID_NOISE_MODES}, got '{v}'")
        return v

    def learning_rates(self, scene_extent: float) -> dict[str, float]:
        """
        Per-group learning rates keyed by parameter name.

        Args:
            scene_extent: Scene radius used to scale the mean learning rate

        Returns:
            Dict of group name to learning rate
        """
        return {
            "means": self.lr_means * max(scene_extent, 1e-6),
            "log_scales": self.lr_scales,
            "rotations": self.lr_rotations,
            "intensity_logits": self.lr_intensity,
            "opacity_logits": self.lr_opacity,
        }


class SimConfig(BaseModel):
    """Simulator settings (TOML table [sim])."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    subdivisions: int = Field(default=32, ge=1, description="Elevation rays per beam")
    range_falloff: bool = Field(default=False, description="Apply 1/r^2 spreading loss")
    intensity_gain: float = Field(default=1.0, gt=0)
    noise_enabled: bool = Field(default=False)
    streak_count: int = Field(default=6, ge=0, description="Azimuth streak rows per frame")
    streak_amplitude: float = Field(default=0.25, ge=0, le=1)
    streak_width: float = Field(default=0.4, gt=0, description="Azimuth spread (radians)")
    speckle_amplitude: float = Field(default=0.03, ge=0, le=1)


class ReconstructionConfig(BaseModel):
    """Mesh extraction settings (TOML table [reconstruction])."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    samples_per_gaussian: int = Field(default=32, ge=1)
    density_threshold: float | None = Field(
        default=None, ge=0, description="None = 0.3 x median opacity"
    )
    voxel_size: float | None = Field(default=None, gt=0, description="None = extent / 256")
    iso: float = Field(default=0.5, gt=0, lt=1)
    seed: int = Field(default=0)


# Simulator scene primitives

class SpherePrimitive(BaseModel):
    """Sphere given by centre and radius."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal["sphere"] = "sphere"
    center: tuple[float, float, float]
    radius: float = Field(..., gt=0)
    reflectivity: float = Field(default=1.0, ge=0, le=1)


class BoxPrimitive(BaseModel):
    """Axis-aligned box given by centre and half extents."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal["box"] = "box"
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    reflectivity: float = Field(default=1.0, ge=0, le=1)

    @field_validator('half_extents')
    @classmethod
    def validate_half_extents(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        """Half extents must be positive."""
        if min(v) <= 0:
            raise ValueError("half_extents must be positive")
        return v


class MeshPrimitive(BaseModel):
    """Triangle mesh; first-hit shading only, so it need not be closed."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal["mesh"] = "mesh"
    vertices: list[tuple[float, float, float]]
    triangles: list[tuple[int, int, int]]
    reflectivity: float = Field(default=1.0, ge=0, le=1)

    @model_validator(mode='after')
    def validate_indices(self) -> 'MeshPrimitive':
        """Triangle indices must reference existing vertices."""
        count = len(self.vertices)
        for tri in self.triangles:
            if min(tri) < 0 or max(tri) >= count:
                raise ValueError(f"triangle {tri} references a vertex outside [0, {count})")
        return self


Primitive = Annotated[
    SpherePrimitive | BoxPrimitive | MeshPrimitive, Field(discriminator="kind")
]


class SceneSpec(BaseModel):
    """Simulator scene: a list of primitives."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    name: str = Field(default="custom")
    primitives: list[Primitive] = Field(default_factory=list)


# Metric reports

class ImageScore(BaseModel):
    """PSNR/SSIM of one rendered image against its reference."""

    model_config = ConfigDict(extra='forbid')

    index: int
    psnr: float
    ssim: float = Field(..., le=1.0)

    @field_serializer('psnr')
    def serialize_psnr(self, v: float) -> float | str:
        """Identical images give +inf, serialized as "inf"."""
        return "inf" if math.isinf(v) else v


class MetricReport(BaseModel):
    """Aggregate image-quality report emitted by `nasgs eval`."""

    model_config = ConfigDict(extra='forbid')

    mean_psnr: float
    mean_ssim: float = Field(..., le=1.0)
    per_image: list[ImageScore] = Field(default_factory=list)

    @field_serializer('mean_psnr')
    def serialize_mean_psnr(self, v: float) -> float | str:
        """Infinite mean PSNR is serialized as "inf"."""
        return "inf" if math.isinf(v) else v
