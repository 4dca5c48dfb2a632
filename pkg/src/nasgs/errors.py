"""
Error classes for the sonar splatting library and CLI.

Provides structured error handling with error codes, messages, and detailed
context so the CLI can map failures to exit codes and print diagnostics.
"""

from typing import Any


class NasgsError(Exception):
    """Base error with code, message, details and CLI exit code."""

    exit_code: int = 2

    def __init__(
        self,
        code: str,
        message: str,
        details: dict[str, Any] | None = None,
    ) -> None:
        """
        Initialize error.

        Args:
            code: Stable error code for programmatic handling
            message: Human-readable error message
            details: Additional error context as dict
        """
        self.code = code
        self.message = message
        self.details = details or {}
        super().__init__(self.message)

    def to_dict(self) -> dict[str, Any]:
        """
        Convert error to dict representation for JSON reports.

        Returns:
            Dictionary with code, message, and details
        """
        return {
            "code": self.code,
            "message": self.message,
            "details": self.details,
        }


class DegeneratePointError(NasgsError):
    """Raised when a point is too close to the sonar origin or z-axis."""

    def __init__(self, norm: float, axis_distance: float | None = None) -> None:
        """
        Initialize degenerate point error.

        Args:
            norm: Distance of the point from the sonar origin (meters)
            axis_distance: Distance from the sonar z-axis, when that test failed
        """
        if axis_distance is None:
            message = f"Point at range {norm:.3e} m is within epsilon of the sonar origin"
        else:
            message = (
                f"Point at {axis_distance:.3e} m from the sonar z-axis has undefined azimuth"
            )
        super().__init__(
            code="DEGENERATE_POINT",
            message=message,
            details={"norm": norm, "axis_distance": axis_distance},
        )


class ShapeMismatchError(NasgsError):
    """Raised when arrays that must agree in shape do not."""

    def __init__(self, name: str, expected: tuple[int, ...], actual: tuple[int, ...]) -> None:
        """
        Initialize shape mismatch error.

        Args:
            name: Name of the offending argument
            expected: Expected shape
            actual: Shape that was provided
        """
        super().__init__(
            code="SHAPE_MISMATCH",
            message=f"{name} has shape {actual}, expected {expected}",
            details={"name": name, "expected": list(expected), "actual": list(actual)},
        )


class IndexOutOfRangeError(NasgsError):
    """Raised when an image index does not exist in a per-image bank."""

    def __init__(self, resource_type: str, index: int, size: int) -> None:
        """
        Initialize index error.

        Args:
            resource_type: What was being indexed (e.g., 'NoiseModel image')
            index: Requested index
            size: Number of valid entries
        """
        super().__init__(
            code="INDEX_OUT_OF_RANGE",
            message=f"{resource_type} index {index} out of range [0, {size})",
            details={"resource_type": resource_type, "index": index, "size": size},
        )


class ImageTooSmallError(NasgsError):
    """Raised when an image is smaller than the SSIM window."""

    def __init__(self, shape: tuple[int, ...], window: int) -> None:
        """
        Initialize image size error.

        Args:
            shape: Image shape provided
            window: Minimum side length required
        """
        super().__init__(
            code="IMAGE_TOO_SMALL",
            message=f"Image of shape {shape} is smaller than the {window}x{window} window",
            details={"shape": list(shape), "window": window},
        )


class EmptyInitializationError(NasgsError):
    """Raised when initialization produces no Gaussians."""

    def __init__(self, message: str, details: dict[str, Any] | None = None) -> None:
        """
        Initialize empty initialization error.

        Args:
            message: Human-readable error message
            details: Additional error context
        """
        super().__init__(
            code="EMPTY_INITIALIZATION",
            message=message,
            details=details or {},
        )


class EmptyCloudError(NasgsError):
    """Raised when a point cloud operation has no points to work on."""

    def __init__(self, message: str, details: dict[str, Any] | None = None) -> None:
        """
        Initialize empty cloud error.

        Args:
            message: Human-readable error message
            details: Additional error context
        """
        super().__init__(
            code="EMPTY_CLOUD",
            message=message,
            details=details or {},
        )


class EmptyMeshError(NasgsError):
    """Raised when no voxel cell crosses the iso level."""

    def __init__(self, iso: float, grid_shape: tuple[int, ...]) -> None:
        """
        Initialize empty mesh error.

        Args:
            iso: Iso level used for extraction
            grid_shape: Shape of the density grid
        """
        super().__init__(
            code="EMPTY_MESH",
            message=f"No cell of the {grid_shape} density grid crosses iso level {iso}",
            details={"iso": iso, "grid_shape": list(grid_shape)},
        )


class NonFiniteLossError(NasgsError):
    """Raised when training produces a NaN or infinite loss or parameter."""

    exit_code = 3

    def __init__(self, iteration: int, loss: float, parameter: str | None) -> None:
        """
        Initialize non-finite loss error.

        Args:
            iteration: Training iteration where the problem appeared
            loss: Loss value at that iteration
            parameter: First parameter group holding non-finite values, if any
        """
        culprit = f" (first non-finite group: {parameter})" if parameter else ""
        super().__init__(
            code="NON_FINITE_LOSS",
            message=f"Loss became non-finite ({loss}) at iteration {iteration}{culprit}",
            details={"iteration": iteration, "loss": loss, "parameter": parameter},
        )


class DatasetError(NasgsError):
    """Raised for missing or malformed dataset and run directories."""

    def __init__(self, message: str, details: dict[str, Any] | None = None) -> None:
        """
        Initialize dataset error.

        Args:
            message: Human-readable error message
            details: Additional error context
        """
        super().__init__(
            code="DATASET_INVALID",
            message=message,
            details=details or {},
        )


class ConfigError(NasgsError):
    """Raised for invalid TOML configuration."""

    exit_code = 1

    def __init__(self, message: str, details: dict[str, Any] | None = None) -> None:
        """
        Initialize config error.

        Args:
            message: Human-readable error message
            details: Additional error context
        """
        super().__init__(
            code="CONFIG_INVALID",
            message=message,
            details=details or {},
        )


class UsageError(NasgsError):
    """Raised for invalid command-line usage."""

    exit_code = 1

    def __init__(self, message: str) -> None:
        """
        Initialize usage error.

        Args:
            message: Human-readable error message
        """
        super().__init__(code="USAGE", message=message)
