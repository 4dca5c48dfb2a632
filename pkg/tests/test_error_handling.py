"""Tests for structured errors and their exit codes."""

from __future__ import annotations

import pytest

from nasgs.errors import (
    ConfigError,
    DatasetError,
    DegeneratePointError,
    EmptyCloudError,
    EmptyInitializationError,
    EmptyMeshError,
    ImageTooSmallError,
    IndexOutOfRangeError,
    NasgsError,
    NonFiniteLossError,
    ShapeMismatchError,
    UsageError,
)


class TestErrorCodes:
    """Test each error carries its stable code."""

    @pytest.mark.parametrize(
        ("error", "code"),
        [
            (DegeneratePointError(1e-9), "DEGENERATE_POINT"),
            (ShapeMismatchError("x", (3,), (2,)), "SHAPE_MISMATCH"),
            (IndexOutOfRangeError("image", 4, 2), "INDEX_OUT_OF_RANGE"),
            (ImageTooSmallError((5, 5), 11), "IMAGE_TOO_SMALL"),
            (EmptyInitializationError("nothing above threshold"), "EMPTY_INITIALIZATION"),
            (EmptyCloudError("no points"), "EMPTY_CLOUD"),
            (EmptyMeshError(0.5, (4, 4, 4)), "EMPTY_MESH"),
            (NonFiniteLossError(7, float("nan"), "means"), "NON_FINITE_LOSS"),
            (DatasetError("bad"), "DATASET_INVALID"),
            (ConfigError("bad"), "CONFIG_INVALID"),
            (UsageError("bad"), "USAGE"),
        ],
    )
    def test_code(self, error: NasgsError, code: str) -> None:
        """Test the code attribute and base class."""
        assert isinstance(error, NasgsError)
        assert error.code == code
        assert str(error) == error.message


class TestExitCodes:
    """Test the CLI exit code mapping."""

    def test_usage_and_config_exit_one(self) -> None:
        """Test usage and configuration errors exit with 1."""
        assert UsageError("x").exit_code == 1
        assert ConfigError("x").exit_code == 1

    def test_runtime_errors_exit_two(self) -> None:
        """Test library errors exit with 2."""
        assert DatasetError("x").exit_code == 2
        assert EmptyCloudError("x").exit_code == 2

    def test_non_finite_loss_exits_three(self) -> None:
        """Test numerical failure exits with 3."""
        assert NonFiniteLossError(1, float("inf"), None).exit_code == 3


class TestMessages:
    """Test messages and dict conversion."""

    def test_shape_mismatch_message(self) -> None:
        """Test the message names the argument and both shapes."""
        error = ShapeMismatchError("grad_image", (4, 4), (4, 5))
        assert error.message == "grad_image has shape (4, 5), expected (4, 4)"
        assert error.details == {"name": "grad_image", "expected": [4, 4], "actual": [4, 5]}

    def test_index_message(self) -> None:
        """Test the half-open range is reported."""
        assert IndexOutOfRangeError("NoiseModel image", 3, 2).message == (
            "NoiseModel image index 3 out of range [0, 2)"
        )

    def test_degenerate_axis_message(self) -> None:
        """Test the axis variant mentions the z-axis."""
        assert "sonar z-axis" in DegeneratePointError(1.0, axis_distance=1e-9).message
        assert "origin" in DegeneratePointError(1e-9).message

    def test_non_finite_names_group(self) -> None:
        """Test the culprit parameter group is reported."""
        error = NonFiniteLossError(12, float("nan"), "opacity_logits")
        assert "iteration 12" in error.message
        assert "opacity_logits" in error.message
        assert error.details["parameter"] == "opacity_logits"

    def test_to_dict(self) -> None:
        """Test dict conversion for JSON reports."""
        error = DatasetError("missing frames", details={"path": "/tmp/x"})
        assert error.to_dict() == {
            "code": "DATASET_INVALID",
            "message": "missing frames",
            "details": {"path": "/tmp/x"},
        }

    def test_details_default_empty(self) -> None:
        """Test details default to an empty dict."""
        assert ConfigError("x").details == {}
