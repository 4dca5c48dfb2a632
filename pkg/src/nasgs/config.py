"""Configuration loading: TOML run config and environment log settings."""

import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError
from .models import (
    RasterSettings,
    ReconstructionConfig,
    SimConfig,
    SonarIntrinsics,
    TrainConfig,
)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

LOG_LEVELS: dict[str, int] = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


class LogSettings(BaseSettings):
    """Environment settings. NASGS_LOG selects the log verbosity."""

    model_config = SettingsConfigDict(env_prefix="NASGS_", extra="ignore")

    log: Literal["error", "warn", "info", "debug"] = "info"


def configure_logging(level: str | None = None) -> int:
    """
    Configure root logging on standard error.

    Args:
        level: Explicit level name; None reads NASGS_LOG

    Returns:
        The numeric logging level applied

    Raises:
        ConfigError: If NASGS_LOG holds an unknown level
    """
    if level is None:
        try:
            level = LogSettings().log
        except ValidationError as e:
            raise ConfigError(
                f"NASGS_LOG must be one of {sorted(LOG_LEVELS)}",
                details={"errors": e.errors(include_url=False)},
            ) from e
    numeric = LOG_LEVELS[level]
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)
    return numeric


class IntrinsicsTable(BaseModel):
    """Arguments for SonarIntrinsics.from_fov (TOML table [intrinsics]), FOVs in degrees."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    azimuth_fov_deg: float = Field(default=90.0, gt=0, lt=360)
    elevation_fov_deg: float = Field(default=20.0, gt=0, lt=180)
    min_range: float = Field(default=0.5, ge=0)
    max_range: float = Field(default=10.0, gt=0)
    height: int = Field(default=399, ge=1)
    width: int = Field(default=512, ge=1)
    ea_height: int | None = Field(default=None, ge=1)
    ea_width: int | None = Field(default=None, ge=1)

    def build(self) -> SonarIntrinsics:
        """Create the intrinsics with the standard pixel layout."""
        return SonarIntrinsics.from_fov(
            azimuth_fov=math.radians(self.azimuth_fov_deg),
            elevation_fov=math.radians(self.elevation_fov_deg),
            min_range=self.min_range,
            max_range=self.max_range,
            height=self.height,
            width=self.width,
            ea_height=self.ea_height,
            ea_width=self.ea_width,
        )


class RunConfig(BaseModel):
    """All TOML tables. Unknown tables or keys are rejected."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    train: TrainConfig = Field(default_factory=TrainConfig)
    sim: SimConfig = Field(default_factory=SimConfig)
    raster: RasterSettings = Field(default_factory=RasterSettings)
    reconstruction: ReconstructionConfig = Field(default_factory=ReconstructionConfig)
    intrinsics: IntrinsicsTable = Field(default_factory=IntrinsicsTable)


def parse_config(data: dict[str, Any]) -> RunConfig:
    """
    Validate a parsed TOML document.

    Args:
        data: Mapping of table name to table contents

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: On unknown tables, unknown keys or invalid values
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors(include_url=False)[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(
            f"Invalid configuration at '{location}': {first['msg']}",
            details={"errors": e.errors(include_url=False)},
        ) from e


def load_config(path: Path | str | None) -> RunConfig:
    """
    Load a TOML run configuration.

    Args:
        path: TOML file path; None returns all defaults

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: If the file is missing, is not valid TOML, or fails validation
    """
    if path is None:
        return RunConfig()
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"Config file not found: {config_path}", details={"path": str(config_path)})
    try:
        with config_path.open("rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Malformed TOML in {config_path}: {e}", details={"path": str(config_path)}) from e
    return parse_config(data)
