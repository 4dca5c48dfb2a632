"""Image file I/O: 16-bit grayscale PNG and raw float32 with a JSON sidecar."""

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, ShapeMismatchError

logger = logging.getLogger(__name__)

PNG_MAX = 65535


def save_image_png(image: np.ndarray, path: Path | str) -> None:
    """
    Write an intensity image in [0, 1] as a 16-bit grayscale PNG.

    Values are clipped to [0, 1] and rounded to the nearest 16-bit level.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError("image", (-1, -1), arr.shape)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    levels = np.round(np.clip(arr, 0.0, 1.0) * PNG_MAX).astype(np.uint16)
    Image.fromarray(levels).save(out, format="PNG")


def load_image_png(path: Path | str) -> np.ndarray:
    """
    Read a grayscale PNG as float64 intensities in [0, 1].

    8-bit files are scaled by 255, 16-bit files by 65535.

    Raises:
        DatasetError: If the file is missing, unreadable or not single-channel
    """
    source = Path(path)
    if not source.is_file():
        raise DatasetError(f"Image not found: {source}", details={"path": str(source)})
    try:
        with Image.open(source) as img:
            mode = img.mode
            data = np.asarray(img)
    except OSError as e:
        raise DatasetError(f"Unreadable image {source}: {e}", details={"path": str(source)}) from e
    if data.ndim != 2:
        raise DatasetError(
            f"Image {source} is not single-channel (mode {mode})",
            details={"path": str(source), "mode": mode},
        )
    scale = 255.0 if mode in ("L", "P") else float(PNG_MAX)
    return data.astype(np.float64) / scale


def save_image_bin(image: np.ndarray, path: Path | str) -> Path:
    """
    Write a row-major little-endian float32 image plus a JSON sidecar.

    Returns:
        Path of the sidecar, holding {"height", "width", "dtype"}
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError("image", (-1, -1), arr.shape)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    arr.astype('<f4').tofile(out)
    sidecar = out.with_suffix(".json")
    sidecar.write_text(
        json.dumps({"height": arr.shape[0], "width": arr.shape[1], "dtype": "<f4"}, indent=2)
    )
    return sidecar


def load_image_bin(path: Path | str) -> np.ndarray:
    """Read an image written by save_image_bin."""
    source = Path(path)
    sidecar = source.with_suffix(".json")
    if not source.is_file() or not sidecar.is_file():
        raise DatasetError(f"Missing raw image or sidecar for {source}")
    meta = json.loads(sidecar.read_text())
    data = np.fromfile(source, dtype='<f4')
    expected = int(meta["height"]) * int(meta["width"])
    if data.size != expected:
        raise DatasetError(
            f"{source} holds {data.size} values, sidecar declares {expected}",
            details={"path": str(source)},
        )
    return data.reshape(int(meta["height"]), int(meta["width"])).astype(np.float64)
