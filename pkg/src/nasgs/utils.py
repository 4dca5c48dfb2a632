"""Utility functions for output paths, binary tensor blobs and validation."""

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DatasetError, ShapeMismatchError

HEADER_LENGTH = struct.Struct('<I')


def ensure_directory(path: Path | str) -> Path:
    """
    Create a directory (and parents) if needed.

    Args:
        path: Directory path, relative paths are resolved against the cwd

    Returns:
        Absolute Path of the directory
    """
    directory = Path(path).expanduser().resolve()
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def write_tensor_blob(
    path: Path | str,
    header: dict[str, Any],
    tensors: dict[str, np.ndarray],
    dtype: str = '<f4',
) -> None:
    """
    Write a JSON header followed by little-endian tensors.

    Layout: uint32 header length, UTF-8 JSON header, then each tensor's raw
    bytes in the order listed under header["tensors"].

    Args:
        path: Output file
        header: Metadata; a "tensors" entry describing names and shapes is added
        tensors: Arrays in write order
        dtype: Storage dtype for every tensor
    """
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = [{"name": name, "shape": list(arr.shape)} for name, arr in tensors.items()]
    payload = json.dumps({**header, "dtype": dtype, "tensors": manifest}, sort_keys=True).encode()
    with out.open('wb') as f:
        f.write(HEADER_LENGTH.pack(len(payload)))
        f.write(payload)
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_tensor_blob(path: Path | str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """
    Read a blob written by write_tensor_blob.

    Returns:
        (header, tensors as float64 arrays keyed by name)

    Raises:
        DatasetError: If the file is missing or truncated
    """
    source = Path(path)
    if not source.is_file():
        raise DatasetError(f"Blob not found: {source}", details={"path": str(source)})
    raw = source.read_bytes()
    if len(raw) < HEADER_LENGTH.size:
        raise DatasetError(f"Blob {source} is truncated", details={"path": str(source)})
    (length,) = HEADER_LENGTH.unpack_from(raw, 0)
    start = HEADER_LENGTH.size
    try:
        header = json.loads(raw[start : start + length].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetError(f"Blob {source} has a malformed header", details={"path": str(source)}) from e
    dtype = np.dtype(header.get("dtype", '<f4'))
    offset = start + length
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * dtype.itemsize
        if end > len(raw):
            raise DatasetError(
                f"Blob {source} ends inside tensor '{entry['name']}'",
                details={"path": str(source)},
            )
        tensors[entry["name"]] = (
            np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).astype(np.float64)
        )
        offset = end
    return header, tensors


def require_same_shape(name: str, expected: tuple[int, ...], array: np.ndarray) -> None:
    """Raise ShapeMismatchError unless array has the expected shape."""
    if tuple(array.shape) != tuple(expected):
        raise ShapeMismatchError(name, tuple(expected), tuple(array.shape))
