"""Hyperspectral cube, mask and score-map containers.

On disk every raster is a pair of files::

    <name>.hsi.json   {"height", "width", "bands", "dtype": "f32",
                       "order": "bsq", "endian": "little"}
    <name>.hsi.bin    band-sequential little-endian float32 payload

Masks and score maps use the same container with ``bands == 1``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError, FormatError, SizeError

__all__ = [
    "HsiCube",
    "BinaryMask",
    "ScoreMap",
    "Patch",
    "container_paths",
    "load_cube",
    "save_cube",
    "load_mask",
    "save_mask",
    "load_score_map",
    "save_score_map",
    "normalize_cube",
    "patch_origins",
    "extract_patches",
]

HEADER_KEYS = ("height", "width", "bands", "dtype", "order", "endian")
_DISK_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class HsiCube:
    """An H x W x B raster. ``data`` is indexed ``[row, col, band]``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ArgumentError(f"cube data must be H x W x B with positive sizes, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise DataError("cube contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or min(values.shape) < 1:
            raise ArgumentError(f"mask must be a non-empty H x W array, got shape {values.shape}")
        if not np.all((values == 0) | (values == 1)):
            raise DataError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "values", values.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ScoreMap:
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2 or min(scores.shape) < 1:
            raise ArgumentError(f"score map must be a non-empty H x W array, got shape {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise DataError("score map contains non-finite values")
        object.__setattr__(self, "scores", scores)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class Patch:
    origin: tuple
    size: int
    data: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# container I/O


def container_paths(path) -> tuple[Path, Path]:
    """Return ``(header, payload)`` paths for a container.

    Accepts the header path, the payload path or the bare stem.
    """
    p = str(path)
    for suffix in (".hsi.json", ".hsi.bin", ".hsi"):
        if p.endswith(suffix):
            p = p[: -len(suffix)]
            break
    return Path(p + ".hsi.json"), Path(p + ".hsi.bin")


def _read_header(header_path: Path) -> dict:
    try:
        text = header_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FormatError(f"missing header file: {header_path}") from None
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"header {header_path} is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError(f"header {header_path} must be a JSON object")
    for key in HEADER_KEYS:
        if key not in header:
            raise FormatError(f"header field '{key}' is missing")
    extra = set(header) - set(HEADER_KEYS)
    if extra:
        raise FormatError(f"header field '{sorted(extra)[0]}' is not allowed")
    for key in ("height", "width", "bands"):
        value = header[key]
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise FormatError(f"header field '{key}' must be a positive integer, got {value!r}")
    for key, expected in (("dtype", "f32"), ("order", "bsq"), ("endian", "little")):
        if header[key] != expected:
            raise FormatError(f"header field '{key}' must be {expected!r}, got {header[key]!r}")
    return header


def _read_raster(path) -> np.ndarray:
    header_path, payload_path = container_paths(path)
    header = _read_header(header_path)
    h, w, b = header["height"], header["width"], header["bands"]
    try:
        payload = payload_path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing payload file: {payload_path}") from None
    expected = h * w * b * _DISK_DTYPE.itemsize
    if len(payload) != expected:
        raise SizeError(
            f"payload {payload_path} holds {len(payload)} bytes, header declares "
            f"{h}x{w}x{b} float32 = {expected} bytes"
        )
    bsq = np.frombuffer(payload, dtype=_DISK_DTYPE).reshape(b, h, w)
    data = np.ascontiguousarray(bsq.transpose(1, 2, 0)).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise DataError(f"payload {payload_path} contains non-finite values")
    return data


def _write_raster(data: np.ndarray, path) -> None:
    header_path, payload_path = container_paths(path)
    h, w, b = data.shape
    header = {"height": h, "width": w, "bands": b, "dtype": "f32", "order": "bsq", "endian": "little"}
    payload = np.ascontiguousarray(data.transpose(2, 0, 1), dtype=_DISK_DTYPE).tobytes()
    try:
        if header_path.parent and not header_path.parent.exists():
            os.makedirs(header_path.parent, exist_ok=True)
        header_path.write_text(json.dumps(header) + "\n", encoding="utf-8")
        payload_path.write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write container {header_path}: {exc}") from exc


def load_cube(path) -> HsiCube:
    return HsiCube(_read_raster(path))


def save_cube(cube: HsiCube, path) -> None:
    _write_raster(cube.data, path)


def load_mask(path) -> BinaryMask:
    data = _read_raster(path)
    if data.shape[2] != 1:
        raise FormatError(f"mask container must have bands=1, got {data.shape[2]}")
    return BinaryMask(data[:, :, 0])


def save_mask(mask: BinaryMask, path) -> None:
    _write_raster(mask.values.astype(np.float32)[:, :, None], path)


def load_score_map(path) -> ScoreMap:
    data = _read_raster(path)
    if data.shape[2] != 1:
        raise FormatError(f"score-map container must have bands=1, got {data.shape[2]}")
    return ScoreMap(data[:, :, 0])


def save_score_map(scores: ScoreMap, path) -> None:
    _write_raster(scores.scores.astype(np.float32)[:, :, None], path)


# ---------------------------------------------------------------------------
# preprocessing


def normalize_cube(cube: HsiCube) -> HsiCube:
    """Per-band min-max rescale to [0, 1]; constant bands become 0."""
    data = cube.data.astype(np.float64)
    lo = data.min(axis=(0, 1), keepdims=True)
    span = data.max(axis=(0, 1), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (data - lo) / safe, 0.0)
    return HsiCube(np.clip(out, 0.0, 1.0).astype(cube.data.dtype))


def patch_origins(length: int, size: int, stride: int) -> list[int]:
    """Origins along one axis; the last one is clamped to end at the border."""
    origins = list(range(0, length - size + 1, stride))
    if origins[-1] != length - size:
        origins.append(length - size)
    return origins


def extract_patches(cube: HsiCube, size: int, stride: int) -> list[Patch]:
    if size < 2:
        raise ArgumentError(f"patch size must be >= 2, got {size}")
    if size > min(cube.height, cube.width):
        raise ArgumentError(f"patch size {size} exceeds cube extent {cube.height}x{cube.width}")
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    patches = []
    for r in patch_origins(cube.height, size, stride):
        for c in patch_origins(cube.width, size, stride):
            patches.append(Patch((r, c), size, cube.data[r : r + size, c : c + size].copy()))
    return patches
