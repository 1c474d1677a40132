"""Labeled anomaly samples from unlabeled patches.

Each sample goes through three stages:

1. pick a small rectangle inside a patch,
2. fill it with per-pixel spectrally shuffled copies of the patch,
3. warp patch and label together with a random rotation/scale/shift.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError
from .hsi import BinaryMask, HsiCube, container_paths, load_cube, load_mask, save_cube, save_mask

__all__ = [
    "RectRegion",
    "AffineParams",
    "AffineRanges",
    "SimulatorConfig",
    "TrainingSample",
    "select_anomaly_region",
    "spectral_shuffle",
    "implant_anomaly",
    "affine_matrix",
    "inverse_params",
    "warp_sample",
    "sample_affine",
    "simulate_sample",
    "simulate_dataset",
    "sample_rng",
    "write_dataset",
    "read_dataset",
]


@dataclass(frozen=True)
class RectRegion:
    top: int
    left: int
    h: int
    w: int

    def contains(self, size: int) -> bool:
        return 0 <= self.top and 0 <= self.left and self.top + self.h <= size and self.left + self.w <= size

    def mask(self, size: int) -> np.ndarray:
        m = np.zeros((size, size), dtype=np.uint8)
        m[self.top : self.top + self.h, self.left : self.left + self.w] = 1
        return m


@dataclass(frozen=True)
class AffineParams:
    """Rotation ``theta`` (radians, anti-clockwise), scale ``s``, shift ``b``
    (dx, dy) and rotation ``center`` (c_x, c_y), all in pixel units with x
    along columns and y along rows."""

    theta: float = 0.0
    s: float = 1.0
    b: tuple = (0.0, 0.0)
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.s > 0:
            raise ArgumentError(f"affine scale must be > 0, got {self.s}")

    @classmethod
    def for_patch(cls, size, theta=0.0, s=1.0, b=(0.0, 0.0)):
        c = (size - 1) / 2.0
        return cls(float(theta), float(s), (float(b[0]), float(b[1])), (c, c))

    def to_json(self) -> dict:
        return {"theta": self.theta, "s": self.s, "b": list(self.b), "center": list(self.center)}


@dataclass(frozen=True)
class AffineRanges:
    theta: tuple = (0.0, 2 * math.pi)
    scale: tuple = (0.7, 1.3)
    shift_fraction: float = 0.15


@dataclass(frozen=True)
class SimulatorConfig:
    max_fraction: float = 0.2
    affine: AffineRanges = field(default_factory=AffineRanges)
    regions: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "SimulatorConfig":
        d = dict(d)
        affine = d.pop("affine", None)
        if isinstance(affine, dict):
            affine = AffineRanges(
                theta=tuple(affine.get("theta", AffineRanges.theta)),
                scale=tuple(affine.get("scale", AffineRanges.scale)),
                shift_fraction=float(affine.get("shift_fraction", AffineRanges.shift_fraction)),
            )
        return cls(affine=affine or AffineRanges(), **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["affine"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["affine"].items()}
        return d


@dataclass(frozen=True)
class TrainingSample:
    x: np.ndarray
    y: np.ndarray
    params: dict = field(default_factory=dict, compare=False)


# ---------------------------------------------------------------------------
# procedure 1


def select_anomaly_region(patch_size: int, max_fraction: float, rng: np.random.Generator) -> RectRegion:
    """Rectangle with area at most ``max_fraction * P**2``.

    Height and width are drawn uniformly from ``1..P`` and rejected until the
    area bound holds; the position is then uniform among valid placements.
    """
    if patch_size < 2:
        raise ArgumentError(f"patch size must be >= 2, got {patch_size}")
    if not 0 < max_fraction < 0.5:
        raise ArgumentError(f"max_fraction must lie in (0, 0.5), got {max_fraction}")
    limit = max_fraction * patch_size * patch_size
    if limit < 1:
        raise ArgumentError(f"max_fraction {max_fraction} leaves no room for a 1x1 region in a {patch_size}px patch")
    while True:
        h, w = (int(v) for v in rng.integers(1, patch_size + 1, size=2))
        if h * w <= limit:
            break
    top = int(rng.integers(0, patch_size - h + 1))
    left = int(rng.integers(0, patch_size - w + 1))
    return RectRegion(top, left, h, w)


# ---------------------------------------------------------------------------
# procedure 2


def spectral_shuffle(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independently permute every pixel's spectrum (last axis)."""
    return rng.permuted(np.asarray(patch), axis=-1)


def implant_anomaly(x1: np.ndarray, x2: np.ndarray, region: RectRegion):
    """Paste the shuffled pixels of ``x2`` into ``x1`` inside ``region``."""
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    if x1.shape != x2.shape:
        raise ArgumentError(f"patch shapes differ: {x1.shape} vs {x2.shape}")
    if x1.ndim != 3 or x1.shape[0] != x1.shape[1]:
        raise ArgumentError(f"expected a square P x P x B patch, got {x1.shape}")
    if not region.contains(x1.shape[0]):
        raise ArgumentError(f"region {region} does not fit a {x1.shape[0]}px patch")
    y3 = region.mask(x1.shape[0])
    x3 = np.where(y3[:, :, None] == 1, x2, x1)
    return x3, y3


# ---------------------------------------------------------------------------
# procedure 3


def affine_matrix(params: AffineParams) -> np.ndarray:
    """2 x 3 rotation/scale matrix about ``params.center``."""
    alpha = params.s * math.cos(params.theta)
    beta = params.s * math.sin(params.theta)
    cx, cy = params.center
    return np.array(
        [
            [alpha, beta, (1 - alpha) * cx - beta * cy],
            [-beta, alpha, beta * cx + (1 - alpha) * cy],
        ]
    )


def inverse_params(params: AffineParams) -> AffineParams:
    """Parameters of the map that undoes ``params`` (same center)."""
    t = affine_matrix(params)
    a_inv = np.linalg.inv(t[:, :2])
    b = -a_inv @ np.asarray(params.b, dtype=float)
    return AffineParams(-params.theta, 1.0 / params.s, (float(b[0]), float(b[1])), params.center)


def _source_coords(size: int, params: AffineParams):
    """For every output pixel, the (row, col) it samples under inverse mapping."""
    t = affine_matrix(params)
    a = t[:, :2]
    offset = t[:, 2] + np.asarray(params.b, dtype=float)
    rows, cols = np.mgrid[0:size, 0:size]
    dst = np.stack([cols.ravel(), rows.ravel()]).astype(float)
    src = np.linalg.solve(a, dst - offset[:, None])
    src_col = np.floor(src[0] + 0.5).astype(int).reshape(size, size)
    src_row = np.floor(src[1] + 0.5).astype(int).reshape(size, size)
    return src_row, src_col


def warp_sample(x3: np.ndarray, y3: np.ndarray, params: AffineParams) -> TrainingSample:
    """Apply ``p' = T p + b`` to the patch and its label (nearest neighbour).

    Samples that fall outside the patch take the nearest border pixel for
    ``x`` and 0 for ``y``.
    """
    x3 = np.asarray(x3)
    y3 = np.asarray(y3)
    if x3.shape[:2] != y3.shape:
        raise ArgumentError(f"patch {x3.shape[:2]} and label {y3.shape} differ spatially")
    size = y3.shape[0]
    src_row, src_col = _source_coords(size, params)
    inside = (src_row >= 0) & (src_row < size) & (src_col >= 0) & (src_col < size)
    r = np.clip(src_row, 0, size - 1)
    c = np.clip(src_col, 0, size - 1)
    x4 = x3[r, c]
    y4 = np.where(inside, y3[r, c], 0).astype(np.uint8)
    return TrainingSample(x4, y4)


def sample_affine(patch_size: int, ranges: AffineRanges, rng: np.random.Generator) -> AffineParams:
    theta = rng.uniform(*ranges.theta)
    s = rng.uniform(*ranges.scale)
    shift = ranges.shift_fraction * patch_size
    b = rng.uniform(-shift, shift, size=2)
    return AffineParams.for_patch(patch_size, theta, s, b)


# ---------------------------------------------------------------------------
# dataset


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def simulate_sample(patch: np.ndarray, cfg: SimulatorConfig, rng: np.random.Generator, max_tries: int = 100):
    """Run the three procedures on one patch. Returns ``(sample, pre_warp_label)``."""
    size = patch.shape[0]
    for _ in range(max_tries):
        regions = [select_anomaly_region(size, cfg.max_fraction, rng) for _ in range(cfg.regions)]
        x2 = spectral_shuffle(patch, rng)
        x3, y3 = patch, np.zeros((size, size), dtype=np.uint8)
        for region in regions:
            x1 = np.where(region.mask(size)[:, :, None] == 1, 0, x3)
            x3, y_r = implant_anomaly(x1, x2, region)
            y3 = y3 | y_r
        params = sample_affine(size, cfg.affine, rng)
        warped = warp_sample(x3, y3, params)
        if warped.y.any():
            meta = {"regions": [asdict(r) for r in regions], "affine": params.to_json()}
            return TrainingSample(warped.x, warped.y, meta), y3
    raise ArgumentError(f"could not draw a sample with a non-empty label after {max_tries} tries")


def simulate_dataset(
    cube: HsiCube,
    patch_size: int,
    n_samples: int,
    max_fraction: float = 0.2,
    affine_ranges: AffineRanges | None = None,
    seed: int = 0,
    regions: int = 1,
    return_prewarp: bool = False,
):
    """Crop random patches from ``cube`` and turn each into a labeled sample.

    Sample ``i`` uses only ``sample_rng(seed, i)``, so any subset of samples
    can be regenerated independently and in any order.
    """
    if patch_size < 2 or patch_size > min(cube.height, cube.width):
        raise ArgumentError(f"patch size {patch_size} must lie in [2, {min(cube.height, cube.width)}]")
    if n_samples < 0:
        raise ArgumentError(f"n_samples must be >= 0, got {n_samples}")
    cfg = SimulatorConfig(max_fraction, affine_ranges or AffineRanges(), regions)
    samples, prewarp = [], []
    for i in range(n_samples):
        rng = sample_rng(seed, i)
        r = int(rng.integers(0, cube.height - patch_size + 1))
        c = int(rng.integers(0, cube.width - patch_size + 1))
        patch = cube.data[r : r + patch_size, c : c + patch_size]
        sample, y3 = simulate_sample(patch, cfg, rng)
        sample.params.update({"origin": [r, c], "index": i})
        samples.append(sample)
        prewarp.append(y3)
    if return_prewarp:
        return samples, prewarp
    return samples


def write_dataset(samples, out_dir, seed: int) -> Path:
    """Write samples as containers plus a ``manifest.json`` index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        stem = f"sample_{i:05d}"
        save_cube(HsiCube(sample.x), out / f"{stem}_x")
        save_mask(BinaryMask(sample.y), out / f"{stem}_y")
        entries.append(
            {
                "sample_id": i,
                "x_path": container_paths(f"{stem}_x")[0].name,
                "y_path": container_paths(f"{stem}_y")[0].name,
                "seed": int(seed),
                "params": sample.params,
            }
        )
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1) + "\n", encoding="utf-8")
    return manifest


def read_dataset(manifest_path) -> list[TrainingSample]:
    manifest_path = Path(manifest_path)
    try:
        entries = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {manifest_path}: {exc}") from None
    if not isinstance(entries, list):
        raise FormatError("manifest must be a JSON list")
    samples = []
    for entry in entries:
        for key in ("sample_id", "x_path", "y_path", "seed", "params"):
            if key not in entry:
                raise FormatError(f"manifest entry is missing field '{key}'")
        x = load_cube(manifest_path.parent / entry["x_path"]).data
        y = load_mask(manifest_path.parent / entry["y_path"]).values
        samples.append(TrainingSample(x, y, entry["params"]))
    return samples
