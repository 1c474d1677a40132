"""Training on simulated samples, checkpoints, band adaptation and tiled inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigError, FormatError, LoadError, NumericError
from .hsi import HsiCube, ScoreMap, extract_patches
from .net import NetworkConfig, TDDNet
from .simulate import SimulatorConfig, simulate_dataset

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "train",
    "band_segments",
    "adapt_bands",
    "infer",
    "infer_segment",
    "average_segment_maps",
    "save_checkpoint",
    "load_checkpoint",
    "load_config_file",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    patch_size: int = 10
    n_samples: int = 2000
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.simulator, dict):
            self.simulator = SimulatorConfig.from_dict(self.simulator)
        self.validate()

    def validate(self):
        for name in ("patch_size", "n_samples", "batch_size", "lr", "log_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"training field '{name}' must be positive, got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.patch_size < 4:
            raise ConfigError(f"patch_size must be >= 4, got {self.patch_size}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("optimizer betas must lie in [0, 1) and eps must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["simulator"] = self.simulator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config field '{sorted(unknown)[0]}'")
        return cls(**d)


def load_config_file(path) -> tuple[dict, dict]:
    """Read ``{"train": {...}, "network": {...}}``; returns the two raw dicts."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict) or set(raw) - {"train", "network"}:
        raise ConfigError("config must be an object with optional 'train' and 'network' sections")
    return dict(raw.get("train", {})), dict(raw.get("network", {}))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict
    config: NetworkConfig
    seed: int = 0
    train_meta: dict = field(default_factory=dict)

    @property
    def in_bands(self) -> int:
        return self.config.in_bands

    def network(self) -> TDDNet:
        net = TDDNet(self.config, seed=self.seed, dtype=np.float32)
        try:
            net.load_state_dict(self.params)
        except ArgumentError as exc:
            raise LoadError(str(exc)) from None
        return net

    @classmethod
    def from_network(cls, net: TDDNet, train_meta=None) -> "Checkpoint":
        params = {k: np.array(v, dtype=np.float32) for k, v in net.state_dict().items()}
        return cls(params, net.config, net.seed, dict(train_meta or {}))


def _sidecar_path(path) -> Path:
    p = str(path)
    for suffix in (".ckpt.json", ".tb.json", ".tb.bin"):
        if p.endswith(suffix):
            p = p[: -len(suffix)]
    return Path(p + ".ckpt.json")


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``<path>.tb.json/.tb.bin`` and the ``<path>.ckpt.json`` sidecar."""
    sidecar = _sidecar_path(path)
    stem = str(sidecar)[: -len(".ckpt.json")]
    T.save_bundle(ckpt.params, stem)
    meta = {"config": ckpt.config.to_dict(), "in_bands": ckpt.in_bands, "seed": ckpt.seed, "train_meta": ckpt.train_meta}
    sidecar.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar


def load_checkpoint(path) -> Checkpoint:
    sidecar = _sidecar_path(path)
    stem = str(sidecar)[: -len(".ckpt.json")]
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise LoadError(f"missing checkpoint sidecar {sidecar}") from None
    except json.JSONDecodeError as exc:
        raise LoadError(f"checkpoint sidecar {sidecar} is not valid JSON: {exc}") from None
    try:
        config = NetworkConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise LoadError(f"checkpoint config is invalid: {exc}") from None
    if meta.get("in_bands") != config.in_bands:
        raise LoadError(f"sidecar in_bands {meta.get('in_bands')} disagrees with config {config.in_bands}")
    try:
        params = T.load_bundle(stem)
    except FormatError as exc:
        raise LoadError(str(exc)) from None
    ckpt = Checkpoint(params, config, int(meta.get("seed", 0)), meta.get("train_meta", {}))
    ckpt.network()  # validates names and shapes
    return ckpt


# ---------------------------------------------------------------------------
# training


def _batch_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(1,)))


def train(cube: HsiCube, cfg: TrainConfig, net_cfg: NetworkConfig | None = None, source_id=None, progress=None) -> Checkpoint:
    """Fit a fresh network to samples simulated from ``cube``.

    ``cube`` should already be normalized. ``progress(step, loss)`` is called
    every ``cfg.log_every`` steps. Raises :class:`NumericError` carrying the
    last good checkpoint if the loss becomes non-finite.
    """
    net_cfg = net_cfg or NetworkConfig(in_bands=cube.bands)
    if net_cfg.in_bands != cube.bands:
        raise ConfigError(f"network expects {net_cfg.in_bands} bands, cube has {cube.bands}")
    sim = cfg.simulator
    samples = simulate_dataset(cube, cfg.patch_size, cfg.n_samples, sim.max_fraction, sim.affine, cfg.seed, sim.regions)
    xs = np.stack([s.x for s in samples]).astype(np.float32)
    ys = np.stack([s.y for s in samples]).astype(np.float32)
    base_rate = float(ys.mean())

    net = TDDNet(net_cfg, seed=cfg.seed, dtype=np.float32)
    opt = T.Adam(net.params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    rng = _batch_rng(cfg.seed)
    meta = {
        "steps": cfg.steps,
        "source": source_id,
        "train_config": cfg.to_dict(),
        "label_base_rate": base_rate,
        "history": [],
    }
    running = None
    batch = min(cfg.batch_size, len(samples))
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(samples), size=batch, replace=False)
        opt.zero_grad()
        loss = net.loss(xs[idx], ys[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            meta["failed_step"] = step
            raise NumericError(
                f"non-finite loss at step {step}", step=step, checkpoint=Checkpoint.from_network(net, meta)
            )
        loss.backward()
        try:
            opt.step()
        except NumericError as exc:
            meta["failed_step"] = step
            raise NumericError(f"step {step}: {exc}", step=step, checkpoint=Checkpoint.from_network(net, meta)) from None
        if running is None:
            meta["initial_loss"] = value
            running = value
        else:
            running = 0.95 * running + 0.05 * value
        if step % cfg.log_every == 0 or step == cfg.steps:
            meta["history"].append([step, running])
            log.info("step %d running loss %.4f", step, running)
            if progress is not None:
                progress(step, running)
    meta["final_loss"] = running
    return Checkpoint.from_network(net, meta)


# ---------------------------------------------------------------------------
# band adaptation


def band_segments(b2: int, b1: int):
    """Band ranges covering ``[0, b2)`` in chunks of ``b1``.

    Returns ``None`` when ``b2 < b1`` (interpolation instead of slicing).
    A short remainder is replaced by the last ``b1`` bands.
    """
    if b1 < 1 or b2 < 1:
        raise ArgumentError(f"band counts must be >= 1, got {b2} and {b1}")
    if b2 < b1:
        return None
    segments = [(start, start + b1) for start in range(0, b2 - b1 + 1, b1)]
    if segments[-1][1] < b2:
        segments.append((b2 - b1, b2))
    return segments


def adapt_bands(cube: HsiCube, b1: int) -> list[HsiCube]:
    """Bring ``cube`` to ``b1`` bands by linear spectral interpolation or
    by cutting it into ``b1``-band segments."""
    segments = band_segments(cube.bands, b1)
    if segments is None:
        dst = np.linspace(0.0, cube.bands - 1, b1)
        flat = cube.data.reshape(-1, cube.bands).astype(np.float64)
        if cube.bands == 1:
            out = np.repeat(flat, b1, axis=1)
        else:
            lo = np.minimum(np.floor(dst).astype(int), cube.bands - 2)
            frac = dst - lo
            out = flat[:, lo] * (1 - frac) + flat[:, lo + 1] * frac
            # keep the endpoints bit-exact
            out[:, 0] = flat[:, 0]
            out[:, -1] = flat[:, -1]
        return [HsiCube(out.reshape(cube.height, cube.width, b1).astype(cube.data.dtype))]
    return [HsiCube(np.ascontiguousarray(cube.data[:, :, a:b])) for a, b in segments]


# ---------------------------------------------------------------------------
# inference


def infer_segment(cube: HsiCube, predict, patch_size: int, stride: int, batch_size: int = 64) -> np.ndarray:
    """Tile ``cube``, score each tile with ``predict`` and average overlaps.

    ``predict`` maps ``(N, P, P, B)`` patches to ``(N, P, P)`` maps.
    """
    patches = extract_patches(cube, patch_size, stride)
    sums = np.zeros((cube.height, cube.width))
    counts = np.zeros((cube.height, cube.width))
    for start in range(0, len(patches), batch_size):
        chunk = patches[start : start + batch_size]
        maps = predict(np.stack([p.data for p in chunk]))
        for patch, m in zip(chunk, maps):
            r, c = patch.origin
            sums[r : r + patch_size, c : c + patch_size] += m
            counts[r : r + patch_size, c : c + patch_size] += 1
    if counts.min() < 1:
        raise AssertionError("tiling left pixels uncovered")
    return sums / counts


def average_segment_maps(maps) -> np.ndarray:
    maps = list(maps)
    if not maps:
        raise ArgumentError("no segment maps to average")
    return np.mean(np.stack(maps), axis=0)


def infer(cube: HsiCube, ckpt: Checkpoint, patch_size: int = 10, stride: int | None = None, batch_size: int = 64) -> ScoreMap:
    """Whole-image anomaly map from a frozen checkpoint.

    Images smaller than the patch are processed with the largest square
    patch that fits.
    """
    net = ckpt.network()
    stride = stride or patch_size
    size = min(patch_size, cube.height, cube.width)
    if size < 2:
        raise ArgumentError(f"image {cube.height}x{cube.width} is too small to tile")
    if size != patch_size:
        log.info("patch size reduced from %d to %d to fit the image", patch_size, size)
    maps = [infer_segment(seg, lambda x: net.predict(x, batch_size), size, stride, batch_size) for seg in adapt_bands(cube, ckpt.in_bands)]
    return ScoreMap(np.clip(average_segment_maps(maps), 0.0, 1.0))
