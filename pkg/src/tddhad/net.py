"""Encoder/decoder detector with global and local self-attention.

The encoder is six conv blocks producing feature cubes E1..E6. Decoder
block i fuses the previous decoder output with E(7-i) through a 1x1
convolution, then refines it with a global (GAM) or local (LAM) attention
module. Blocks 1-5 also emit a side score map; block 6 emits the final
full-resolution anomaly map.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigError

__all__ = [
    "NetworkConfig",
    "TDDNet",
    "gam",
    "lam",
    "nearest_resize",
    "multi_scale_loss",
]

ATTENTION_KINDS = ("LAM", "GAM")


@dataclass
class NetworkConfig:
    in_bands: int
    encoder_channels: list = field(default_factory=lambda: [32, 64, 128, 128, 128, 128])
    spatial_factors: list = field(default_factory=lambda: [1, 2, 4, 4, 4, 4])
    dilations: list = field(default_factory=lambda: [1, 1, 1, 1, 2, 2])
    convs_per_block: int = 2
    heads: int = 4
    lam_window: tuple = (5, 5)
    attention_order: list = field(default_factory=lambda: ["LAM", "GAM", "LAM", "GAM", "LAM"])
    loss_weights: list = field(default_factory=lambda: [0.5, 0.5, 0.5, 1.0, 1.0, 1.0])

    def __post_init__(self):
        self.lam_window = tuple(self.lam_window)
        self.validate()

    @property
    def decoder_channels(self) -> list:
        return list(reversed(self.encoder_channels))

    def validate(self):
        if self.in_bands < 1:
            raise ConfigError(f"in_bands must be >= 1, got {self.in_bands}")
        for name in ("encoder_channels", "spatial_factors", "dilations", "loss_weights"):
            if len(getattr(self, name)) != 6:
                raise ConfigError(f"{name} must have 6 entries, got {len(getattr(self, name))}")
        if any(c < 1 for c in self.encoder_channels):
            raise ConfigError("encoder channel widths must be positive")
        prev = 1
        for f in self.spatial_factors:
            if f < prev or f % prev:
                raise ConfigError(f"spatial factors must be nondecreasing multiples, got {self.spatial_factors}")
            prev = f
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be >= 1, got {self.dilations}")
        if self.convs_per_block < 1:
            raise ConfigError("convs_per_block must be >= 1")
        if len(self.attention_order) != 5 or any(k not in ATTENTION_KINDS for k in self.attention_order):
            raise ConfigError(f"attention_order must be 5 tags from {ATTENTION_KINDS}, got {self.attention_order}")
        if self.heads < 1 or any(c % self.heads for c in self.decoder_channels):
            raise ConfigError(f"heads={self.heads} must divide every decoder width {self.decoder_channels}")
        kh, kw = self.lam_window
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"LAM window must be odd, got {self.lam_window}")
        if any(w <= 0 for w in self.loss_weights):
            raise ConfigError(f"loss weights must be > 0, got {self.loss_weights}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lam_window"] = list(self.lam_window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config field '{sorted(unknown)[0]}'")
        return cls(**d)


# ---------------------------------------------------------------------------
# attention modules


def gam(x: T.Tensor, params: dict, heads: int, return_weights=False):
    """Multi-head global self-attention over all spatial positions.

    ``params`` holds ``q.weight``, ``q.bias``, ``k.weight``, ``k.bias``,
    ``proj`` (C x C) and ``fuse.weight``, ``fuse.bias``. Values are the
    channel segments of ``x`` itself.
    """
    n, c, h, w = x.shape
    if c % heads:
        raise ConfigError(f"{c} channels cannot be split into {heads} heads")
    d = c // heads
    hw = h * w
    q = T.conv2d(x, params["q.weight"], params["q.bias"])
    k = T.conv2d(x, params["k.weight"], params["k.bias"])
    q = T.transpose(T.reshape(q, (n, heads, d, hw)), (0, 1, 3, 2))
    k = T.reshape(k, (n, heads, d, hw))
    v = T.transpose(T.reshape(x, (n, heads, d, hw)), (0, 1, 3, 2))
    weights = T.softmax(T.scale(T.matmul(q, k), 1.0 / math.sqrt(d)), axis=-1)
    heads_out = T.matmul(weights, v)  # (n, heads, hw, d)
    merged = T.reshape(T.transpose(heads_out, (0, 2, 1, 3)), (n, hw, c))
    mapped = T.matmul(merged, params["proj"])
    context = T.reshape(T.transpose(mapped, (0, 2, 1)), (n, c, h, w))
    out = T.conv2d(T.concat([x, context], axis=1), params["fuse.weight"], params["fuse.bias"])
    return (out, weights) if return_weights else out


def lam(x: T.Tensor, params: dict, window=(5, 5), return_weights=False):
    """Windowed self-attention: each position becomes a softmax-weighted
    average of its zero-padded neighbourhood, then is fused with itself.

    Correlation logits are dot products scaled by ``1/sqrt(C)``.
    """
    kh, kw = window
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"LAM window must be odd, got {window}")
    n, c, h, w = x.shape
    neigh = T.unfold_window(x, kh, kw)  # (n, c, K, h, w)
    centre = T.reshape(x, (n, c, 1, h, w))
    logits = T.scale(T.sum(T.mul(centre, neigh), axis=1), 1.0 / math.sqrt(c))  # (n, K, h, w)
    weights = T.softmax(logits, axis=1)
    context = T.sum(T.mul(T.reshape(weights, (n, 1, kh * kw, h, w)), neigh), axis=2)
    out = T.conv2d(T.concat([x, context], axis=1), params["fuse.weight"], params["fuse.bias"])
    if return_weights:
        return out, weights, context
    return out


# ---------------------------------------------------------------------------
# loss


def nearest_resize(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes (half-pixel centers)."""
    h, w = mask.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[..., rows[:, None], cols[None, :]]


def multi_scale_loss(scores, target, weights, eps=1e-7) -> T.Tensor:
    """Weighted sum of per-scale mean cross-entropies.

    ``scores`` are the side outputs ``(N, 1, H_i, W_i)``; ``target`` is the
    full-resolution label ``(N, H, W)`` or ``(N, 1, H, W)``.
    """
    target = np.asarray(target)
    if target.ndim == 3:
        target = target[:, None]
    if len(scores) != len(weights):
        raise ArgumentError(f"{len(scores)} score maps but {len(weights)} loss weights")
    final = scores[-1]
    if final.shape != target.shape:
        raise ArgumentError(f"label shape {target.shape} does not match final score map {final.shape}")
    total = None
    for s, w in zip(scores, weights):
        g = nearest_resize(target, *s.shape[2:])
        term = T.scale(T.binary_cross_entropy(s, g, eps), w)
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# network


class TDDNet:
    """Parameters plus forward pass. ``params`` maps names to tensors."""

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=None):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype or T.get_default_dtype()).type
        self.params = self._init_params(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------

    def parameter_shapes(self) -> dict:
        cfg = self.config
        shapes = {}
        c_in = cfg.in_bands
        for b, c_out in enumerate(cfg.encoder_channels, start=1):
            for j in range(1, cfg.convs_per_block + 1):
                shapes[f"enc{b}.conv{j}.weight"] = (c_out, c_in, 3, 3)
                shapes[f"enc{b}.conv{j}.bias"] = (c_out,)
                c_in = c_out
        enc = cfg.encoder_channels
        prev = None
        for i in range(1, 7):
            c = enc[6 - i]
            fuse_in = c if prev is None else prev + c
            shapes[f"dec{i}.fuse.weight"] = (c, fuse_in, 1, 1)
            shapes[f"dec{i}.fuse.bias"] = (c,)
            if i <= 5:
                kind = cfg.attention_order[i - 1].lower()
                if kind == "gam":
                    for qk in ("q", "k"):
                        shapes[f"dec{i}.gam.{qk}.weight"] = (c, c, 1, 1)
                        shapes[f"dec{i}.gam.{qk}.bias"] = (c,)
                    shapes[f"dec{i}.gam.proj"] = (c, c)
                shapes[f"dec{i}.{kind}.fuse.weight"] = (c, 2 * c, 1, 1)
                shapes[f"dec{i}.{kind}.fuse.bias"] = (c,)
            shapes[f"side{i}.weight"] = (1, c, 1, 1)
            shapes[f"side{i}.bias"] = (1,)
            prev = c
        return shapes

    def _init_params(self, rng) -> dict:
        params = {}
        for name, shape in self.parameter_shapes().items():
            if name.endswith("bias"):
                arr = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                # relu convs get the wider He bound
                bound = math.sqrt((6.0 if name.startswith("enc") else 3.0) / fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            params[name] = T.Tensor(arr, requires_grad=True, name=name, dtype=self.dtype)
        return params

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, arrays: dict):
        expected = self.parameter_shapes()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ArgumentError(f"parameter names differ from config: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != tuple(shape):
                raise ArgumentError(f"parameter '{name}' has shape {arrays[name].shape}, config expects {shape}")
            self.params[name] = T.Tensor(np.array(arrays[name]), requires_grad=True, name=name, dtype=self.dtype)

    def _sub(self, prefix) -> dict:
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    # -- forward ----------------------------------------------------------

    def _as_input(self, patches):
        """``(N, P, P, B)`` numpy patches -> ``(N, B, P, P)`` tensor."""
        if isinstance(patches, T.Tensor):
            return patches
        x = np.asarray(patches)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[3] != self.config.in_bands:
            raise ArgumentError(
                f"expected patches of shape (N, P, P, {self.config.in_bands}), got {np.shape(patches)}"
            )
        if min(x.shape[1:3]) < 2:
            raise ArgumentError(f"patch must be at least 2x2, got {x.shape[1:3]}")
        return T.Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)), dtype=self.dtype)

    def encode(self, patches) -> list:
        cfg = self.config
        x = self._as_input(patches)
        feats = []
        prev_factor = 1
        for b in range(1, 7):
            ratio = cfg.spatial_factors[b - 1] // prev_factor
            prev_factor = cfg.spatial_factors[b - 1]
            if ratio > 1:
                x = T.maxpool2d(x, ratio, ratio)
            for j in range(1, cfg.convs_per_block + 1):
                x = T.conv2d(
                    x,
                    self.params[f"enc{b}.conv{j}.weight"],
                    self.params[f"enc{b}.conv{j}.bias"],
                    dilation=cfg.dilations[b - 1],
                )
                x = T.relu(x)
            feats.append(x)
        return feats

    def decode_block(self, i: int, d_prev, e_skip):
        """Decoder block ``i`` (1-based). Returns ``D_i`` (``D_i1`` for block 6)."""
        if d_prev is None:
            fused_in = e_skip
        else:
            d_prev = T.bilinear_resize(d_prev, *e_skip.shape[2:])
            fused_in = T.concat([d_prev, e_skip], axis=1)
        d1 = T.conv2d(fused_in, self.params[f"dec{i}.fuse.weight"], self.params[f"dec{i}.fuse.bias"])
        if d1.shape[2:] != e_skip.shape[2:]:
            raise AssertionError(f"decoder block {i} produced {d1.shape}, skip is {e_skip.shape}")
        if i == 6:
            return d1
        kind = self.config.attention_order[i - 1]
        if kind == "GAM":
            return gam(d1, self._sub(f"dec{i}.gam."), self.config.heads)
        return lam(d1, self._sub(f"dec{i}.lam."), self.config.lam_window)

    def decode(self, feats) -> list:
        d, outs = None, []
        for i in range(1, 7):
            d = self.decode_block(i, d, feats[6 - i])
            outs.append(d)
        return outs

    def side_outputs(self, decoded) -> list:
        return [
            T.sigmoid(T.conv2d(d, self.params[f"side{i}.weight"], self.params[f"side{i}.bias"]))
            for i, d in enumerate(decoded, start=1)
        ]

    def forward(self, patches) -> list:
        """Side outputs ``S_1..S_6`` as ``(N, 1, H_i, W_i)`` tensors."""
        return self.side_outputs(self.decode(self.encode(patches)))

    def loss(self, patches, labels) -> T.Tensor:
        return multi_scale_loss(self.forward(patches), labels, self.config.loss_weights)

    def predict(self, patches, batch_size: int = 64) -> np.ndarray:
        """Final anomaly maps ``(N, P, P)`` without recording a graph."""
        x = np.asarray(patches)
        if x.ndim == 3:
            x = x[None]
        outs = []
        with T.no_grad():
            for start in range(0, len(x), batch_size):
                outs.append(self.forward(x[start : start + batch_size])[-1].data[:, 0])
        return np.concatenate(outs, axis=0)
