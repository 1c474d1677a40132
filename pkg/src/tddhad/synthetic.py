"""Seeded synthetic cubes: smooth low-rank background plus per-band noise."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .hsi import HsiCube


def smooth_spectra(n: int, bands: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` smooth positive spectra built from a few Gaussian bumps each."""
    grid = np.linspace(0.0, 1.0, bands)
    spectra = np.empty((n, bands))
    for k in range(n):
        centres = rng.uniform(0, 1, size=3)
        widths = rng.uniform(0.1, 0.4, size=3)
        heights = rng.uniform(0.2, 1.0, size=3)
        spectra[k] = 0.1 + sum(h * np.exp(-0.5 * ((grid - c) / w) ** 2) for c, w, h in zip(centres, widths, heights))
    return spectra


def synthetic_cube(height=32, width=32, bands=20, rank=8, noise=0.02, smoothness=4.0, seed=0) -> HsiCube:
    """Mix ``rank`` smooth endmember spectra with smooth abundance maps.

    ``noise`` bounds the per-band uniform noise amplitude as a fraction of
    that band's noise-free dynamic range.
    """
    rng = np.random.default_rng(seed)
    endmembers = smooth_spectra(rank, bands, rng)
    fields = np.stack([gaussian_filter(rng.standard_normal((height, width)), smoothness, mode="wrap") for _ in range(rank)])
    # tiny images can smooth to a flat field
    fields /= np.maximum(fields.std(axis=(1, 2), keepdims=True), 1e-12)
    logits = 2.0 * fields
    abundances = np.exp(logits - logits.max(axis=0, keepdims=True))
    abundances /= abundances.sum(axis=0, keepdims=True)
    data = np.einsum("khw,kb->hwb", abundances, endmembers)
    span = data.max(axis=(0, 1)) - data.min(axis=(0, 1))
    data = data + rng.uniform(-1.0, 1.0, size=data.shape) * (noise * span)
    return HsiCube(data.astype(np.float32))
