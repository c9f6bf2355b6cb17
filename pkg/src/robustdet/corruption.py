"""Algorithmic image corruptions at five severity levels.

A desk-scale subset of the usual corruption benchmark families (noise,
blur, digital); weather corruptions needing texture assets are out of
scope. Each kind has a documented severity table below; severity 1..5
monotonically increases the distortion parameter (for ``shot_noise``,
``contrast``, ``pixelate`` and ``quantize`` the tabulated value decreases
because distortion grows as the parameter shrinks).

All corruptions operate on float [C, H, W] pixels in [0, 1], clamp their
output back to [0, 1], and are deterministic given the seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError

SEVERITY_PARAMS = {
    "gaussian_noise": (0.04, 0.06, 0.09, 0.13, 0.18),  # noise sigma
    "shot_noise": (250.0, 100.0, 50.0, 25.0, 12.0),  # photons per unit intensity
    "defocus_blur": (0.8, 1.2, 1.8, 2.6, 3.4),  # gaussian sigma (separable approx)
    "motion_blur": (3, 5, 7, 9, 11),  # kernel length in pixels
    "brightness": (0.08, 0.14, 0.20, 0.26, 0.32),  # additive shift
    "contrast": (0.75, 0.60, 0.45, 0.30, 0.20),  # scale toward the channel mean
    "pixelate": (0.6, 0.5, 0.4, 0.3, 0.25),  # downscale factor
    "quantize": (6, 5, 4, 3, 2),  # bits per channel (8-bit compression proxy)
}

CORRUPTION_KINDS = tuple(SEVERITY_PARAMS)


@dataclass
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SEVERITY_PARAMS:
            raise ConfigurationError(
                f"unknown corruption kind {self.kind!r}; choose from {CORRUPTION_KINDS}"
            )
        if not 1 <= self.severity <= 5:
            raise ConfigurationError("severity must be an integer in [1, 5]")

    @property
    def parameter(self):
        return SEVERITY_PARAMS[self.kind][self.severity - 1]


def gaussian_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return x + sigma * rng.standard_normal(x.shape)


def shot_noise(x: np.ndarray, photons: float, rng: np.random.Generator) -> np.ndarray:
    return rng.poisson(np.clip(x, 0, 1) * photons) / photons


def defocus_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    return np.stack([ndimage.gaussian_filter(c, sigma, mode="reflect") for c in x])


def motion_blur(x: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    angle = int(rng.integers(0, 4)) * 45  # direction snapped to 0/45/90/135 degrees
    kernel = np.zeros((length, length))
    c = length // 2
    for i in range(length):
        if angle == 0:
            kernel[c, i] = 1.0
        elif angle == 90:
            kernel[i, c] = 1.0
        elif angle == 45:
            kernel[length - 1 - i, i] = 1.0
        else:
            kernel[i, i] = 1.0
    kernel /= kernel.sum()
    return np.stack([ndimage.convolve(ch, kernel, mode="reflect") for ch in x])


def brightness(x: np.ndarray, shift: float) -> np.ndarray:
    return x + shift


def contrast(x: np.ndarray, factor: float) -> np.ndarray:
    mean = x.mean(axis=(1, 2), keepdims=True)
    return (x - mean) * factor + mean


def pixelate(x: np.ndarray, factor: float) -> np.ndarray:
    _, h, w = x.shape
    sh, sw = max(1, round(h * factor)), max(1, round(w * factor))
    down_y = np.minimum((np.arange(sh) + 0.5) * h / sh, h - 1).astype(np.int64)
    down_x = np.minimum((np.arange(sw) + 0.5) * w / sw, w - 1).astype(np.int64)
    small = x[:, down_y[:, None], down_x[None, :]]
    up_y = np.minimum(np.arange(h) * sh // h, sh - 1)
    up_x = np.minimum(np.arange(w) * sw // w, sw - 1)
    return small[:, up_y[:, None], up_x[None, :]]


def quantize(x: np.ndarray, bits: int) -> np.ndarray:
    levels = 2 ** bits - 1
    return np.round(np.clip(x, 0, 1) * levels) / levels


def corrupt(pixels: np.ndarray, spec: CorruptionSpec, seed) -> np.ndarray:
    """Apply one corruption; output float32 in [0, 1], same shape as input."""
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim != 3:
        raise ConfigurationError(f"expected [C, H, W] pixels, got shape {x.shape}")
    rng = np.random.default_rng(seed)
    p = spec.parameter
    if spec.kind == "gaussian_noise":
        out = gaussian_noise(x, p, rng)
    elif spec.kind == "shot_noise":
        out = shot_noise(x, p, rng)
    elif spec.kind == "defocus_blur":
        out = defocus_blur(x, p)
    elif spec.kind == "motion_blur":
        out = motion_blur(x, p, rng)
    elif spec.kind == "brightness":
        out = brightness(x, p)
    elif spec.kind == "contrast":
        out = contrast(x, p)
    elif spec.kind == "pixelate":
        out = pixelate(x, p)
    else:
        out = quantize(x, p)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
