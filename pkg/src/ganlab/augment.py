"""Semantics-preserving augmentation transforms for images and latents.

All transforms are plain array functions: they never touch an autodiff graph,
so consistency targets built from them are data, not differentiable paths.
Image batches are (n, h, w, c); pipelines accept flattened batches and
reshape using the spec's geometry. Every function draws from the passed
generator in a fixed documented order, so outputs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .autodiff import Array

STEP_KINDS = ("flip", "shift", "cutout", "noise")


@dataclass(frozen=True)
class Step:
    """One pipeline step: flip(prob), shift(max_pixels), cutout(size),
    noise(sigma)."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown augmentation step {self.kind!r}")
        if self.value < 0:
            raise ValueError(f"{self.kind}: value must be >= 0")
        if self.kind == "flip" and not 0.0 <= self.value <= 1.0:
            raise ValueError("flip: prob must be in [0, 1]")


@dataclass(frozen=True)
class AugmentationSpec:
    """Ordered transform steps plus image geometry when image steps appear.

    For non-image (2D point) data the pipeline is a single noise step:
    additive per-coordinate Gaussian jitter.
    """

    steps: Tuple[Step, ...] = ()
    height: int = 0
    width: int = 0
    channels: int = 0

    def __post_init__(self):
        if not self.has_image_steps():
            return
        h, w, c = self.height, self.width, self.channels
        if h < 1 or w < 1 or c < 1:
            raise ValueError("image steps require positive (h, w, c) geometry")
        for step in self.steps:
            if step.kind == "shift" and step.value >= min(h, w):
                raise ValueError(
                    f"shift: max_pixels {step.value} must be < min(h, w)")
            if step.kind == "cutout" and not 0 < step.value <= min(h, w):
                raise ValueError(
                    f"cutout: size {step.value} outside (0, {min(h, w)}]")

    def has_image_steps(self) -> bool:
        return any(s.kind in ("flip", "shift", "cutout") for s in self.steps)

    def image_dim(self) -> int:
        return self.height * self.width * self.channels


def _require_images(name: str, batch: Array) -> Array:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4:
        raise ValueError(
            f"{name}: expected (n, h, w, c) batch, got shape {batch.shape}")
    return batch


def flip_horizontal(batch: Array, rng: np.random.Generator,
                    prob: float) -> Array:
    """Mirror each image about the vertical axis with probability ``prob``.

    Draws n uniforms (one coin per image) even when prob is 0 or 1.
    """
    batch = _require_images("flip_horizontal", batch)
    if not 0.0 <= prob <= 1.0:
        raise ValueError("flip_horizontal: prob must be in [0, 1]")
    coins = rng.random(batch.shape[0]) < prob
    out = batch.copy()
    out[coins] = out[coins, :, ::-1, :]
    return out


def translate_image(image: Array, dx: int, dy: int) -> Array:
    """Shift one (h, w, c) image by dx columns / dy rows, zero-filling."""
    h, w, _ = image.shape
    out = np.zeros_like(image)
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = image[src_r, src_c]
    return out


def shift(batch: Array, rng: np.random.Generator, max_pixels: int) -> Array:
    """Translate each image by (dx, dy) uniform on {-max..max}^2, zero-fill.

    Offsets are drawn per axis independently: all dx first, then all dy.
    """
    batch = _require_images("shift", batch)
    m = int(max_pixels)
    if m < 0 or m >= min(batch.shape[1], batch.shape[2]):
        raise ValueError(f"shift: max_pixels {m} invalid for {batch.shape}")
    n = batch.shape[0]
    dxs = rng.integers(-m, m + 1, size=n)
    dys = rng.integers(-m, m + 1, size=n)
    out = np.empty_like(batch)
    for i in range(n):
        out[i] = translate_image(batch[i], int(dxs[i]), int(dys[i]))
    return out


def cutout(batch: Array, rng: np.random.Generator, size: int) -> Array:
    """Zero one size x size square per image, fully inside the image.

    Top-left corners are uniform; rows are drawn for the whole batch first,
    then columns.
    """
    batch = _require_images("cutout", batch)
    n, h, w, _ = batch.shape
    s = int(size)
    if not 0 < s <= min(h, w):
        raise ValueError(f"cutout: size {s} outside (0, {min(h, w)}]")
    rows = rng.integers(0, h - s + 1, size=n)
    cols = rng.integers(0, w - s + 1, size=n)
    out = batch.copy()
    for i in range(n):
        out[i, rows[i]:rows[i] + s, cols[i]:cols[i] + s, :] = 0.0
    return out


def perturb_latent(z: Array, rng: np.random.Generator, sigma: float) -> Array:
    """z + Gaussian noise with per-coordinate standard deviation sigma."""
    z = np.asarray(z, dtype=np.float64)
    if sigma < 0:
        raise ValueError("perturb_latent: sigma must be >= 0")
    return z + sigma * rng.standard_normal(z.shape)


def apply_pipeline(spec: AugmentationSpec, batch: Array,
                   rng: np.random.Generator) -> Array:
    """Apply the spec's steps in order; output shape equals input shape.

    Image steps reshape a flattened (n, d) batch through the spec geometry;
    noise steps apply to the batch as-is.
    """
    batch = np.asarray(batch, dtype=np.float64)
    original_shape = batch.shape
    out = batch
    for step in spec.steps:
        if step.kind == "noise":
            out = perturb_latent(out, rng, step.value)
            continue
        n = out.shape[0]
        if out.size != n * spec.image_dim():
            raise ValueError(
                f"apply_pipeline: batch shape {original_shape} does not "
                f"match geometry ({spec.height}, {spec.width}, "
                f"{spec.channels})")
        images = out.reshape(n, spec.height, spec.width, spec.channels)
        if step.kind == "flip":
            images = flip_horizontal(images, rng, step.value)
        elif step.kind == "shift":
            images = shift(images, rng, int(step.value))
        elif step.kind == "cutout":
            images = cutout(images, rng, int(step.value))
        out = images.reshape(original_shape)
    return out.copy() if out is batch else out
