"""Toy target distributions, the latent prior, and the ICRD raw-tensor file.

ICRD layout (little-endian): magic "ICRD", u32 count, u32 height, u32 width,
u32 channels, then count*h*w*c float32 pixels in row-major order. Pixels are
expected in [-1, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .autodiff import Array

DATASET_KINDS = ("gaussian_ring", "gaussian_grid", "synthetic_shapes",
                 "external_file")
SHAPE_CATALOG = ("rect", "cross", "disc")

MAGIC = b"ICRD"
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class PriorSpec:
    """Standard Gaussian prior over the latent space."""

    latent_dim: int = 16

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")


@dataclass
class DatasetSpec:
    """Description of one target distribution.

    gaussian_ring uses (n_modes, radius, mode_std); gaussian_grid uses
    (side, spacing, mode_std); synthetic_shapes uses (height, width,
    channels, catalog); external_file uses (path) and lazily loads the pool.
    """

    kind: str = "gaussian_ring"
    n_modes: int = 8
    radius: float = 2.0
    mode_std: float = 0.05
    side: int = 5
    spacing: float = 2.0
    height: int = 16
    width: int = 16
    channels: int = 1
    catalog: Tuple[str, ...] = SHAPE_CATALOG
    path: Optional[str] = None
    _pool: Optional[Array] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "gaussian_ring" and self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")
        if self.mode_std <= 0:
            raise ValueError("mode_std must be > 0")
        if self.kind == "synthetic_shapes":
            for name in self.catalog:
                if name not in SHAPE_CATALOG:
                    raise ValueError(f"unknown shape {name!r}")

    @property
    def dim(self) -> int:
        """Sample-space dimension (2 for point sets, h*w*c for images)."""
        if self.kind in ("gaussian_ring", "gaussian_grid"):
            return 2
        if self.kind == "synthetic_shapes":
            return self.height * self.width * self.channels
        return int(self._require_pool().shape[1])

    @property
    def is_image(self) -> bool:
        return self.kind in ("synthetic_shapes", "external_file")

    def mode_centers(self) -> Optional[Array]:
        """Known mixture centers for point datasets, else None."""
        if self.kind == "gaussian_ring":
            k = np.arange(self.n_modes)
            angles = 2.0 * np.pi * k / self.n_modes
            return self.radius * np.stack(
                [np.cos(angles), np.sin(angles)], axis=1)
        if self.kind == "gaussian_grid":
            offset = (self.side - 1) / 2.0
            coords = (np.arange(self.side) - offset) * self.spacing
            xs, ys = np.meshgrid(coords, coords, indexing="ij")
            return np.stack([xs.ravel(), ys.ravel()], axis=1)
        return None

    def geometry(self) -> Tuple[int, int, int]:
        if self.kind == "external_file":
            self._require_pool()
        return self.height, self.width, self.channels

    def _require_pool(self) -> Array:
        if self.kind != "external_file":
            raise ValueError("pool only exists for external_file datasets")
        if self._pool is None:
            pool, (h, w, c) = load_icrd(self.path)
            self._pool = pool
            self.height, self.width, self.channels = h, w, c
        return self._pool


def sample_prior(spec: PriorSpec, n: int,
                 rng: np.random.Generator) -> Array:
    """n i.i.d. standard-Gaussian latent vectors, shape (n, latent_dim)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.standard_normal((n, spec.latent_dim))


def sample_real(spec: DatasetSpec, n: int,
                rng: np.random.Generator) -> Array:
    """n samples from the target distribution, shape (n, spec.dim)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.kind in ("gaussian_ring", "gaussian_grid"):
        centers = spec.mode_centers()
        idx = rng.integers(0, len(centers), size=n)
        noise = rng.standard_normal((n, 2)) * spec.mode_std
        return centers[idx] + noise
    if spec.kind == "synthetic_shapes":
        return _sample_shapes(spec, n, rng)
    pool = spec._require_pool()
    idx = rng.integers(0, pool.shape[0], size=n)
    return pool[idx].copy()


def _sample_shapes(spec: DatasetSpec, n: int,
                   rng: np.random.Generator) -> Array:
    """Images on background -1 with one +1 shape each, flattened.

    Draw order per image: catalog index, size, then position (row, col).
    """
    h, w, c = spec.height, spec.width, spec.channels
    lo, hi = max(3, min(h, w) // 4), max(4, min(h, w) // 2)
    out = np.full((n, h, w, c), -1.0)
    kinds = rng.integers(0, len(spec.catalog), size=n)
    for i in range(n):
        name = spec.catalog[kinds[i]]
        size = int(rng.integers(lo, hi + 1))
        row = int(rng.integers(0, h - size + 1))
        col = int(rng.integers(0, w - size + 1))
        if name == "rect":
            out[i, row:row + size, col:col + size, :] = 1.0
        elif name == "cross":
            t = max(1, size // 3)
            mid_r = row + (size - t) // 2
            mid_c = col + (size - t) // 2
            out[i, mid_r:mid_r + t, col:col + size, :] = 1.0
            out[i, row:row + size, mid_c:mid_c + t, :] = 1.0
        else:  # disc
            r = size / 2.0
            cy, cx = row + r - 0.5, col + r - 0.5
            yy, xx = np.mgrid[0:h, 0:w]
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            out[i, mask, :] = 1.0
    return out.reshape(n, h * w * c)


def save_icrd(path, images: Array, geometry: Tuple[int, int, int]) -> None:
    """Write a batch of flattened images as an ICRD file (float32 payload)."""
    h, w, c = geometry
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != h * w * c:
        raise ValueError(
            f"save_icrd: batch {images.shape} does not match geometry "
            f"({h}, {w}, {c})")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, images.shape[0], h, w, c))
        fh.write(images.astype("<f4").tobytes())


def load_icrd(path) -> Tuple[Array, Tuple[int, int, int]]:
    """Read an ICRD file into float64 flattened images plus geometry."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(
            f"{path}: truncated header, file ends at byte {len(raw)} "
            f"(need {_HEADER.size})")
    magic, count, h, w, c = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic at byte 0: {magic!r}")
    expected = _HEADER.size + count * h * w * c * 4
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload mismatch at byte {len(raw)}, header promises "
            f"{expected} bytes")
    pixels = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    images = pixels.astype(np.float64).reshape(count, h * w * c)
    return images, (int(h), int(w), int(c))


def load_external(path) -> DatasetSpec:
    """Dataset spec backed by an in-memory pool from an ICRD file.

    Pixels are validated to lie in [-1, 1] after loading.
    """
    images, (h, w, c) = load_icrd(path)
    if images.size and (images.min() < -1.0 or images.max() > 1.0):
        raise ValueError(f"{path}: pixels outside [-1, 1]")
    spec = DatasetSpec(kind="external_file", path=str(path),
                       height=h, width=w, channels=c)
    spec._pool = images
    return spec
