"""
Image patchification and PNG input/output

Pixels are mapped to [-1, 1] with x / 127.5 - 1. A patch of side p becomes
one 3 p^2 vector, flattened row-major then channel. Reconstructions are
mapped back, clamped to [0, 255] and rounded half-up.
"""

import io
import logging
import os
from dataclasses import dataclass
from typing import List

import numpy as np
from PIL import Image, UnidentifiedImageError

from codec_io import atomic_write
from config import DEFAULT_PATCH_SIZE, IMAGE_CHANNELS, PIXEL_MAX
from core import ConfigError, FeatureGrid, ShapeMismatchError

logger = logging.getLogger(__name__)

_HALF_RANGE = PIXEL_MAX / 2.0


@dataclass(frozen=True)
class PatchConfig:
    """Patch side p and channel count; d = channels * p^2."""
    patch: int = DEFAULT_PATCH_SIZE
    channels: int = IMAGE_CHANNELS

    def __post_init__(self):
        if self.patch < 1 or self.channels < 1:
            raise ConfigError(f"patch side and channels must be >= 1, got {self.patch}, {self.channels}")

    @property
    def dim(self) -> int:
        return self.channels * self.patch * self.patch

    def grid_shape(self, height: int, width: int):
        if height % self.patch or width % self.patch:
            raise ShapeMismatchError(
                f"image size {height}x{width} is not divisible by patch side {self.patch}"
            )
        return height // self.patch, width // self.patch


def patchify(image: np.ndarray, config: PatchConfig = PatchConfig()) -> FeatureGrid:
    """(H, W, C) uint8 image -> (H/p, W/p, C p^2) feature grid in [-1, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != config.channels:
        raise ShapeMismatchError(f"expected an (H, W, {config.channels}) image, got shape {image.shape}")
    rows, cols = config.grid_shape(image.shape[0], image.shape[1])
    p = config.patch
    scaled = image.astype(np.float64) / _HALF_RANGE - 1.0
    blocks = scaled.reshape(rows, p, cols, p, config.channels).transpose(0, 2, 1, 3, 4)
    return FeatureGrid(blocks.reshape(rows, cols, config.dim))


def unpatchify(grid: FeatureGrid, config: PatchConfig = PatchConfig()) -> np.ndarray:
    """Inverse of patchify, in the [-1, 1] float domain."""
    if grid.dim != config.dim:
        raise ShapeMismatchError(f"grid dimension {grid.dim} does not match patch dimension {config.dim}")
    p = config.patch
    blocks = grid.data.reshape(grid.height, grid.width, p, p, config.channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(grid.height * p, grid.width * p, config.channels)


def to_pixels(values: np.ndarray) -> np.ndarray:
    """[-1, 1] floats -> uint8, clamped and rounded half-up."""
    pixels = (np.asarray(values, dtype=np.float64) + 1.0) * _HALF_RANGE
    return np.floor(np.clip(pixels, 0.0, PIXEL_MAX) + 0.5).astype(np.uint8)


def psnr(reference: np.ndarray, reconstruction: np.ndarray) -> float:
    """PSNR in dB between two uint8 images; inf when they are identical."""
    reference = np.asarray(reference, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    if reference.shape != reconstruction.shape:
        raise ShapeMismatchError(f"image shapes differ: {reference.shape} vs {reconstruction.shape}")
    err = float(np.mean((reference - reconstruction) ** 2))
    if err == 0.0:
        return float('inf')
    return float(10.0 * np.log10(PIXEL_MAX ** 2 / err))


def format_psnr(value: float) -> str:
    return 'inf' if np.isinf(value) else f"{value:.4f}"


def load_png(path: str) -> np.ndarray:
    """Read a PNG as an (H, W, 3) uint8 array."""
    try:
        img = Image.open(path)
    except UnidentifiedImageError:
        raise ConfigError(f"{path} is not an image file") from None
    with img:
        if img.format != 'PNG':
            raise ConfigError(f"{path} is not a PNG file")
        return np.array(img.convert('RGB'), dtype=np.uint8)


def save_png(path: str, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3:
        raise ShapeMismatchError(f"expected an (H, W, C) uint8 image, got {image.dtype} {image.shape}")
    buffer = io.BytesIO()
    Image.fromarray(image).save(buffer, format='PNG')
    atomic_write(path, buffer.getvalue())


def list_pngs(directory: str) -> List[str]:
    """PNG files of a directory in name order."""
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith('.png'))
    if not names:
        raise ConfigError(f"no PNG files in {directory}")
    return [os.path.join(directory, n) for n in names]
