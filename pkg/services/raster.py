"""Portable pixmap output (binary PGM / PPM) and the overlay colormap.

Everything is computed in float64 and rounded once to uint8, so identical
inputs give byte-identical files on every platform.
"""

from pathlib import Path

import matplotlib
import numpy as np
import torch
from PIL import Image

OVERLAY_COLORMAP = "hot"


def to_uint8(values: torch.Tensor) -> np.ndarray:
    """Map ``[0, 1]`` floats to bytes (round half to even, then clip)."""
    scaled = torch.round(values.detach().to(torch.float64).clamp(0.0, 1.0) * 255.0)
    return scaled.to(torch.uint8).numpy()


def upsample(grid: torch.Tensor, pixels: int) -> torch.Tensor:
    """Nearest-neighbour upsampling of the first two dims by ``pixels``."""
    return grid.repeat_interleave(pixels, dim=0).repeat_interleave(pixels, dim=1)


def hot_colormap(values: torch.Tensor) -> torch.Tensor:
    """RGB of matplotlib's black-red-yellow-white ``hot`` ramp for ``[0, 1]`` values."""
    cmap = matplotlib.colormaps[OVERLAY_COLORMAP]
    m = values.detach().to(torch.float64).clamp(0.0, 1.0).numpy()
    return torch.from_numpy(np.asarray(cmap(m), dtype=np.float64)[..., :3])


def grayscale_patches(image: torch.Tensor) -> torch.Tensor:
    """Per-patch intensity of an ``H x W x C`` grid: channel mean, min-max scaled.

    A constant grid maps to zeros.
    """
    intensity = image.detach().to(torch.float64).mean(dim=-1)
    low, high = intensity.min(), intensity.max()
    if high <= low:
        return torch.zeros_like(intensity)
    return (intensity - low) / (high - low)


def _save(pixels: np.ndarray, path: str | Path) -> Path:
    """uint8 ``H x W`` arrays become mode L (P5), ``H x W x 3`` arrays mode RGB (P6)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PPM")
    return path


def write_pgm(path: str | Path, gray: torch.Tensor) -> Path:
    """Write an ``H x W`` grid of ``[0, 1]`` floats as binary PGM (P5)."""
    return _save(to_uint8(gray), path)


def write_ppm(path: str | Path, rgb: torch.Tensor) -> Path:
    """Write an ``H x W x 3`` grid of ``[0, 1]`` floats as binary PPM (P6)."""
    return _save(to_uint8(rgb), path)


def read_pnm(path: str | Path) -> np.ndarray:
    """Pixels of a PGM (``H x W``) or PPM (``H x W x 3``) file."""
    with Image.open(path) as image:
        return np.asarray(image)
