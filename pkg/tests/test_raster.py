"""Tests for pixmap output and the overlay colormap."""

import matplotlib
import numpy as np
import torch

from services.autodiff import DTYPE
from services.raster import grayscale_patches, hot_colormap, read_pnm, upsample, write_pgm, write_ppm


def test_pgm_header_and_pixels(tmp_path):
    """Gray grids are stored as 8-bit P5 with one byte per pixel."""
    gray = torch.tensor([[0.0, 0.5], [1.0, 0.25]], dtype=DTYPE)
    path = write_pgm(tmp_path / "out" / "gray.pgm", gray)

    assert path.read_bytes().startswith(b"P5\n2 2\n255\n")
    assert read_pnm(path).tolist() == [[0, 128], [255, 64]]


def test_ppm_round_trip(tmp_path):
    """RGB grids are stored as P6 and read back unchanged."""
    rgb = torch.zeros(2, 3, 3, dtype=DTYPE)
    rgb[0, 1] = torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE)
    rgb[1, 2] = 1.0
    path = write_ppm(tmp_path / "rgb.ppm", rgb)

    assert path.read_bytes().startswith(b"P6\n3 2\n255\n")
    pixels = read_pnm(path)
    assert pixels.shape == (2, 3, 3)
    assert pixels[0, 1].tolist() == [255, 0, 0]
    assert pixels[1, 2].tolist() == [255, 255, 255]
    assert int(pixels[1, 0].sum()) == 0


def test_out_of_range_values_are_clipped(tmp_path):
    """Values outside [0, 1] saturate instead of wrapping."""
    path = write_pgm(tmp_path / "clip.pgm", torch.tensor([[-1.0, 2.0]], dtype=DTYPE))
    assert read_pnm(path).tolist() == [[0, 255]]


def test_hot_colormap_matches_matplotlib():
    """The overlay ramp is matplotlib's hot: white at 1, red before green before blue."""
    values = torch.linspace(0.0, 1.0, 11, dtype=DTYPE)
    colors = hot_colormap(values)

    expected = matplotlib.colormaps["hot"](values.numpy())[:, :3]
    np.testing.assert_allclose(colors.numpy(), expected)
    assert colors[-1].tolist() == [1.0, 1.0, 1.0]
    assert colors[0, 1] == 0.0 and colors[0, 2] == 0.0
    assert torch.all(colors[:, 0] >= colors[:, 1])
    assert torch.all(colors[:, 1] >= colors[:, 2])


def test_hot_colormap_keeps_grid_shape():
    """Test colormap output shape."""
    assert hot_colormap(torch.zeros(2, 3, dtype=DTYPE)).shape == (2, 3, 3)


def test_upsample_and_grayscale():
    """Test upsampling and patch intensity."""
    grid = torch.tensor([[0.0, 1.0]], dtype=DTYPE)
    assert upsample(grid, 2).tolist() == [[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]]

    image = torch.zeros(2, 2, 3, dtype=DTYPE)
    image[1, 1] = 3.0
    assert grayscale_patches(image).tolist() == [[0.0, 0.0], [0.0, 1.0]]
    assert torch.all(grayscale_patches(torch.ones(2, 2, 3, dtype=DTYPE)) == 0)
