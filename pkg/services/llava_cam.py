"""Smoothed gradient class-activation maps over image tokens.

One CAM sample is: forward with capture, sum the logits of the realized
answer tokens, differentiate that scalar with respect to the hooked feature
map A of one layer, pool the gradient over positions into channel weights,
and take ``ReLU(A[image rows] @ alpha)``. ``smooth_cam`` averages samples
taken on Gaussian-perturbed patch grids, reshapes the result to the patch
grid and divides by its maximum.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator

from config.settings import settings
from services.autodiff import DTYPE, backward, seeded_generator
from services.errors import ContractError, DimensionError
from services.layout import MultimodalInput, TokenLayout
from services.mini_lvlm import HookPoint, MiniLVLM
from services.raster import grayscale_patches, hot_colormap, upsample, write_ppm

logger = logging.getLogger(__name__)


class CamConfig(BaseModel):
    """Settings of one smoothed CAM run."""

    layer: int = Field(..., ge=1, description="1-based layer whose feature map is explained")
    noise_s: float = Field(..., ge=0.0, description="Std of the Gaussian noise added to patches")
    n_samples: int = Field(default=1, ge=1)
    seed: int = 0
    hook_point: HookPoint = HookPoint.POST_ATTENTION_NORM
    answer_tokens: int = Field(default=1, ge=1, description="Greedy answer tokens explained")
    answer_step: int | None = Field(
        default=None, ge=0, description="Explain a single answer step instead of their sum"
    )

    @model_validator(mode="after")
    def _check_step(self) -> "CamConfig":
        if self.answer_step is not None and self.answer_step >= self.answer_tokens:
            raise ValueError(
                f"answer_step ({self.answer_step}) must be below answer_tokens ({self.answer_tokens})"
            )
        return self


@dataclass(frozen=True)
class SaliencyMap:
    """Patch-grid saliency.

    ``grid`` is the reported map; ``raw`` keeps the averaged map before
    max normalization.
    """

    grid: torch.Tensor
    normalized: bool
    raw: torch.Tensor | None = None

    @property
    def is_zero(self) -> bool:
        return bool((self.grid == 0).all())


# ----------------------------------------------------------------------
# Single-sample pipeline
# ----------------------------------------------------------------------


def answer_logit(
    logits: torch.Tensor, answer_positions: Sequence[int], answer_token_ids: Sequence[int]
) -> torch.Tensor:
    """Sum of the logits assigned to the realized answer token at each step.

    Raises:
        ContractError: If positions and ids differ in length or are empty.
    """
    if len(answer_positions) != len(answer_token_ids):
        raise ContractError(
            f"{len(answer_positions)} answer positions but {len(answer_token_ids)} token ids"
        )
    if not answer_positions:
        raise ContractError("at least one answer step is required")
    rows = torch.as_tensor(list(answer_positions), dtype=torch.long)
    ids = torch.as_tensor(list(answer_token_ids), dtype=torch.long)
    return logits[rows, ids].sum()


def feature_gradients(z_answer: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
    """Exact gradient of ``z_answer`` with respect to a captured feature map."""
    return backward(z_answer, {"feature": feature})["feature"]


def channel_weights(gradients: torch.Tensor) -> torch.Tensor:
    """Channel weights: gradient averaged over sequence positions."""
    return gradients.mean(dim=-2)


def cam_map(features: torch.Tensor, gradients: torch.Tensor, layout: TokenLayout) -> torch.Tensor:
    """ReLU of the channel-weighted feature map at the image-token rows.

    Args:
        features: ``[S, d]`` feature map A.
        gradients: ``[S, d]`` gradient G of the answer logit w.r.t. A.
        layout: Prompt layout locating the image rows.

    Returns:
        Length ``N_img`` non-negative map in image-token order.
    """
    if features.shape != gradients.shape or features.dim() != 2:
        raise DimensionError(
            f"features and gradients must be matching [S, d] maps, got "
            f"{tuple(features.shape)} and {tuple(gradients.shape)}"
        )
    if layout.image.stop > features.shape[0]:
        raise DimensionError(f"layout needs {layout.image.stop} rows, feature map has {features.shape[0]}")
    alpha = channel_weights(gradients.detach())
    image_rows = features.detach()[layout.image.start:layout.image.stop]
    return F.relu(image_rows @ alpha)


def perturb_image(image: torch.Tensor, noise_s: float, sample_index: int, seed: int) -> torch.Tensor:
    """Add ``N(0, noise_s^2)`` noise from the stream ``(seed, sample_index)``."""
    if noise_s < 0:
        raise ContractError(f"noise_s must be >= 0, got {noise_s}")
    image = image.to(DTYPE)
    if noise_s == 0:
        return image.clone()
    generator = seeded_generator(seed, sample_index)
    noise = torch.randn(image.shape, generator=generator, dtype=DTYPE)
    return image + noise_s * noise


def answer_positions(layout: TokenLayout, n_answers: int) -> list[int]:
    """Row whose logits produce answer step ``i``: ``P - 1 + i``."""
    return [layout.prompt_length - 1 + i for i in range(n_answers)]


def single_cam(
    model: MiniLVLM, prompt: MultimodalInput, answer_ids: Sequence[int], cfg: CamConfig
) -> torch.Tensor:
    """Raw (unnormalized) CAM vector for one input and fixed answer tokens."""
    answer_ids = list(answer_ids)
    seq, layout = model.embed_multimodal(prompt, answer_ids[:-1])
    logits, record = model.forward_with_capture(seq, layout, hook_point=cfg.hook_point)

    positions = answer_positions(layout, len(answer_ids))
    if cfg.answer_step is not None:
        positions, answer_ids = [positions[cfg.answer_step]], [answer_ids[cfg.answer_step]]

    z_answer = answer_logit(logits, positions, answer_ids)
    feature = record.feature(cfg.layer)
    gradients = feature_gradients(z_answer, feature)
    return cam_map(feature[0], gradients[0], layout)


# ----------------------------------------------------------------------
# Ensembles
# ----------------------------------------------------------------------


def cam_samples(
    model: MiniLVLM,
    prompt: MultimodalInput,
    cfg: CamConfig,
    answer_ids: Sequence[int] | None = None,
    workers: int | None = None,
) -> torch.Tensor:
    """Every per-sample raw map, ``[n_samples, N_img]`` in sample order.

    The answer tokens are decoded once on the unperturbed input and held
    fixed across the noisy samples.
    """
    if cfg.layer > model.config.n_layers:
        raise ContractError(f"layer {cfg.layer} exceeds n_layers={model.config.n_layers}")
    if answer_ids is None:
        answer_ids = model.greedy_decode(prompt, cfg.answer_tokens)
    workers = settings.CAM_WORKERS if workers is None else workers

    def sample(index: int) -> torch.Tensor:
        noisy = prompt.with_image(perturb_image(prompt.image, cfg.noise_s, index, cfg.seed))
        return single_cam(model, noisy, answer_ids, cfg)

    if workers <= 1 or cfg.n_samples == 1:
        maps = [sample(i) for i in range(cfg.n_samples)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(sample, i) for i in range(cfg.n_samples)]
            maps = [future.result() for future in futures]

    logger.debug(f"Computed {cfg.n_samples} CAM samples at layer {cfg.layer} (answer ids {answer_ids})")
    return torch.stack(maps)


def sequence_to_grid(values: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Row-major reshape of a length ``H*W`` vector onto the patch grid."""
    height, width = grid
    if values.shape != (height * width,):
        raise DimensionError(f"expected {height * width} values for a {height}x{width} grid, got {tuple(values.shape)}")
    return values.reshape(height, width)


def grid_to_sequence(grid: torch.Tensor) -> torch.Tensor:
    if grid.dim() != 2:
        raise DimensionError(f"grid must be 2-D, got shape {tuple(grid.shape)}")
    return grid.reshape(-1)


def normalize_map(grid: torch.Tensor) -> torch.Tensor:
    """Divide by the maximum; an all-zero map is returned unchanged."""
    peak = grid.max()
    if peak <= 0:
        return grid.clone()
    return grid / peak


def average_maps(samples: torch.Tensor, grid: tuple[int, int]) -> SaliencyMap:
    """Average raw sample maps, reshape to the grid and max-normalize."""
    raw = sequence_to_grid(samples.mean(dim=0), grid)
    return SaliencyMap(grid=normalize_map(raw), normalized=True, raw=raw)


def smooth_cam(
    model: MiniLVLM, prompt: MultimodalInput, cfg: CamConfig, workers: int | None = None
) -> SaliencyMap:
    """Smoothed, max-normalized CAM on the patch grid."""
    samples = cam_samples(model, prompt, cfg, workers=workers)
    return average_maps(samples, model.config.patch_grid)


def smoothing_variance(samples: torch.Tensor, sizes: Sequence[int], n_ensembles: int) -> dict[int, float]:
    """Across-ensemble variance of averaged maps for each ensemble size.

    For ensemble size ``N`` the first ``n_ensembles * N`` samples are split
    into consecutive ensembles of ``N``; the per-pixel variance of the
    ensemble means is averaged over pixels.

    Raises:
        ContractError: If the pool holds too few samples.
    """
    if n_ensembles < 2:
        raise ContractError("need at least two ensembles to estimate a variance")
    needed = n_ensembles * max(sizes)
    if samples.shape[0] < needed:
        raise ContractError(f"pool of {samples.shape[0]} samples is smaller than the {needed} required")

    curve: dict[int, float] = {}
    for size in sizes:
        ensembles = samples[: n_ensembles * size].reshape(n_ensembles, size, -1).mean(dim=1)
        curve[size] = float(ensembles.var(dim=0, unbiased=True).mean())
    return curve


# ----------------------------------------------------------------------
# Export
# ----------------------------------------------------------------------


def overlay_rgb(
    saliency: SaliencyMap,
    image: torch.Tensor,
    alpha: float | None = None,
    pixels: int | None = None,
) -> torch.Tensor:
    """Blend the grayscale image with the hot colormap using weight ``alpha * m``."""
    if not saliency.normalized:
        raise ContractError("overlay needs a normalized map")
    alpha = settings.OVERLAY_ALPHA if alpha is None else alpha
    pixels = settings.PATCH_PIXELS if pixels is None else pixels
    m = saliency.grid.to(torch.float64)
    gray = grayscale_patches(image)
    if gray.shape != m.shape:
        raise DimensionError(f"map {tuple(m.shape)} does not match image grid {tuple(gray.shape)}")

    base = gray[..., None].expand(*gray.shape, 3)
    weight = (alpha * m)[..., None]
    blended = (1.0 - weight) * base + weight * hot_colormap(m)
    return upsample(blended, pixels)


def overlay_export(
    saliency: SaliencyMap,
    image: torch.Tensor,
    path: str | Path,
    alpha: float | None = None,
    pixels: int | None = None,
) -> Path:
    """Write the overlay as a binary PPM."""
    return write_ppm(path, overlay_rgb(saliency, image, alpha, pixels))


def export_map_csv(saliency: SaliencyMap, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["row", "col", "value"])
        height, width = saliency.grid.shape
        for row in range(height):
            for col in range(width):
                writer.writerow([row, col, repr(float(saliency.grid[row, col]))])
    return path
