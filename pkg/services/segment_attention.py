"""Segment-wise attention accounting: how much a query row reads each segment.

For every layer the head-averaged attention of the chosen query rows is
summed over the system, image and user columns and normalised so the three
shares sum to one.
"""

import csv
import logging
from pathlib import Path
from typing import Sequence

import torch
from pydantic import BaseModel, Field

from config.settings import settings
from services.errors import ContractError
from services.layout import TokenLayout
from services.mini_lvlm import AttentionRecord
from services.raster import upsample, write_pgm

logger = logging.getLogger(__name__)

CSV_HEADER = ("layer", "lambda_sys", "lambda_img", "lambda_user")


class SegmentShares(BaseModel):
    """Influence rates of the three segments at one layer."""

    layer: int = Field(..., ge=1)
    sys: float = Field(..., ge=0.0, le=1.0)
    img: float = Field(..., ge=0.0, le=1.0)
    user: float = Field(..., ge=0.0, le=1.0)

    @property
    def total(self) -> float:
        return self.sys + self.img + self.user


class InfluenceProfile(BaseModel):
    """Per-layer segment shares, optionally broken down by head."""

    layers: list[SegmentShares]
    per_head: list[list[SegmentShares]] | None = None

    @property
    def image_shares(self) -> list[float]:
        return [shares.img for shares in self.layers]


class ProfileReport(BaseModel):
    """Files written by :func:`profile_report` and what they flag."""

    csv_path: str
    image_path: str
    threshold: float
    flagged_layer: int | None = Field(None, description="First layer whose image share < threshold")
    last_layer_rise: bool = Field(
        False, description="Image or user share rises at the last layer (observable only)"
    )


def answer_query_rows(layout: TokenLayout, total_length: int, first_only: bool = False) -> list[int]:
    """Rows that produce answer tokens.

    The row producing answer step ``t`` is the final row of decode step ``t``:
    the last prompt row, then each generated row except the last one.
    """
    start = layout.prompt_length - 1
    if start < 0:
        raise ContractError("empty prompt has no answer row")
    if first_only:
        return [start]
    return list(range(start, total_length))


def _check_rows(rows: Sequence[int], layout: TokenLayout, total_length: int) -> list[int]:
    rows = list(rows)
    if not rows:
        raise ContractError("query_rows must not be empty")
    first_full_row = layout.prompt_length - 1
    for row in rows:
        if row < first_full_row:
            raise ContractError(
                f"query row {row} precedes the end of the prompt ({first_full_row}) "
                "and cannot see every segment"
            )
        if row >= total_length:
            raise ContractError(f"query row {row} is outside a sequence of length {total_length}")
    return rows


def segment_sums(attention: torch.Tensor, layout: TokenLayout, rows: Sequence[int]) -> torch.Tensor:
    """Raw attention mass per segment.

    Args:
        attention: ``[..., S, S]`` attention rows.
        layout: Prompt layout.
        rows: Query rows to read.

    Returns:
        ``[..., len(rows), 3]`` sums over system, image and user columns.
    """
    selected = attention[..., list(rows), :]
    return torch.stack(
        [
            selected[..., layout.system.start:layout.system.stop].sum(dim=-1),
            selected[..., layout.image.start:layout.image.stop].sum(dim=-1),
            selected[..., layout.user.start:layout.user.stop].sum(dim=-1),
        ],
        dim=-1,
    )


def _normalised_shares(attention: torch.Tensor, layout: TokenLayout, rows: list[int]) -> torch.Tensor:
    sums = segment_sums(attention, layout, rows)
    total = sums.sum(dim=-1, keepdim=True)
    if bool((total <= 0).any()):
        raise ContractError("a query row puts no attention on the prompt")
    return sums / total


def _to_shares(layer: int, values: torch.Tensor) -> SegmentShares:
    sys_share, img_share, user_share = (float(v) for v in values.clamp(0.0, 1.0))
    return SegmentShares(layer=layer, sys=sys_share, img=img_share, user=user_share)


def influence_rates(
    record: AttentionRecord,
    layout: TokenLayout | None = None,
    query_rows: Sequence[int] | None = None,
    *,
    first_answer_only: bool = False,
    per_head: bool = False,
) -> InfluenceProfile:
    """Per-layer influence rates of the system, image and user segments.

    Heads are averaged before the segment summation; shares are then averaged
    over the query rows and the batch.

    Args:
        record: Capture from ``forward_with_capture``.
        layout: Prompt layout (defaults to the record's).
        query_rows: Rows to account for; defaults to every answer-producing row.
        first_answer_only: With ``query_rows=None``, use only the first answer row.
        per_head: Also compute the per-head breakdown.

    Raises:
        ContractError: If a query row cannot see the whole prompt.
    """
    layout = layout or record.layout
    total_length = record.sequence_length
    if query_rows is None:
        query_rows = answer_query_rows(layout, total_length, first_only=first_answer_only)
    rows = _check_rows(query_rows, layout, total_length)

    layers: list[SegmentShares] = []
    heads: list[list[SegmentShares]] = []
    for layer in range(1, record.n_layers + 1):
        attention = record.attention(layer)  # [B, H, S, S]
        averaged = attention.mean(dim=1)
        shares = _normalised_shares(averaged, layout, rows).reshape(-1, 3).mean(dim=0)
        layers.append(_to_shares(layer, shares))

        if per_head:
            head_shares = _normalised_shares(attention, layout, rows)  # [B, H, R, 3]
            head_means = head_shares.transpose(0, 1).reshape(attention.shape[1], -1, 3).mean(dim=1)
            heads.append([_to_shares(layer, values) for values in head_means])

    return InfluenceProfile(layers=layers, per_head=heads if per_head else None)


def flag_layer(profile: InfluenceProfile, threshold: float | None = None) -> int | None:
    """First layer whose image share falls below ``threshold``."""
    threshold = settings.IMAGE_SHARE_THRESHOLD if threshold is None else threshold
    for shares in profile.layers:
        if shares.img < threshold:
            return shares.layer
    return None


def last_layer_rise(profile: InfluenceProfile) -> bool:
    """Whether the image or user share goes up at the final layer."""
    if len(profile.layers) < 2:
        return False
    before, last = profile.layers[-2], profile.layers[-1]
    return last.img > before.img or last.user > before.user


def write_profile_csv(profile: InfluenceProfile, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for shares in profile.layers:
            writer.writerow(
                [shares.layer, repr(shares.sys), repr(shares.img), repr(shares.user)]
            )
    return path


def render_share_matrix(profile: InfluenceProfile, cell_pixels: int | None = None) -> torch.Tensor:
    """Layers x segments grayscale matrix (white = full share)."""
    cell = settings.PATCH_PIXELS if cell_pixels is None else cell_pixels
    matrix = torch.tensor(
        [[s.sys, s.img, s.user] for s in profile.layers], dtype=torch.float64
    )
    return upsample(matrix, cell)


def profile_report(
    profile: InfluenceProfile,
    output_dir: str | Path,
    threshold: float | None = None,
) -> ProfileReport:
    """Write ``influence.csv`` and ``influence.pgm`` and flag the image-share drop."""
    threshold = settings.IMAGE_SHARE_THRESHOLD if threshold is None else threshold
    output_dir = Path(output_dir)
    csv_path = write_profile_csv(profile, output_dir / "influence.csv")
    image_path = write_pgm(output_dir / "influence.pgm", render_share_matrix(profile))
    flagged = flag_layer(profile, threshold)
    if flagged is not None:
        logger.info(f"Image share first drops below {threshold} at layer {flagged}")

    return ProfileReport(
        csv_path=str(csv_path),
        image_path=str(image_path),
        threshold=threshold,
        flagged_layer=flagged,
        last_layer_rise=last_layer_rise(profile),
    )
