"""Attention-ranked image-token truncation at a chosen layer.

At layer l the heads are averaged, one query row scores every image token,
the top-k image tokens survive and layers l..n run on
``system + kept image + user (+ generated)`` rows only. Surviving rows keep
their original position ids.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch
from pydantic import BaseModel, Field

from services.errors import ContractError
from services.layout import MultimodalInput, TokenLayout
from services.mini_lvlm import AttentionRecord, MiniLVLM

logger = logging.getLogger(__name__)


class ScoreRowMode(str, Enum):
    """Which query row ranks the image tokens."""

    LAST_IMAGE = "last_image"
    LAST_PROMPT = "last_prompt"


class TruncationMode(str, Enum):
    """Delete dropped rows, or keep them and only hide their columns."""

    REMOVE = "remove"
    MASK = "mask"


class TruncationPlan(BaseModel):
    """Where and how much to truncate, plus the resolved index sets."""

    layer: int = Field(..., ge=1, description="1-based layer where truncation starts")
    k: int = Field(..., ge=0, description="Image tokens kept")
    score_row_mode: ScoreRowMode = ScoreRowMode.LAST_IMAGE
    mode: TruncationMode = TruncationMode.REMOVE
    kept_indices: list[int] | None = Field(None, description="Kept image indices (0-based)")
    rebuilt_set: list[int] | None = Field(None, description="Surviving prompt rows, in order")

    def to_json(self) -> str:
        """Structured plan record: layer, k, score_row_mode, kept_indices."""
        return json.dumps(
            {
                "layer": self.layer,
                "k": self.k,
                "score_row_mode": self.score_row_mode.value,
                "kept_indices": self.kept_indices,
            },
            sort_keys=True,
        )


@dataclass
class TruncationResult:
    """Outcome of :func:`run_truncated`."""

    plan: TruncationPlan
    logits: torch.Tensor
    generated: list[int]


def head_average(record: AttentionRecord, layer: int) -> torch.Tensor:
    """Mean over heads of the layer's attention, ``[B, S, S]``."""
    return record.attention(layer).mean(dim=-3)


def resolve_score_row(layout: TokenLayout, mode: ScoreRowMode | str = ScoreRowMode.LAST_IMAGE) -> int:
    """0-based query row used for scoring."""
    mode = ScoreRowMode(mode)
    if layout.n_img == 0:
        raise ContractError("layout has no image tokens to score")
    if mode is ScoreRowMode.LAST_IMAGE:
        return layout.image.stop - 1
    return layout.prompt_length - 1


def image_scores(attention: torch.Tensor, layout: TokenLayout, score_row: int) -> torch.Tensor:
    """Attention of ``score_row`` on the image columns, in index order.

    Raises:
        ContractError: If the row's causal prefix does not cover every image token.
    """
    if score_row < layout.image.stop - 1:
        raise ContractError(
            f"score row {score_row} cannot see every image token (last image index {layout.image.stop - 1})"
        )
    if score_row >= attention.shape[-2]:
        raise ContractError(f"score row {score_row} is outside the attention matrix")
    return attention[..., score_row, layout.image.start:layout.image.stop]


def argtop(scores: torch.Tensor, k: int, offset: int = 0) -> list[int]:
    """Indices of the ``k`` largest scores, ascending, shifted by ``offset``.

    Ties go to the lower index.
    """
    if k < 0:
        raise ContractError(f"k must be >= 0, got {k}")
    if k == 0:
        return []
    order = torch.sort(scores.detach(), descending=True, stable=True).indices[:k]
    return sorted(int(i) + offset for i in order)


def rebuild_index_set(layout: TokenLayout, kept_image: Sequence[int], total_length: int | None = None) -> list[int]:
    """Surviving rows: system, kept image, user, then any generated rows."""
    total_length = layout.prompt_length if total_length is None else total_length
    return [*layout.system, *sorted(kept_image), *layout.user, *range(layout.prompt_length, total_length)]


def select_image_tokens(
    record: AttentionRecord,
    layout: TokenLayout,
    layer: int,
    k: int,
    score_row_mode: ScoreRowMode | str = ScoreRowMode.LAST_IMAGE,
) -> list[list[int]]:
    """Kept image indices for every batch item."""
    batch = record.positions.shape[0]
    if k == 0:
        return [[] for _ in range(batch)]
    scores = image_scores(head_average(record, layer), layout, resolve_score_row(layout, score_row_mode))
    return [argtop(scores[b], k, offset=layout.n_sys) for b in range(batch)]


@torch.no_grad()
def resume_truncated(
    model: MiniLVLM,
    record: AttentionRecord,
    layout: TokenLayout,
    layer: int,
    k: int,
    *,
    score_row_mode: ScoreRowMode | str = ScoreRowMode.LAST_IMAGE,
    mode: TruncationMode | str = TruncationMode.REMOVE,
) -> tuple[torch.Tensor, list[list[int]]]:
    """Truncate a captured pass at ``layer`` and run the remaining layers.

    Returns:
        Tuple of (``[B, S', V]`` logits of the surviving rows, kept image
        indices per batch item).
    """
    if not 1 <= layer <= model.config.n_layers:
        raise ContractError(f"layer must lie in 1..{model.config.n_layers}, got {layer}")
    kept = select_image_tokens(record, layout, layer, k, score_row_mode)
    total = record.sequence_length
    hidden = record.residual(layer)

    if TruncationMode(mode) is TruncationMode.MASK:
        column_block = layout.image_mask(record.positions).clone()
        for b, indices in enumerate(kept):
            if indices:
                column_block[b, indices] = False
        keep = torch.arange(total)
        logits = model.forward_from_layer(
            hidden, keep, layer, layout, positions=record.positions, column_block=column_block
        )
        return logits, kept

    keep = torch.tensor([rebuild_index_set(layout, indices, total) for indices in kept], dtype=torch.long)
    logits = model.forward_from_layer(hidden, keep, layer, layout, positions=record.positions)
    return logits, kept


@torch.no_grad()
def truncated_logits(
    model: MiniLVLM,
    seq: torch.Tensor,
    layout: TokenLayout,
    layer: int,
    k: int,
    *,
    score_row_mode: ScoreRowMode | str = ScoreRowMode.LAST_IMAGE,
    mode: TruncationMode | str = TruncationMode.REMOVE,
) -> torch.Tensor:
    """Logits of the surviving rows for a ``[B, S, d]`` batch."""
    _, record = model.forward_with_capture(seq, layout)
    logits, _ = resume_truncated(model, record, layout, layer, k, score_row_mode=score_row_mode, mode=mode)
    return logits


@torch.no_grad()
def run_truncated(model: MiniLVLM, prompt: MultimodalInput, plan: TruncationPlan, max_new: int = 1) -> TruncationResult:
    """Truncate one input per ``plan`` and decode greedily over the reduced context.

    Scores come from prompt rows only, so the kept set is the same at every
    decoding step.

    Returns:
        Result with the resolved plan, the first step's logits over the
        surviving rows and the generated tokens.
    """
    if plan.layer > model.config.n_layers:
        raise ContractError(f"plan layer {plan.layer} exceeds n_layers={model.config.n_layers}")
    if max_new < 1:
        raise ContractError(f"max_new must be >= 1, got {max_new}")

    generated: list[int] = []
    first_logits = None
    kept: list[int] = []
    for _ in range(max_new):
        seq, layout = model.embed_multimodal(prompt, generated)
        _, record = model.forward_with_capture(seq, layout)
        logits, kept_batch = resume_truncated(
            model, record, layout, plan.layer, plan.k, score_row_mode=plan.score_row_mode, mode=plan.mode
        )
        kept = kept_batch[0]
        if first_logits is None:
            first_logits = logits[0]
        generated.append(int(torch.argmax(logits[0, -1])))

    layout = prompt.layout
    resolved = plan.model_copy(
        update={"kept_indices": kept, "rebuilt_set": rebuild_index_set(layout, kept)}
    )
    logger.info(
        f"Truncated at layer {plan.layer} keeping {len(kept)}/{layout.n_img} image tokens; "
        f"answer {generated}"
    )
    return TruncationResult(plan=resolved, logits=first_logits, generated=generated)
