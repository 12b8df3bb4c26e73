"""Miniature decoder-only multimodal transformer with capture hooks.

The prompt is laid out as ``[system | image | user]``. Image patches enter
as continuous embeddings through a linear patch projection; text tokens use
a learned token table. Every row also carries an absolute learned position
embedding, added once at the input, so rows deleted mid-stack leave the
surviving rows with their original position ids.

Each block is pre-norm::

    x = LN1(h)                    # pre_norm hook
    h = h + MHA(x)                # causal, per-head maps captured
    a = LN2(h)                    # post_attention_norm hook (default)
    m = MLP(a)                    # mlp_out hook
    h = h + m
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, NamedTuple, Sequence

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from torch import nn

from services.autodiff import DTYPE, layer_norm, matmul, softmax_rows
from services.errors import CapacityError, ContractError, DimensionError
from services.layout import MultimodalInput, TokenLayout

logger = logging.getLogger(__name__)

FeatureEdit = Callable[[torch.Tensor], torch.Tensor]


class HookPoint(str, Enum):
    """Where a block exposes its feature map A_k."""

    POST_ATTENTION_NORM = "post_attention_norm"
    PRE_NORM = "pre_norm"
    MLP_OUT = "mlp_out"


class ModelConfig(BaseModel):
    """Shape and seed of a mini model."""

    model_config = ConfigDict(frozen=True)

    n_layers: int = Field(default=4, ge=1)
    n_heads: int = Field(default=2, ge=1)
    d_model: int = Field(default=32, ge=1)
    d_ff: int | None = Field(default=None, ge=1, description="MLP width; defaults to 4 * d_model")
    vocab_size: int = Field(default=24, ge=2)
    patch_grid: tuple[int, int] = (3, 3)
    patch_dim: int = Field(default=6, ge=1, description="Channels per image patch")
    max_seq: int = Field(default=64, ge=1)
    seed: int = 0
    image_block_from: int | None = Field(
        default=None, description="Layers >= this block every text query from image columns"
    )
    image_focus: float = Field(
        default=0.0,
        ge=0.0,
        description="Attention logit bonus from text queries to image columns below image_block_from",
    )
    image_gain: float = Field(default=1.0, gt=0.0, description="Scale of the patch projection")

    @field_validator("patch_grid")
    @classmethod
    def _positive_grid(cls, value: tuple[int, int]) -> tuple[int, int]:
        if value[0] < 1 or value[1] < 1:
            raise ValueError(f"patch_grid must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.image_block_from is not None and not 1 <= self.image_block_from <= self.n_layers + 1:
            raise ValueError(
                f"image_block_from must lie in 1..{self.n_layers + 1}, got {self.image_block_from}"
            )
        return self

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_image_tokens(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for ``config``."""
    d, f, v = config.d_model, config.ff_dim, config.vocab_size
    embeddings = v * d + config.max_seq * d + config.patch_dim * d + d
    per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d
    head = 2 * d + d * v
    return embeddings + config.n_layers * per_layer + head


@dataclass
class AttentionRecord:
    """Everything captured during one forward pass.

    Per layer (index ``layer - 1``): per-head attention ``[B, H, S, S]``,
    the hooked feature map ``[B, S, d_model]`` and the residual stream
    entering the layer ``[B, S, d_model]``.
    """

    layout: TokenLayout
    positions: torch.Tensor
    hook_point: HookPoint
    attentions: list[torch.Tensor] = field(default_factory=list)
    features: list[torch.Tensor] = field(default_factory=list)
    residuals: list[torch.Tensor] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.attentions)

    @property
    def sequence_length(self) -> int:
        return int(self.positions.shape[-1])

    def _check_layer(self, layer: int) -> int:
        if not 1 <= layer <= self.n_layers:
            raise ContractError(f"layer {layer} was not captured (have 1..{self.n_layers})")
        return layer - 1

    def attention(self, layer: int) -> torch.Tensor:
        return self.attentions[self._check_layer(layer)]

    def feature(self, layer: int) -> torch.Tensor:
        return self.features[self._check_layer(layer)]

    def residual(self, layer: int) -> torch.Tensor:
        return self.residuals[self._check_layer(layer)]


class ForwardOutput(NamedTuple):
    logits: torch.Tensor
    record: AttentionRecord


def _gaussian(shape: tuple[int, ...], std: float, generator: torch.Generator) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, generator=generator, dtype=DTYPE) * std)


def _ones(n: int) -> nn.Parameter:
    return nn.Parameter(torch.ones(n, dtype=DTYPE))


def _zeros(n: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(n, dtype=DTYPE))


class DecoderBlock(nn.Module):
    """One pre-norm decoder layer."""

    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        d, f = config.d_model, config.ff_dim
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim

        self.ln1_gain = _ones(d)
        self.ln1_bias = _zeros(d)
        self.w_q = _gaussian((d, d), d**-0.5, generator)
        self.w_k = _gaussian((d, d), d**-0.5, generator)
        self.w_v = _gaussian((d, d), d**-0.5, generator)
        self.w_o = _gaussian((d, d), d**-0.5, generator)
        self.ln2_gain = _ones(d)
        self.ln2_bias = _zeros(d)
        self.w_in = _gaussian((d, f), d**-0.5, generator)
        self.b_in = _zeros(f)
        self.w_out = _gaussian((f, d), f**-0.5, generator)
        self.b_out = _zeros(d)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, seq, _ = x.shape
        return x.reshape(batch, seq, self.n_heads, self.head_dim).transpose(1, 2)

    def attend(
        self, x: torch.Tensor, allowed: torch.Tensor, bias: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Causal multi-head attention over normalized input ``x``.

        ``bias`` is an optional ``[B, S, S]`` term added to every head's logits.

        Returns:
            Tuple of (attention output ``[B, S, d]``, per-head probabilities ``[B, H, S, S]``).
        """
        q = self._split_heads(matmul(x, self.w_q))
        k = self._split_heads(matmul(x, self.w_k))
        v = self._split_heads(matmul(x, self.w_v))
        scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        if bias is not None:
            scores = scores + bias[:, None, :, :]
        probs = softmax_rows(scores, allowed[:, None, :, :])
        mixed = matmul(probs, v).transpose(1, 2).reshape(x.shape)
        return matmul(mixed, self.w_o), probs

    def mlp(self, a: torch.Tensor) -> torch.Tensor:
        return matmul(F.gelu(matmul(a, self.w_in) + self.b_in), self.w_out) + self.b_out

    def forward(
        self,
        h: torch.Tensor,
        allowed: torch.Tensor,
        hook_point: HookPoint,
        edit: FeatureEdit | None = None,
        bias: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Run the layer.

        Returns:
            Tuple of (output residual, per-head attention, hooked feature map).
            The feature map is captured before ``edit`` is applied.
        """
        feature = None

        x = layer_norm(h, self.ln1_gain, self.ln1_bias)
        if hook_point is HookPoint.PRE_NORM:
            feature, x = x, edit(x) if edit else x

        attn_out, probs = self.attend(x, allowed, bias)
        h = h + attn_out

        a = layer_norm(h, self.ln2_gain, self.ln2_bias)
        if hook_point is HookPoint.POST_ATTENTION_NORM:
            feature, a = a, edit(a) if edit else a

        m = self.mlp(a)
        if hook_point is HookPoint.MLP_OUT:
            feature, m = m, edit(m) if edit else m

        return h + m, probs, feature


class MiniLVLM(nn.Module):
    """Seeded miniature vision-language decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        generator = torch.Generator()
        generator.manual_seed(config.seed)
        d = config.d_model

        self.token_embed = _gaussian((config.vocab_size, d), 1.0, generator)
        self.position_embed = _gaussian((config.max_seq, d), 1.0, generator)
        self.patch_proj = _gaussian((config.patch_dim, d), config.patch_dim**-0.5, generator)
        self.patch_bias = _zeros(d)
        self.blocks = nn.ModuleList(DecoderBlock(config, generator) for _ in range(config.n_layers))
        self.lnf_gain = _ones(d)
        self.lnf_bias = _zeros(d)
        self.w_unembed = _gaussian((d, config.vocab_size), d**-0.5, generator)

    @classmethod
    def from_state(cls, config: ModelConfig, state: Mapping[str, torch.Tensor]) -> "MiniLVLM":
        """Build a model for ``config`` and copy ``state`` into it."""
        model = cls(config)
        model.load_state_dict(dict(state))
        return model

    def with_config(self, **update) -> "MiniLVLM":
        """Copy of this model (same weights) under an updated config."""
        config = ModelConfig.model_validate({**self.config.model_dump(), **update})
        return MiniLVLM.from_state(config, self.state_dict())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # ------------------------------------------------------------------
    # Embedding
    # ------------------------------------------------------------------

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size):
            raise ContractError(f"token ids must lie in 0..{self.config.vocab_size - 1}")

    def embed_tokens(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Token plus position embeddings for ``[B, n]`` ids."""
        self._check_tokens(tokens)
        return self.token_embed[tokens] + self.position_embed[positions]

    def embed_patches(self, image: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Linear patch projection plus position embeddings for ``[B, H_p, W_p, C]`` grids."""
        batch = image.shape[0]
        expected = (*self.config.patch_grid, self.config.patch_dim)
        if tuple(image.shape[1:]) != expected:
            raise DimensionError(f"image grid must be {expected}, got {tuple(image.shape[1:])}")
        patches = image.to(DTYPE).reshape(batch, self.config.n_image_tokens, self.config.patch_dim)
        projection = self.patch_proj * self.config.image_gain
        return matmul(patches, projection) + self.patch_bias + self.position_embed[positions]

    def embed_batch(
        self,
        system: torch.Tensor,
        image: torch.Tensor,
        user: torch.Tensor,
        generated: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, TokenLayout]:
        """Embed a batch of prompts sharing one layout.

        Args:
            system: ``[B, N_sys]`` token ids.
            image: ``[B, H_p, W_p, C]`` patch features.
            user: ``[B, N_user]`` token ids.
            generated: Optional ``[B, n]`` previously generated ids appended after the prompt.

        Returns:
            Tuple of (``[B, S, d_model]`` sequence, prompt layout).

        Raises:
            CapacityError: If the sequence is longer than ``max_seq``.
        """
        batch = image.shape[0]
        layout = TokenLayout(
            n_sys=system.shape[1], n_img=self.config.n_image_tokens, n_user=user.shape[1]
        )
        n_generated = 0 if generated is None else generated.shape[1]
        total = layout.prompt_length + n_generated
        if total > self.config.max_seq:
            raise CapacityError(f"sequence of length {total} exceeds max_seq={self.config.max_seq}")

        def positions(segment: range) -> torch.Tensor:
            return torch.arange(segment.start, segment.stop).expand(batch, -1)

        pieces = [
            self.embed_tokens(system.long(), positions(layout.system)),
            self.embed_patches(image, positions(layout.image)),
            self.embed_tokens(user.long(), positions(layout.user)),
        ]
        if n_generated:
            tail = range(layout.prompt_length, total)
            pieces.append(self.embed_tokens(generated.long(), positions(tail)))
        return torch.cat(pieces, dim=1), layout

    def embed_multimodal(
        self, prompt: MultimodalInput, generated: Sequence[int] = ()
    ) -> tuple[torch.Tensor, TokenLayout]:
        """Embed one prompt (plus generated ids) as an ``[S, d_model]`` sequence."""
        seq, layout = self.embed_batch(
            torch.tensor([prompt.system_tokens], dtype=torch.long),
            prompt.image.unsqueeze(0),
            torch.tensor([prompt.user_tokens], dtype=torch.long),
            torch.tensor([list(generated)], dtype=torch.long) if generated else None,
        )
        return seq[0], layout

    def embed_text_only(
        self, prompt: MultimodalInput, generated: Sequence[int] = ()
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Embed the prompt without its image, keeping the original position ids.

        Returns:
            Tuple of (``[S', d_model]`` sequence, ``[S']`` position ids).
        """
        layout = prompt.layout
        tokens = [*prompt.system_tokens, *prompt.user_tokens, *generated]
        positions = [*layout.system, *layout.user, *range(layout.prompt_length, layout.prompt_length + len(generated))]
        if layout.prompt_length + len(generated) > self.config.max_seq:
            raise CapacityError(f"sequence exceeds max_seq={self.config.max_seq}")
        token_tensor = torch.tensor([tokens], dtype=torch.long)
        position_tensor = torch.tensor([positions], dtype=torch.long)
        return self.embed_tokens(token_tensor, position_tensor)[0], position_tensor[0]

    # ------------------------------------------------------------------
    # Layers
    # ------------------------------------------------------------------

    def allowed_columns(
        self,
        positions: torch.Tensor,
        layout: TokenLayout,
        layer: int,
        column_block: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Boolean ``[B, S, S]`` attention support for ``layer``.

        Causality is decided on original position ids. In a planted model,
        layers at or above ``image_block_from`` hide image columns from every
        non-image query (system, user and generated rows); image rows still
        see each other. ``column_block`` hides extra columns (except each
        row's own) and is used by mask-mode truncation.
        """
        allowed = positions[:, None, :] <= positions[:, :, None]
        block_from = self.config.image_block_from
        if block_from is not None and layer >= block_from:
            is_image = layout.image_mask(positions)
            allowed = allowed & ~(is_image[:, None, :] & ~is_image[:, :, None])
        if column_block is not None:
            own = torch.eye(positions.shape[1], dtype=torch.bool)
            allowed = allowed & (~column_block[:, None, :] | own)
        return allowed

    def attention_bias(self, positions: torch.Tensor, layout: TokenLayout, layer: int) -> torch.Tensor | None:
        """Additive ``[B, S, S]`` logit bonus toward image columns, or ``None``.

        Only planted models with ``image_focus > 0`` get one, and only at
        layers below ``image_block_from``. Image rows get no bonus.
        """
        block_from = self.config.image_block_from
        if not self.config.image_focus or block_from is None or layer >= block_from:
            return None
        is_image = layout.image_mask(positions)
        towards_image = is_image[:, None, :] & ~is_image[:, :, None]
        return towards_image.to(DTYPE) * self.config.image_focus

    def _run_layers(
        self,
        h: torch.Tensor,
        positions: torch.Tensor,
        layout: TokenLayout,
        *,
        start: int = 1,
        record: AttentionRecord | None = None,
        hook_point: HookPoint = HookPoint.POST_ATTENTION_NORM,
        edits: Mapping[int, FeatureEdit] | None = None,
        column_block: torch.Tensor | None = None,
    ) -> torch.Tensor:
        edits = edits or {}
        for layer in range(start, self.config.n_layers + 1):
            allowed = self.allowed_columns(positions, layout, layer, column_block)
            bias = self.attention_bias(positions, layout, layer)
            if record is not None:
                record.residuals.append(h)
            h, probs, feature = self.blocks[layer - 1](h, allowed, hook_point, edits.get(layer), bias)
            if record is not None:
                record.attentions.append(probs)
                record.features.append(feature)
        return h

    def unembed(self, h: torch.Tensor) -> torch.Tensor:
        return matmul(layer_norm(h, self.lnf_gain, self.lnf_bias), self.w_unembed)

    @staticmethod
    def _batched(seq: torch.Tensor, positions: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor, bool]:
        single = seq.dim() == 2
        if single:
            seq = seq.unsqueeze(0)
        if seq.dim() != 3:
            raise DimensionError(f"sequence must be [S, d] or [B, S, d], got {tuple(seq.shape)}")
        if positions is None:
            positions = torch.arange(seq.shape[1])
        if positions.dim() == 1:
            positions = positions.expand(seq.shape[0], -1)
        return seq, positions, single

    def forward(
        self, seq: torch.Tensor, layout: TokenLayout, positions: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Capture-free forward pass; returns logits for every row."""
        h, positions, single = self._batched(seq, positions)
        logits = self.unembed(self._run_layers(h, positions, layout))
        return logits[0] if single else logits

    def forward_with_capture(
        self,
        seq: torch.Tensor,
        layout: TokenLayout,
        *,
        hook_point: HookPoint = HookPoint.POST_ATTENTION_NORM,
        edits: Mapping[int, FeatureEdit] | None = None,
        positions: torch.Tensor | None = None,
    ) -> ForwardOutput:
        """Full causal forward pass recording attention maps and hooked features.

        Args:
            seq: ``[S, d]`` or ``[B, S, d]`` embedded sequence.
            layout: Prompt layout of the sequence.
            hook_point: Where each layer's feature map is captured.
            edits: Optional ``{layer: fn}`` replacing the hooked tensor downstream.
            positions: Original position ids of the rows (default ``0..S-1``).

        Returns:
            Logits (``[S, V]`` or ``[B, S, V]``) and the record (always batched).
        """
        h, positions, single = self._batched(seq, positions)
        record = AttentionRecord(layout=layout, positions=positions, hook_point=HookPoint(hook_point))
        h = self._run_layers(h, positions, layout, record=record, hook_point=record.hook_point, edits=edits)
        logits = self.unembed(h)
        return ForwardOutput(logits[0] if single else logits, record)

    def forward_from_layer(
        self,
        hidden: torch.Tensor,
        keep: Sequence[int] | torch.Tensor,
        start_layer: int,
        layout: TokenLayout,
        *,
        positions: torch.Tensor | None = None,
        column_block: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Resume the stack at ``start_layer`` on the kept rows only.

        Args:
            hidden: Residual stream entering ``start_layer``, ``[S, d]`` or ``[B, S, d]``.
            keep: Sorted row indices, shared ``[S']`` or per item ``[B, S']``.
            start_layer: 1-based layer to resume from.
            layout: Prompt layout of the untruncated sequence.
            positions: Original position ids of ``hidden`` rows.
            column_block: Optional ``[B, S]`` columns hidden from start_layer on.

        Returns:
            Logits for the kept rows.

        Raises:
            ContractError: If ``keep`` is empty, unsorted or out of range, or
                ``start_layer`` is outside the stack.
        """
        h, positions, single = self._batched(hidden, positions)
        batch, seq_len, d = h.shape
        if not 1 <= start_layer <= self.config.n_layers:
            raise ContractError(f"start_layer must lie in 1..{self.config.n_layers}, got {start_layer}")

        keep = torch.as_tensor(keep, dtype=torch.long)
        if keep.numel() == 0:
            raise ContractError("keep must contain at least one row")
        if keep.dim() == 1:
            keep = keep.expand(batch, -1)
        if int(keep.min()) < 0 or int(keep.max()) >= seq_len:
            raise ContractError(f"keep indices must lie in 0..{seq_len - 1}")
        if keep.shape[1] > 1 and not bool((keep[:, 1:] > keep[:, :-1]).all()):
            raise ContractError("keep indices must be strictly increasing")

        h = h.gather(1, keep[:, :, None].expand(-1, -1, d))
        positions = positions.gather(1, keep)
        if column_block is not None:
            column_block = column_block.gather(1, keep)

        h = self._run_layers(h, positions, layout, start=start_layer, column_block=column_block)
        logits = self.unembed(h)
        return logits[0] if single else logits

    # ------------------------------------------------------------------
    # Decoding
    # ------------------------------------------------------------------

    @torch.no_grad()
    def greedy_decode(self, prompt: MultimodalInput, max_new: int) -> list[int]:
        """Deterministic argmax decoding; every step re-reads the full prefix."""
        if max_new < 1:
            raise ContractError(f"max_new must be >= 1, got {max_new}")
        generated: list[int] = []
        for _ in range(max_new):
            seq, layout = self.embed_multimodal(prompt, generated)
            logits = self.forward(seq, layout)
            generated.append(int(torch.argmax(logits[-1])))
        return generated

    @torch.no_grad()
    def predict_next(self, seq: torch.Tensor, layout: TokenLayout) -> torch.Tensor:
        """Argmax next token at the last row of each ``[B, S, d]`` sequence."""
        return torch.argmax(self.forward(seq, layout)[:, -1], dim=-1)
