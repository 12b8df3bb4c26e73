"""Token and FLOP savings of image-token truncation.

Per decoder layer on ``n`` rows with width ``d`` and MLP width ``m``::

    flops(n) = 4 n d^2 + 2 n^2 d + 2 n d m

Layers below the truncation layer run on the full sequence, the remaining
ones on the kept rows.
"""

from pydantic import BaseModel, Field

from services.errors import ContractError
from services.mini_lvlm import ModelConfig


def layer_flops(n_tokens: int, d_model: int, d_ff: int) -> int:
    """FLOPs of one decoder layer on ``n_tokens`` rows."""
    n, d, m = n_tokens, d_model, d_ff
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m


def stack_flops(n_tokens: int, d_model: int, d_ff: int, n_layers: int) -> int:
    return n_layers * layer_flops(n_tokens, d_model, d_ff)


class TruncationSavings(BaseModel):
    """Cost estimate of one truncated run against the full run."""

    full_tokens: int = Field(..., ge=0)
    kept_tokens: int = Field(..., ge=0)
    removed_tokens: int = Field(..., ge=0)
    truncated_layers: int = Field(..., ge=0, description="Layers running on the kept rows")
    attention_cost_ratio: float = Field(..., description="(kept / full)^2 per truncated layer")
    full_flops: int
    truncated_flops: int
    flop_ratio: float

    @property
    def flops_saved(self) -> int:
        return self.full_flops - self.truncated_flops


def truncation_savings(
    config: ModelConfig, full_tokens: int, kept_tokens: int, layer: int
) -> TruncationSavings:
    """Savings of running layers ``layer..n_layers`` on ``kept_tokens`` rows.

    Raises:
        ContractError: If the layer is outside the stack or more rows are kept than exist.
    """
    if not 1 <= layer <= config.n_layers:
        raise ContractError(f"layer must lie in 1..{config.n_layers}, got {layer}")
    if not 0 <= kept_tokens <= full_tokens or full_tokens < 1:
        raise ContractError(f"cannot keep {kept_tokens} of {full_tokens} tokens")

    d, m = config.d_model, config.ff_dim
    truncated_layers = config.n_layers - layer + 1
    full = stack_flops(full_tokens, d, m, config.n_layers)
    truncated = stack_flops(full_tokens, d, m, layer - 1) + stack_flops(kept_tokens, d, m, truncated_layers)

    return TruncationSavings(
        full_tokens=full_tokens,
        kept_tokens=kept_tokens,
        removed_tokens=full_tokens - kept_tokens,
        truncated_layers=truncated_layers,
        attention_cost_ratio=(kept_tokens / full_tokens) ** 2,
        full_flops=full,
        truncated_flops=truncated,
        flop_ratio=truncated / full,
    )
