"""Float64 tensor primitives and reverse-mode gradient helpers.

The numeric substrate is ``torch``: tensors are float64 and the autograd
graph plays the role of the tape. The wrappers here add the contract checks
the analysis code relies on (shape agreement, fully-masked rows, scalar
outputs) and expose gradients of intermediate activations by name.
"""

import logging
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from config.settings import settings
from services.errors import ContractError, DegenerateRowError, DimensionError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


def tensor(data, *, requires_grad: bool = False) -> torch.Tensor:
    """Build a float64 tensor from nested lists, arrays or tensors."""
    out = torch.as_tensor(data, dtype=DTYPE).clone()
    if requires_grad:
        out.requires_grad_(True)
    return out


def seeded_generator(seed: int, *stream: int) -> torch.Generator:
    """Return a torch generator for the independent stream ``(seed, *stream)``.

    Streams with different ``stream`` keys are statistically independent, so
    sample ``i`` of an ensemble can be regenerated without drawing samples
    ``0..i-1`` first.
    """
    state = np.random.SeedSequence(seed, spawn_key=tuple(stream)).generate_state(2, dtype=np.uint32)
    generator = torch.Generator()
    generator.manual_seed(int(state[0]) << 32 | int(state[1]))
    return generator


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two dimensions.

    Raises:
        DimensionError: If either operand has fewer than two dimensions or the
            inner dimensions disagree.
    """
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return torch.matmul(a, b)


def softmax_rows(x: torch.Tensor, allowed: torch.Tensor | None = None) -> torch.Tensor:
    """Row-wise softmax over the last dimension.

    Args:
        x: Scores, any leading shape.
        allowed: Optional boolean tensor broadcastable to ``x``; ``False``
            entries are excluded and come out exactly zero.

    Raises:
        DegenerateRowError: If some row has no allowed entry.
    """
    if allowed is None:
        return torch.softmax(x, dim=-1)

    allowed = allowed.to(torch.bool)
    if not bool(allowed.any(dim=-1).all()):
        raise DegenerateRowError("softmax row has every entry masked")
    # torch.softmax subtracts the row max before exponentiating.
    return torch.softmax(x.masked_fill(~allowed, float("-inf")), dim=-1)


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor,
    bias: torch.Tensor,
    eps: float | None = None,
) -> torch.Tensor:
    """Normalize the last dimension to zero mean and unit variance, then apply gain/bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm expects gain/bias of shape ({d},), got {tuple(gain.shape)}/{tuple(bias.shape)}"
        )
    return F.layer_norm(x, (d,), gain, bias, settings.LAYER_NORM_EPS if eps is None else eps)


def backward(output: torch.Tensor, tensors: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar with respect to named taped tensors.

    Intermediate activations are supported as well as leaves. A tensor that
    is on the tape but does not influence ``output`` gets a zero gradient.

    Raises:
        ContractError: If ``output`` is not a single element, or if a tensor
            carries no autograd history.
    """
    if output.numel() != 1:
        raise ContractError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    if not output.requires_grad:
        raise ContractError("output was not produced by a taped computation")

    names = list(tensors)
    for name in names:
        if not tensors[name].requires_grad:
            raise ContractError(f"tensor '{name}' is not on the tape")

    grads = torch.autograd.grad(
        output.reshape(()),
        [tensors[name] for name in names],
        retain_graph=True,
        allow_unused=True,
    )
    return {
        name: torch.zeros_like(tensors[name]) if grad is None else grad
        for name, grad in zip(names, grads)
    }


def finite_difference(
    fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    index: Sequence[int],
    h: float | None = None,
) -> float:
    """Central finite difference of scalar ``fn`` at ``point`` along one coordinate."""
    step = settings.FD_STEP if h is None else h
    with torch.no_grad():
        plus = point.detach().clone()
        minus = point.detach().clone()
        plus[tuple(index)] += step
        minus[tuple(index)] -= step
        return float((fn(plus) - fn(minus)).item() / (2.0 * step))


def relative_error(analytic: float, numeric: float) -> float:
    """``|analytic - numeric| / (|numeric| + 1e-8)``."""
    return abs(analytic - numeric) / (abs(numeric) + 1e-8)
