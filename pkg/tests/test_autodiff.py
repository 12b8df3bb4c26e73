"""Tests for the tensor primitives and gradient helpers."""

import math
from decimal import Decimal, localcontext

import pytest
import torch

from services.autodiff import (
    backward,
    finite_difference,
    layer_norm,
    matmul,
    relative_error,
    seeded_generator,
    softmax_rows,
    tensor,
)
from services.errors import ContractError, DegenerateRowError, DimensionError


def test_tensor_is_float64_copy():
    """Test tensor() returns a detached float64 copy."""
    source = torch.ones(2, 2, dtype=torch.float32)
    out = tensor(source, requires_grad=True)
    assert out.dtype == torch.float64
    assert out.requires_grad
    source[0, 0] = 5.0
    assert out[0, 0].item() == 1.0


def test_matmul_shapes():
    """Test matmul shape checks."""
    a = tensor([[1.0, 2.0], [3.0, 4.0]])
    b = tensor([[1.0], [1.0]])
    assert matmul(a, b).tolist() == [[3.0], [7.0]]

    with pytest.raises(DimensionError, match="inner dimensions"):
        matmul(a, tensor([[1.0, 2.0, 3.0]]))
    with pytest.raises(DimensionError, match="needs matrices"):
        matmul(tensor([1.0, 2.0]), b)


def test_matmul_batched_leading_dims():
    """Test matmul over leading batch dimensions."""
    a = torch.randn(3, 4, 5, dtype=torch.float64)
    b = torch.randn(5, 2, dtype=torch.float64)
    assert matmul(a, b).shape == (3, 4, 2)


def test_softmax_rows_masked_entries_are_zero():
    """Test masked entries come out exactly zero."""
    x = tensor([[1.0, 2.0, 3.0], [0.5, 0.5, 100.0]])
    allowed = torch.tensor([[True, True, False], [True, False, False]])
    probs = softmax_rows(x, allowed)

    assert probs[0, 2].item() == 0.0
    assert probs[1].tolist() == [1.0, 0.0, 0.0]
    torch.testing.assert_close(probs.sum(dim=-1), torch.ones(2, dtype=torch.float64), atol=1e-12, rtol=0)


def test_softmax_rows_stable_for_large_scores():
    """Test softmax with very large scores."""
    probs = softmax_rows(tensor([[1000.0, 1000.0]]))
    assert probs.tolist() == [[0.5, 0.5]]


def test_softmax_rows_fully_masked_row():
    """Test a row with every entry masked."""
    with pytest.raises(DegenerateRowError):
        softmax_rows(tensor([[1.0, 2.0]]), torch.tensor([[False, False]]))


def test_layer_norm_statistics():
    """Test layer norm output has zero mean and unit variance."""
    x = torch.randn(4, 8, dtype=torch.float64) * 3 + 2
    out = layer_norm(x, torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64))
    torch.testing.assert_close(out.mean(dim=-1), torch.zeros(4, dtype=torch.float64), atol=1e-12, rtol=0)
    torch.testing.assert_close(
        out.var(dim=-1, unbiased=False), torch.ones(4, dtype=torch.float64), atol=1e-4, rtol=0
    )


def test_layer_norm_gain_shape_mismatch():
    """Test layer norm with a wrongly shaped gain."""
    x = torch.randn(2, 4, dtype=torch.float64)
    with pytest.raises(DimensionError, match="gain/bias"):
        layer_norm(x, torch.ones(3, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))


def test_backward_intermediate_and_unused():
    """Test gradients for an intermediate and an unused tensor."""
    x = tensor([1.0, 2.0], requires_grad=True)
    unused = tensor([3.0], requires_grad=True)
    hidden = x * 3.0
    out = (hidden**2).sum()

    grads = backward(out, {"x": x, "hidden": hidden, "unused": unused})

    assert grads["hidden"].tolist() == [6.0, 12.0]
    assert grads["x"].tolist() == [18.0, 36.0]
    assert grads["unused"].tolist() == [0.0]


def test_backward_contract_errors():
    """Test backward on non-scalar and detached inputs."""
    x = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError, match="scalar"):
        backward(x * 2.0, {"x": x})
    with pytest.raises(ContractError, match="not on the tape"):
        backward((x * 2.0).sum(), {"x": x, "c": tensor([1.0])})
    with pytest.raises(ContractError, match="taped computation"):
        backward(tensor(1.0), {"x": x})


def test_finite_difference_matches_backward():
    """Test finite differences against the tape."""
    point = torch.randn(3, 3, dtype=torch.float64, generator=seeded_generator(1))

    def fn(p):
        return torch.sin(p).sum() * p[0, 1]

    p = point.clone().requires_grad_(True)
    analytic = backward(fn(p), {"p": p})["p"]
    for index in [(0, 0), (0, 1), (2, 2)]:
        numeric = finite_difference(fn, point, index)
        assert relative_error(float(analytic[index]), numeric) < 1e-5


def test_seeded_generator_streams():
    """Test seeded streams are reproducible and independent."""
    a = torch.randn(5, generator=seeded_generator(3, 0))
    b = torch.randn(5, generator=seeded_generator(3, 0))
    c = torch.randn(5, generator=seeded_generator(3, 1))
    d = torch.randn(5, generator=seeded_generator(4, 0))

    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert not torch.equal(a, d)


def test_matmul_identity_and_hand_example():
    """Identity leaves the operand alone and a 1x2 by 2x1 product is 11."""
    b = tensor([[1.5, -2.0], [0.25, 4.0]])
    assert torch.equal(matmul(torch.eye(2, dtype=torch.float64), b), b)
    assert matmul(tensor([[1.0, 2.0]]), tensor([[3.0], [4.0]])).tolist() == [[11.0]]


@pytest.mark.parametrize("seed", range(5))
def test_matmul_matches_triple_loop(seed):
    """Random 4x4 products agree with the naive triple loop to 1e-12."""
    generator = seeded_generator(seed, 1)
    a = torch.randn(4, 4, generator=generator, dtype=torch.float64)
    b = torch.randn(4, 4, generator=generator, dtype=torch.float64)
    product = matmul(a, b)

    for i in range(4):
        for j in range(4):
            expected = sum(float(a[i, k]) * float(b[k, j]) for k in range(4))
            assert abs(float(product[i, j]) - expected) <= 1e-12


def test_softmax_rows_analytic_examples():
    """Equal scores split evenly and log-weights 1, 2, 3 give 1/6, 2/6, 3/6."""
    probs = softmax_rows(tensor([[0.0, 0.0, 0.0], [math.log(1), math.log(2), math.log(3)]]))
    torch.testing.assert_close(
        probs,
        tensor([[1 / 3, 1 / 3, 1 / 3], [1 / 6, 2 / 6, 3 / 6]]),
        atol=1e-12,
        rtol=0,
    )


@pytest.mark.parametrize("seed", range(10))
def test_softmax_rows_matches_high_precision_reference(seed):
    """Rows agree with a 50-digit decimal evaluation to 1e-12."""
    row = torch.randn(7, generator=seeded_generator(seed, 2), dtype=torch.float64) * 5
    probs = softmax_rows(row[None, :])[0]

    with localcontext() as context:
        context.prec = 50
        exps = [Decimal(float(value)).exp() for value in row]
        total = sum(exps)
        reference = [float(e / total) for e in exps]

    for got, want in zip(probs.tolist(), reference):
        assert abs(got - want) <= 1e-12
    assert abs(sum(probs.tolist()) - 1.0) <= 1e-12


def test_layer_norm_of_constant_vector_is_bias():
    """A constant input has nothing to normalise: gain drops out and the bias remains."""
    x = torch.full((2, 8), 2.5, dtype=torch.float64)
    gain = torch.linspace(0.5, 2.0, 8, dtype=torch.float64)
    bias = torch.linspace(-1.0, 1.0, 8, dtype=torch.float64)

    zeros = layer_norm(x, gain, torch.zeros(8, dtype=torch.float64))
    torch.testing.assert_close(zeros, torch.zeros(2, 8, dtype=torch.float64), atol=1e-12, rtol=0)
    torch.testing.assert_close(layer_norm(x, gain, bias), bias.expand(2, 8), atol=1e-12, rtol=0)


def test_backward_of_sum_and_square():
    """d/dx sum(x) is all ones and d/dx x.x is 2x."""
    x = tensor([0.5, -1.0, 3.0], requires_grad=True)
    assert backward(x.sum(), {"x": x})["x"].tolist() == [1.0, 1.0, 1.0]
    assert backward((x * x).sum(), {"x": x})["x"].tolist() == [1.0, -2.0, 6.0]
