"""Tests for attention-ranked image-token truncation."""

import json

import numpy as np
import pytest
import torch

from services.errors import ContractError
from services.layout import TokenLayout
from services.truncation import (
    ScoreRowMode,
    TruncationMode,
    TruncationPlan,
    argtop,
    image_scores,
    rebuild_index_set,
    resolve_score_row,
    resume_truncated,
    run_truncated,
)


def _oracle(scores: np.ndarray, k: int) -> list[int]:
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(ranked[:k])


def _check_against_oracle(n_vectors: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    for _ in range(n_vectors):
        n = int(rng.integers(1, 13))
        # small integer scores force plenty of ties
        scores = rng.integers(0, 5, size=n).astype(np.float64) if rng.random() < 0.5 else rng.random(n)
        k = int(rng.integers(0, n + 2))
        result = argtop(torch.from_numpy(scores), k)

        assert result == _oracle(scores, k)
        assert set(result) <= set(argtop(torch.from_numpy(scores), k + 1))
        assert result == argtop(torch.from_numpy(scores * 3.7), k)


def test_argtop_examples():
    """Test top-k selection examples."""
    scores = torch.tensor([0.1, 0.5, 0.5, 0.2])
    assert argtop(scores, 2) == [1, 2]
    assert argtop(scores, 1) == [1]
    assert argtop(scores, 3, offset=34) == [35, 36, 37]
    assert argtop(scores, 0) == []
    assert argtop(scores, 10) == [0, 1, 2, 3]
    with pytest.raises(ContractError):
        argtop(scores, -1)


def test_argtop_matches_full_sort():
    """Test top-k against a full sort."""
    _check_against_oracle(2_000, seed=0)


@pytest.mark.slow
def test_argtop_matches_full_sort_exhaustive():
    """Test top-k against a full sort for every k."""
    _check_against_oracle(100_000, seed=1)


def test_rebuild_index_set():
    """Test rebuilt index sets."""
    layout = TokenLayout(n_sys=2, n_img=4, n_user=2)
    assert rebuild_index_set(layout, [5, 3]) == [0, 1, 3, 5, 6, 7]
    assert rebuild_index_set(layout, []) == [0, 1, 6, 7]
    assert rebuild_index_set(layout, [2], total_length=10) == [0, 1, 2, 6, 7, 8, 9]


def test_score_rows():
    """Test score rows."""
    layout = TokenLayout(n_sys=2, n_img=4, n_user=2)
    assert resolve_score_row(layout) == 5
    assert resolve_score_row(layout, "last_prompt") == 7

    attention = torch.eye(8, dtype=torch.float64)
    assert image_scores(attention, layout, 5).tolist() == [0.0, 0.0, 0.0, 1.0]
    with pytest.raises(ContractError, match="cannot see every image token"):
        image_scores(attention, layout, 4)
    with pytest.raises(ContractError, match="no image tokens"):
        resolve_score_row(TokenLayout(n_sys=2, n_img=0, n_user=2))


@pytest.mark.parametrize("mode", list(TruncationMode))
def test_keeping_every_image_token_is_identity(tiny_model, prompt, mode):
    """Test keeping every image token."""
    seq, layout = tiny_model.embed_multimodal(prompt)
    logits, record = tiny_model.forward_with_capture(seq, layout)
    for layer in (1, 2):
        truncated, kept = resume_truncated(tiny_model, record, layout, layer, layout.n_img, mode=mode)
        assert kept == [list(layout.image)]
        torch.testing.assert_close(truncated[0], logits, atol=1e-12, rtol=0)


def test_dropping_all_image_tokens_at_first_layer_is_text_only(tiny_model, prompt):
    """Test dropping every image token at layer 1."""
    seq, layout = tiny_model.embed_multimodal(prompt)
    _, record = tiny_model.forward_with_capture(seq, layout)
    text_seq, positions = tiny_model.embed_text_only(prompt)
    text_logits = tiny_model(text_seq, layout, positions=positions)

    removed, kept = resume_truncated(tiny_model, record, layout, 1, 0)
    assert kept == [[]]
    torch.testing.assert_close(removed[0], text_logits, atol=1e-9, rtol=0)

    masked, _ = resume_truncated(tiny_model, record, layout, 1, 0, mode=TruncationMode.MASK)
    torch.testing.assert_close(masked[0, layout.text], text_logits, atol=1e-9, rtol=0)


def test_planted_model_ignores_truncation_at_cliff(tiny_model, prompt):
    """Test truncation of a planted model at its cliff."""
    planted = tiny_model.with_config(image_block_from=2)
    seq, layout = planted.embed_multimodal(prompt)
    baseline, record = planted.forward_with_capture(seq, layout)

    truncated, _ = resume_truncated(planted, record, layout, 2, 0)
    torch.testing.assert_close(truncated[0, -1], baseline[-1], atol=1e-9, rtol=0)
    assert int(torch.argmax(truncated[0, -1])) == int(torch.argmax(baseline[-1]))


def test_kept_tokens_follow_score_row_attention(tiny_model, prompt):
    """Test kept tokens are the most attended ones."""
    seq, layout = tiny_model.embed_multimodal(prompt)
    _, record = tiny_model.forward_with_capture(seq, layout)
    for mode in ScoreRowMode:
        row = resolve_score_row(layout, mode)
        scores = record.attention(2)[0].mean(dim=0)[row, layout.image.start:layout.image.stop]
        _, kept = resume_truncated(tiny_model, record, layout, 2, 2, score_row_mode=mode)
        assert kept[0] == argtop(scores, 2, offset=layout.n_sys)


def test_run_truncated_resolves_plan(tiny_model, prompt):
    """Test plan resolution."""
    plan = TruncationPlan(layer=1, k=2)
    result = run_truncated(tiny_model, prompt, plan, max_new=3)
    layout = prompt.layout

    assert len(result.generated) == 3
    assert len(result.plan.kept_indices) == 2
    assert all(index in layout.image for index in result.plan.kept_indices)
    assert result.plan.rebuilt_set == rebuild_index_set(layout, result.plan.kept_indices)
    assert result.logits.shape == (layout.prompt_length - 2, tiny_model.config.vocab_size)

    record = json.loads(result.plan.to_json())
    assert list(record) == ["k", "kept_indices", "layer", "score_row_mode"]
    assert record["score_row_mode"] == "last_image"


def test_run_truncated_full_keep_matches_greedy(tiny_model, prompt):
    """Test a full keep matches greedy decoding."""
    layout = prompt.layout
    result = run_truncated(tiny_model, prompt, TruncationPlan(layer=2, k=layout.n_img), max_new=3)
    assert result.generated == tiny_model.greedy_decode(prompt, 3)


def test_run_truncated_contract(tiny_model, prompt):
    """Test run_truncated argument checks."""
    with pytest.raises(ContractError, match="exceeds n_layers"):
        run_truncated(tiny_model, prompt, TruncationPlan(layer=3, k=0))
    with pytest.raises(ContractError, match="max_new"):
        run_truncated(tiny_model, prompt, TruncationPlan(layer=1, k=0), max_new=0)
