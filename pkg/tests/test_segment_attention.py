"""Tests for segment-wise influence rates."""

import numpy as np
import pytest
import torch

from services.errors import ContractError
from services.layout import TokenLayout
from services.mini_lvlm import AttentionRecord, HookPoint
from services.raster import read_pnm
from services.segment_attention import (
    CSV_HEADER,
    InfluenceProfile,
    SegmentShares,
    flag_layer,
    influence_rates,
    last_layer_rise,
    profile_report,
)


def _record(layout: TokenLayout, attentions: list[torch.Tensor]) -> AttentionRecord:
    length = attentions[0].shape[-1]
    return AttentionRecord(
        layout=layout,
        positions=torch.arange(length),
        hook_point=HookPoint.POST_ATTENTION_NORM,
        attentions=attentions,
    )


def _uniform_causal(length: int, heads: int = 1) -> torch.Tensor:
    rows = torch.tril(torch.ones(length, length, dtype=torch.float64))
    rows = rows / rows.sum(dim=-1, keepdim=True)
    return rows.expand(1, heads, length, length).clone()


def _random_causal(length: int, heads: int, rng: np.random.Generator) -> torch.Tensor:
    scores = rng.normal(size=(1, heads, length, length))
    scores[..., np.triu_indices(length, k=1)[0], np.triu_indices(length, k=1)[1]] = -np.inf
    probs = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return torch.from_numpy(probs / probs.sum(axis=-1, keepdims=True))


def _profile(image_shares: list[float]) -> InfluenceProfile:
    return InfluenceProfile(
        layers=[
            SegmentShares(layer=i + 1, sys=1.0 - img, img=img, user=0.0) for i, img in enumerate(image_shares)
        ]
    )


def test_uniform_row_shares():
    """Test shares of a uniform attention row."""
    layout = TokenLayout(n_sys=2, n_img=4, n_user=2)
    profile = influence_rates(_record(layout, [_uniform_causal(8)]))

    shares = profile.layers[0]
    assert (shares.sys, shares.img, shares.user) == (0.25, 0.5, 0.25)


def test_one_hot_row_goes_to_its_segment():
    """Test a one-hot attention row."""
    layout = TokenLayout(n_sys=2, n_img=4, n_user=2)
    attention = _uniform_causal(8)
    attention[0, 0, 7] = 0.0
    attention[0, 0, 7, 3] = 1.0

    shares = influence_rates(_record(layout, [attention])).layers[0]
    assert (shares.sys, shares.img, shares.user) == (0.0, 1.0, 0.0)


def test_matches_reference_on_random_inputs():
    """Test rates against a loop reference."""
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_sys, n_img, n_user = (int(v) for v in rng.integers(1, 6, size=3))
        layout = TokenLayout(n_sys=n_sys, n_img=n_img, n_user=n_user)
        length = layout.prompt_length
        attention = _random_causal(length, heads=3, rng=rng)

        row = attention[0, :, length - 1].mean(dim=0).numpy()
        expected = np.array([row[:n_sys].sum(), row[n_sys:n_sys + n_img].sum(), row[n_sys + n_img:].sum()])
        expected = expected / expected.sum()

        shares = influence_rates(_record(layout, [attention])).layers[0]
        np.testing.assert_allclose([shares.sys, shares.img, shares.user], expected, atol=1e-12, rtol=0)
        assert shares.total == pytest.approx(1.0, abs=1e-12)


def test_invariant_to_image_column_and_row_order():
    """Test rates under image permutations."""
    rng = np.random.default_rng(1)
    layout = TokenLayout(n_sys=2, n_img=5, n_user=3)
    attention = _random_causal(12, heads=2, rng=rng)
    rows = [9, 10, 11]
    base = influence_rates(_record(layout, [attention]), query_rows=rows).layers[0]

    permuted = attention.clone()
    image_cols = list(layout.image)
    shuffled = [image_cols[i] for i in rng.permutation(len(image_cols))]
    permuted[..., image_cols] = attention[..., shuffled]
    moved = influence_rates(_record(layout, [permuted]), query_rows=rows[::-1]).layers[0]

    assert moved.img == pytest.approx(base.img, abs=1e-12)
    assert moved.sys == pytest.approx(base.sys, abs=1e-12)


def test_per_head_breakdown_averages_to_layer_shares():
    """Test per-head shares average to the layer shares."""
    rng = np.random.default_rng(2)
    layout = TokenLayout(n_sys=3, n_img=4, n_user=2)
    profile = influence_rates(_record(layout, [_random_causal(9, heads=2, rng=rng)]), per_head=True)

    assert len(profile.per_head[0]) == 2
    mean_img = sum(head.img for head in profile.per_head[0]) / 2
    assert mean_img == pytest.approx(profile.layers[0].img, abs=1e-12)


def test_query_row_contract():
    """Test query row checks."""
    layout = TokenLayout(n_sys=2, n_img=4, n_user=2)
    record = _record(layout, [_uniform_causal(8)])
    with pytest.raises(ContractError, match="cannot see every segment"):
        influence_rates(record, query_rows=[3])
    with pytest.raises(ContractError, match="outside a sequence"):
        influence_rates(record, query_rows=[8])
    with pytest.raises(ContractError, match="must not be empty"):
        influence_rates(record, query_rows=[])


def test_generated_rows_are_default_query_rows():
    """Test default query rows."""
    layout = TokenLayout(n_sys=1, n_img=2, n_user=1)
    attention = _uniform_causal(6)
    first = influence_rates(_record(layout, [attention]), first_answer_only=True).layers[0]
    every = influence_rates(_record(layout, [attention])).layers[0]

    assert first.img == pytest.approx(0.5)
    # generated rows spread evenly, so their prompt shares match the first row
    assert every.img == pytest.approx(0.5)
    assert every.user == pytest.approx(0.25)


def test_flag_layer_examples():
    """Test flagged layer examples."""
    profile = _profile([0.5, 0.3, 0.01, 0.01])
    assert flag_layer(profile, 0.02) == 3
    assert flag_layer(profile, 0.005) is None
    assert flag_layer(_profile([0.01, 0.5])) == 1


def test_last_layer_rise():
    """Test the last-layer rise."""
    assert last_layer_rise(_profile([0.5, 0.01, 0.2]))
    assert not last_layer_rise(_profile([0.5, 0.3, 0.1]))
    assert not last_layer_rise(_profile([0.5]))


def test_profile_report_files(tmp_path, tiny_model, prompt):
    """Test profile report files."""
    seq, layout = tiny_model.embed_multimodal(prompt)
    _, record = tiny_model.forward_with_capture(seq, layout)
    profile = influence_rates(record)
    report = profile_report(profile, tmp_path, threshold=0.02)

    lines = (tmp_path / "influence.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) == "layer,lambda_sys,lambda_img,lambda_user"
    assert len(lines) == 1 + tiny_model.config.n_layers
    for line in lines[1:]:
        values = [float(v) for v in line.split(",")[1:]]
        assert sum(values) == pytest.approx(1.0, abs=1e-9)

    assert read_pnm(report.image_path).shape == (8 * tiny_model.config.n_layers, 24)
    assert report.flagged_layer == flag_layer(profile, 0.02)
