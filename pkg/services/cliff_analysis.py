"""Information-flow cliff detection.

A sweep removes every image token (k=0) at each layer l in turn and
compares the task metric against the untruncated model. The cliff is the
earliest layer whose metric is within epsilon of baseline. The attention
view (first layer whose image share drops below a threshold) is reported
next to it, unmerged.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Sequence

import torch
from pydantic import BaseModel, Field

from config.settings import settings
from services.errors import ContractError
from services.layout import MultimodalInput
from services.mini_lvlm import AttentionRecord, MiniLVLM, ModelConfig
from services.segment_attention import flag_layer, influence_rates
from services.synthetic_tasks import SyntheticTask, TaskBatch, TaskKind, generate_task
from services.truncation import resume_truncated

logger = logging.getLogger(__name__)


class Metric(str, Enum):
    """How a sweep point is scored."""

    ACCURACY = "accuracy"
    AGREEMENT = "agreement"


class LayerResult(BaseModel):
    layer: int = Field(..., ge=1)
    metric: float
    delta: float = Field(..., description="metric - baseline")
    within_epsilon: bool


class CliffReport(BaseModel):
    """Outcome of one truncation sweep."""

    task: TaskKind
    metric_name: Metric
    baseline: float
    epsilon: float = Field(..., ge=0.0)
    layers: list[LayerResult]
    cliff_layer: int | None = Field(None, description="Earliest layer within epsilon of baseline")
    attention_flag_layer: int | None = Field(None, description="First layer with image share < threshold")
    planted_layer: int | None = None
    label: str = ""

    def records(self) -> list[dict]:
        """One structured record per layer."""
        return [
            {"task": self.task.value, "label": self.label, **entry.model_dump()} for entry in self.layers
        ]

    def summary(self) -> dict:
        return self.model_dump(mode="json", exclude={"layers"})


class ReferenceAnnotation(BaseModel):
    """Published value for a full-size model, recorded for comparison only."""

    model: str
    benchmark: str
    quantity: str
    value: str
    source: str = "paper"
    note: str = ""


REFERENCE_ANNOTATIONS: tuple[ReferenceAnnotation, ...] = (
    ReferenceAnnotation(model="LLaVA-1.5-7B", benchmark="ScienceQA", quantity="cliff_layer", value="12"),
    ReferenceAnnotation(model="LLaVA-1.5-7B", benchmark="TextVQA", quantity="cliff_layer", value="18"),
    ReferenceAnnotation(
        model="LLaVA-1.5-7B",
        benchmark="POPE",
        quantity="cliff_layer",
        value="24",
        note="also reported as 22 in the truncation experiments; conflicting values",
    ),
    ReferenceAnnotation(
        model="LLaVA-1.5-7B",
        benchmark="POPE",
        quantity="cliff_layer",
        value="22",
        note="also reported as 24 in the attention analysis; conflicting values",
    ),
    ReferenceAnnotation(model="LLaVA-1.5-7B", benchmark="captioning", quantity="cliff_layer", value="~30"),
    ReferenceAnnotation(
        model="LLaVA-1.5-7B",
        benchmark="POPE",
        quantity="accuracy",
        value="84.70 -> 85.51",
        note="baseline vs k=0 truncation at the cliff layer",
    ),
)


class TaxonomyRow(BaseModel):
    label: str
    task: TaskKind
    cliff_layer: int | None
    attention_flag_layer: int | None
    baseline: float
    planted_layer: int | None = None


class TaxonomyReport(BaseModel):
    """Per-task cliffs side by side, sorted by detected cliff (none last)."""

    rows: list[TaxonomyRow]
    references: list[ReferenceAnnotation]


# ----------------------------------------------------------------------
# Planted models
# ----------------------------------------------------------------------


PLANT_IMAGE_FOCUS = 8.0
PLANT_IMAGE_GAIN = 6.0


def plant_cliff_model(
    config: ModelConfig,
    cliff_layer: int,
    *,
    focus: float = PLANT_IMAGE_FOCUS,
    gain: float = PLANT_IMAGE_GAIN,
) -> MiniLVLM:
    """Seeded model whose text rows read no image column from ``cliff_layer`` on.

    From ``cliff_layer`` on, image columns are masked out for every text
    query (system, user and generated rows). Image rows keep attending to
    each other, but nothing they compute reaches a text row again. Below the cliff,
    text queries get a ``focus`` logit bonus toward image columns and the
    patch projection is scaled by ``gain``, so random weights already make
    the answers depend on image content there.

    ``cliff_layer = n_layers + 1`` leaves the model unmodified.
    """
    if not 1 <= cliff_layer <= config.n_layers + 1:
        raise ContractError(f"cliff layer must lie in 1..{config.n_layers + 1}, got {cliff_layer}")
    if cliff_layer == config.n_layers + 1:
        update = {"image_block_from": None}
    else:
        update = {"image_block_from": cliff_layer, "image_focus": focus, "image_gain": gain}
    return MiniLVLM(ModelConfig.model_validate({**config.model_dump(), **update}))


def replant(
    model: MiniLVLM, cliff_layer: int | None, *, focus: float | None = None, gain: float | None = None
) -> MiniLVLM:
    """Same weights, different planted layer (``None`` removes the block).

    ``focus`` and ``gain`` replace the model's own values when given.
    """
    if cliff_layer == model.config.n_layers + 1:
        cliff_layer = None
    update: dict = {"image_block_from": cliff_layer}
    if focus is not None:
        update["image_focus"] = focus
    if gain is not None:
        update["image_gain"] = gain
    return model.with_config(**update)


@torch.no_grad()
def image_influence(
    model: MiniLVLM, prompt: MultimodalInput, replacement: torch.Tensor | None = None
) -> float:
    """Largest change of the answer-row logits when the image is replaced.

    The default replacement is the negated image.
    """
    replacement = -prompt.image if replacement is None else replacement
    seq, layout = model.embed_multimodal(prompt)
    other, _ = model.embed_multimodal(prompt.with_image(replacement))
    before = model.forward(seq, layout)[-1]
    after = model.forward(other, layout)[-1]
    return float((before - after).abs().max())


# ----------------------------------------------------------------------
# Sweeps
# ----------------------------------------------------------------------


def _answers(logits: torch.Tensor) -> torch.Tensor:
    return torch.argmax(logits[:, -1], dim=-1)


@torch.no_grad()
def _capture(model: MiniLVLM, batch: TaskBatch) -> tuple[torch.Tensor, AttentionRecord]:
    seq, layout = model.embed_batch(batch.system, batch.images, batch.user)
    logits, record = model.forward_with_capture(seq, layout)
    return _answers(logits), record


def truncated_answers(model: MiniLVLM, record: AttentionRecord, layer: int) -> torch.Tensor:
    """Answers with every image token removed from ``layer`` on."""
    logits, _ = resume_truncated(model, record, record.layout, layer, 0)
    return _answers(logits)


def _score(predictions: torch.Tensor, reference: torch.Tensor) -> float:
    return float((predictions == reference).to(torch.float64).mean())


def sweep_cliff(
    model: MiniLVLM,
    task: SyntheticTask | TaskBatch,
    epsilon: float = 0.0,
    *,
    metric: Metric | str = Metric.ACCURACY,
    threshold: float | None = None,
    label: str = "",
    workers: int | None = None,
) -> CliffReport:
    """Sweep k=0 truncation over every layer and locate the cliff.

    Args:
        model: Model under test.
        task: Task spec (generated for the model) or a prebuilt batch.
        epsilon: Largest |metric - baseline| still counted as unchanged.
        metric: ``accuracy`` against the ground truth, or ``agreement`` with
            the untruncated model's own answers.
        threshold: Image-share threshold for the attention flag.
        label: Free-form name carried into reports.
        workers: Threads evaluating layers concurrently.

    Raises:
        ContractError: If the task is empty or epsilon is negative.
    """
    if epsilon < 0:
        raise ContractError(f"epsilon must be >= 0, got {epsilon}")
    batch = generate_task(task, model.config) if isinstance(task, SyntheticTask) else task
    if len(batch) == 0:
        raise ContractError("cannot sweep an empty task")
    metric = Metric(metric)
    workers = settings.SWEEP_WORKERS if workers is None else workers

    baseline_answers, record = _capture(model, batch)
    reference = batch.answers if metric is Metric.ACCURACY else baseline_answers
    baseline = _score(baseline_answers, reference)

    layers = list(range(1, model.config.n_layers + 1))
    if workers <= 1:
        predictions = [truncated_answers(model, record, layer) for layer in layers]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(truncated_answers, model, record, layer) for layer in layers]
            predictions = [future.result() for future in futures]

    results = []
    for layer, answers in zip(layers, predictions):
        value = _score(answers, reference)
        delta = value - baseline
        results.append(
            LayerResult(layer=layer, metric=value, delta=delta, within_epsilon=abs(delta) <= epsilon)
        )
    cliff = next((entry.layer for entry in results if entry.within_epsilon), None)

    profile = influence_rates(record, first_answer_only=True)
    report = CliffReport(
        task=batch.kind,
        metric_name=metric,
        baseline=baseline,
        epsilon=epsilon,
        layers=results,
        cliff_layer=cliff,
        attention_flag_layer=flag_layer(profile, threshold),
        planted_layer=model.config.image_block_from,
        label=label,
    )
    logger.info(
        f"Sweep '{label or batch.kind.value}': baseline {metric.value} {baseline:.4f}, cliff layer {cliff}"
    )
    return report


def taxonomy_report(reports: Sequence[CliffReport]) -> TaxonomyReport:
    """Compare detected cliffs across tasks and models.

    Raises:
        ContractError: If fewer than two task kinds are covered.
    """
    if len({report.task for report in reports}) < 2:
        raise ContractError("taxonomy needs reports for at least two task kinds")

    rows = [
        TaxonomyRow(
            label=report.label,
            task=report.task,
            cliff_layer=report.cliff_layer,
            attention_flag_layer=report.attention_flag_layer,
            baseline=report.baseline,
            planted_layer=report.planted_layer,
        )
        for report in reports
    ]
    rows.sort(key=lambda row: (row.cliff_layer is None, row.cliff_layer or 0, row.label, row.task.value))
    return TaxonomyReport(rows=rows, references=list(REFERENCE_ANNOTATIONS))


def write_cliff_reports(
    reports: Sequence[CliffReport], taxonomy: TaxonomyReport | None, output_dir: str | Path
) -> list[Path]:
    """Write ``sweep.jsonl`` (one record per layer), ``summary.json`` and ``taxonomy.json``."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    sweep_path = output_dir / "sweep.jsonl"
    with sweep_path.open("w") as handle:
        for report in reports:
            for record in report.records():
                handle.write(json.dumps(record, sort_keys=True) + "\n")

    summary_path = output_dir / "summary.json"
    summary = {"reports": [report.summary() for report in reports]}
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    written = [sweep_path, summary_path]
    if taxonomy is not None:
        taxonomy_path = output_dir / "taxonomy.json"
        taxonomy_path.write_text(taxonomy.model_dump_json(indent=2) + "\n")
        written.append(taxonomy_path)
    return written
