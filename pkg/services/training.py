"""Toy training of mini models on synthetic tasks."""

import logging

import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field

from services.autodiff import seeded_generator
from services.errors import ContractError
from services.mini_lvlm import MiniLVLM, ModelConfig
from services.synthetic_tasks import SyntheticTask, TaskBatch, generate_task

logger = logging.getLogger(__name__)


class TrainingParams(BaseModel):
    """Optimisation settings for :func:`train_toy`."""

    steps: int = Field(default=300, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=0.05, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="SGD momentum")
    image_dropout: float = Field(
        default=0.0, ge=0.0, le=1.0, description="Share of batches trained without the image"
    )
    seed: int = 0
    log_every: int = Field(default=50, ge=1)


class TrainingReport(BaseModel):
    """Loss trace of a training run."""

    losses: list[float]
    text_only_steps: int

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def batch_loss(model: MiniLVLM, batch: TaskBatch, text_only: bool = False) -> torch.Tensor:
    """Cross-entropy of the last-row logits against the answers."""
    seq, layout = model.embed_batch(batch.system, batch.images, batch.user)
    if text_only:
        rows = layout.text
        logits = model.forward(seq[:, rows], layout, positions=torch.tensor(rows))
    else:
        logits = model.forward(seq, layout)
    return F.cross_entropy(logits[:, -1], batch.answers)


def _optimizer(model: MiniLVLM, params: TrainingParams) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=params.lr, momentum=params.momentum)


def train_model(
    model: MiniLVLM, tasks: list[SyntheticTask], params: TrainingParams
) -> TrainingReport:
    """Train ``model`` in place on fresh batches drawn from ``tasks``.

    Step ``s`` uses task ``s mod len(tasks)`` with batch seed ``(params.seed, s)``.
    A planted ``image_block_from`` on the model stays active while training.
    """
    optimizer = _optimizer(model, params)
    dropout = seeded_generator(params.seed, 1 << 20)
    losses: list[float] = []
    text_only_steps = 0

    model.train()
    for step in range(params.steps):
        task = tasks[step % len(tasks)]
        draw = task.model_copy(update={"seed": params.seed * 1_000_003 + step, "n_instances": params.batch_size})
        batch = generate_task(draw, model.config)
        text_only = bool(torch.rand((), generator=dropout) < params.image_dropout)
        text_only_steps += int(text_only)

        optimizer.zero_grad()
        loss = batch_loss(model, batch, text_only=text_only)
        loss.backward()
        optimizer.step()
        losses.append(float(loss))

        if (step + 1) % params.log_every == 0:
            logger.info(f"step {step + 1}/{params.steps} loss {float(loss):.4f}")

    model.eval()
    return TrainingReport(losses=losses, text_only_steps=text_only_steps)


def train_toy(
    config: ModelConfig, tasks: list[SyntheticTask], params: TrainingParams
) -> tuple[MiniLVLM, TrainingReport]:
    """Build a seeded model for ``config`` and train it on ``tasks``."""
    if not tasks:
        raise ContractError("train_toy needs at least one task")
    model = MiniLVLM(config)
    report = train_model(model, tasks, params)
    logger.info(f"Trained {model.parameter_count()} parameters; final loss {report.final_loss:.4f}")
    return model, report
