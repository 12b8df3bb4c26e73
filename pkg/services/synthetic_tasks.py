"""Token-level multimodal classification tasks with single-token answers.

Vocabulary layout for ``K`` classes and ``n_system`` system ids::

    0 .. K-1                       class tokens (every answer is one of these)
    K .. K+n_system-1              system tokens
    next 4                         query tokens: lookup, multi-hop, global, text
    next 2K                        digit tokens (text_only task)

Image patches have ``K + 2`` channels: a one-hot class plus two marker
channels. Answers are balanced over classes (instance ``i`` answers
``i mod K``), so an image-blind model scores exactly chance when the
instance count is a multiple of ``K``.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import torch
from pydantic import BaseModel, ConfigDict, Field

from services.autodiff import DTYPE, seeded_generator
from services.errors import ContractError
from services.layout import MultimodalInput, TokenLayout
from services.mini_lvlm import ModelConfig

logger = logging.getLogger(__name__)

MARKER_CHANNELS = 2
N_QUERY_TOKENS = 4


class TaskKind(str, Enum):
    """Task families, from spatially local to image-independent."""

    PATCH_LOOKUP = "patch_lookup"
    MULTI_HOP = "multi_hop"
    GLOBAL_DESCRIBE = "global_describe"
    TEXT_ONLY = "text_only"


class SyntheticTask(BaseModel):
    """A reproducible set of task instances."""

    model_config = ConfigDict(frozen=True)

    kind: TaskKind
    seed: int = 0
    n_instances: int = Field(default=64, ge=1)
    system_length: int = Field(default=2, ge=0, description="System tokens before the image")


class Vocabulary(BaseModel):
    """Token id ranges shared by every task for one model shape."""

    model_config = ConfigDict(frozen=True)

    n_classes: int = Field(..., ge=2)
    n_system: int = Field(..., ge=1)

    @property
    def system_ids(self) -> range:
        return range(self.n_classes, self.n_classes + self.n_system)

    def query_token(self, kind: TaskKind) -> int:
        offset = list(TaskKind).index(kind)
        return self.n_classes + self.n_system + offset

    @property
    def digit_ids(self) -> range:
        start = self.n_classes + self.n_system + N_QUERY_TOKENS
        return range(start, start + 2 * self.n_classes)

    @property
    def size(self) -> int:
        return self.digit_ids.stop

    @classmethod
    def for_config(cls, config: ModelConfig) -> "Vocabulary":
        """Vocabulary implied by a model config.

        Raises:
            ContractError: If the patch channels or the vocabulary are too small.
        """
        n_classes = config.patch_dim - MARKER_CHANNELS
        if n_classes < 2:
            raise ContractError(
                f"patch_dim={config.patch_dim} leaves {n_classes} class channels; need at least 2"
            )
        n_system = config.vocab_size - 3 * n_classes - N_QUERY_TOKENS
        if n_system < 1:
            raise ContractError(
                f"vocab_size={config.vocab_size} is too small for {n_classes} classes "
                f"(need at least {3 * n_classes + N_QUERY_TOKENS + 1})"
            )
        return cls(n_classes=n_classes, n_system=n_system)


@dataclass
class TaskBatch:
    """Instances of one task stacked into tensors sharing a layout."""

    kind: TaskKind
    system: torch.Tensor  # [N, n_sys] long
    images: torch.Tensor  # [N, H, W, C] float64
    user: torch.Tensor  # [N, n_user] long
    answers: torch.Tensor  # [N] long

    def __len__(self) -> int:
        return int(self.answers.shape[0])

    @property
    def layout(self) -> TokenLayout:
        _, height, width, _ = self.images.shape
        return TokenLayout(n_sys=self.system.shape[1], n_img=height * width, n_user=self.user.shape[1])

    def prompt(self, index: int) -> MultimodalInput:
        return MultimodalInput(
            self.system[index].tolist(), self.images[index].clone(), self.user[index].tolist()
        )

    def subset(self, start: int, stop: int) -> "TaskBatch":
        return TaskBatch(
            self.kind,
            self.system[start:stop],
            self.images[start:stop],
            self.user[start:stop],
            self.answers[start:stop],
        )

    def score(self, predictions: torch.Tensor) -> float:
        """Fraction of predicted tokens equal to the ground-truth answer."""
        if len(self) == 0:
            raise ContractError("cannot score an empty task")
        return float((predictions.reshape(-1) == self.answers).to(torch.float64).mean())


def _one_hot_image(classes: torch.Tensor, n_classes: int) -> torch.Tensor:
    """``[H, W]`` class ids to ``[H, W, K + 2]`` patches with empty markers."""
    height, width = classes.shape
    image = torch.zeros(height, width, n_classes + MARKER_CHANNELS, dtype=DTYPE)
    image[..., :n_classes] = torch.nn.functional.one_hot(classes, n_classes).to(DTYPE)
    return image


def _random_classes(shape: tuple[int, int], n_classes: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(0, n_classes, shape, generator=generator)


def _patch_lookup(answer, grid, vocab, generator):
    classes = _random_classes(grid, vocab.n_classes, generator)
    flat = int(torch.randint(0, grid[0] * grid[1], (1,), generator=generator))
    row, col = divmod(flat, grid[1])
    classes[row, col] = answer
    image = _one_hot_image(classes, vocab.n_classes)
    image[row, col, vocab.n_classes] = 1.0
    return image, [vocab.query_token(TaskKind.PATCH_LOOKUP)]


def _multi_hop(answer, grid, vocab, generator):
    n_patches = grid[0] * grid[1]
    if n_patches < 2:
        raise ContractError("multi_hop needs at least two patches")
    classes = _random_classes(grid, vocab.n_classes, generator)
    first, second = (int(i) for i in torch.randperm(n_patches, generator=generator)[:2])
    class_a = int(torch.randint(0, vocab.n_classes, (1,), generator=generator))
    class_b = (answer - class_a) % vocab.n_classes
    for flat, cls in ((first, class_a), (second, class_b)):
        row, col = divmod(flat, grid[1])
        classes[row, col] = cls
    image = _one_hot_image(classes, vocab.n_classes)
    for flat, marker in ((first, 0), (second, 1)):
        row, col = divmod(flat, grid[1])
        image[row, col, vocab.n_classes + marker] = 1.0
    return image, [vocab.query_token(TaskKind.MULTI_HOP)]


def _global_describe(answer, grid, vocab, generator):
    n_patches = grid[0] * grid[1]
    n_major = n_patches // 2 + 1
    others = torch.randint(1, vocab.n_classes, (n_patches,), generator=generator)
    flat_classes = (answer + others) % vocab.n_classes
    chosen = torch.randperm(n_patches, generator=generator)[:n_major]
    flat_classes[chosen] = answer
    image = _one_hot_image(flat_classes.reshape(grid), vocab.n_classes)
    return image, [vocab.query_token(TaskKind.GLOBAL_DESCRIBE)]


def _text_only(answer, grid, vocab, generator):
    digit = answer + vocab.n_classes * int(torch.randint(0, 2, (1,), generator=generator))
    noise = torch.randn(*grid, vocab.n_classes + MARKER_CHANNELS, generator=generator, dtype=DTYPE)
    return noise, [vocab.query_token(TaskKind.TEXT_ONLY), vocab.digit_ids[digit]]


_BUILDERS = {
    TaskKind.PATCH_LOOKUP: _patch_lookup,
    TaskKind.MULTI_HOP: _multi_hop,
    TaskKind.GLOBAL_DESCRIBE: _global_describe,
    TaskKind.TEXT_ONLY: _text_only,
}


def generate_task(task: SyntheticTask, config: ModelConfig) -> TaskBatch:
    """Build every instance of ``task`` for a model shaped like ``config``.

    Instance ``i`` draws from its own random stream, so a batch can be
    regenerated in pieces.

    Raises:
        ContractError: If the model cannot host the task.
    """
    vocab = Vocabulary.for_config(config)
    if task.system_length > vocab.n_system:
        raise ContractError(
            f"system_length={task.system_length} exceeds the {vocab.n_system} available system ids"
        )
    system = list(vocab.system_ids)[: task.system_length]
    build = _BUILDERS[task.kind]

    images, users = [], []
    for index in range(task.n_instances):
        generator = seeded_generator(task.seed, list(TaskKind).index(task.kind), index)
        image, user = build(index % vocab.n_classes, config.patch_grid, vocab, generator)
        images.append(image)
        users.append(user)

    n = task.n_instances
    batch = TaskBatch(
        kind=task.kind,
        system=torch.tensor([system] * n, dtype=torch.long).reshape(n, task.system_length),
        images=torch.stack(images),
        user=torch.tensor(users, dtype=torch.long),
        answers=torch.arange(n, dtype=torch.long) % vocab.n_classes,
    )
    if batch.layout.prompt_length + 1 > config.max_seq:
        raise ContractError(
            f"task prompts of length {batch.layout.prompt_length} do not fit max_seq={config.max_seq}"
        )
    logger.debug(f"Generated {n} {task.kind.value} instances (seed {task.seed})")
    return batch


def chance_level(config: ModelConfig) -> float:
    return 1.0 / Vocabulary.for_config(config).n_classes
