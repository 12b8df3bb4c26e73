"""Pytest configuration and fixtures."""

import pytest
import torch

from services.autodiff import DTYPE, seeded_generator
from services.layout import MultimodalInput
from services.mini_lvlm import MiniLVLM, ModelConfig
from services.synthetic_tasks import TaskBatch, TaskKind, Vocabulary


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep a developer's OUTPUT_DIR / LOG_DIR out of the tests."""
    monkeypatch.delenv("OUTPUT_DIR", raising=False)
    monkeypatch.delenv("LOG_DIR", raising=False)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """2-layer toy: vocab 24 = 4 classes, 8 system ids, 4 query ids, 8 digits."""
    return ModelConfig(
        n_layers=2, n_heads=2, d_model=16, vocab_size=24, patch_grid=(2, 2), patch_dim=6, max_seq=32
    )


@pytest.fixture
def tiny_model(tiny_config) -> MiniLVLM:
    return MiniLVLM(tiny_config)


@pytest.fixture
def small_config() -> ModelConfig:
    """2-layer, 2-head, d=32 model with a 3x3 patch grid."""
    return ModelConfig(n_layers=2, n_heads=2, d_model=32, vocab_size=24, patch_grid=(3, 3), patch_dim=6)


@pytest.fixture
def small_model(small_config) -> MiniLVLM:
    return MiniLVLM(small_config)


def random_prompt(config: ModelConfig, seed: int = 0, n_sys: int = 2, n_user: int = 2) -> MultimodalInput:
    """Prompt with Gaussian patches and random non-class token ids."""
    generator = seeded_generator(seed, 99)
    vocab = Vocabulary.for_config(config)
    low = vocab.n_classes
    system = torch.randint(low, config.vocab_size, (n_sys,), generator=generator).tolist()
    user = torch.randint(low, config.vocab_size, (n_user,), generator=generator).tolist()
    image = torch.randn(*config.patch_grid, config.patch_dim, generator=generator, dtype=DTYPE)
    return MultimodalInput(system, image, user)


def noisy_batch(
    config: ModelConfig, n: int = 64, seed: int = 0, kind: TaskKind = TaskKind.PATCH_LOOKUP, scale: float = 2.0
) -> TaskBatch:
    """Batch with strongly varying Gaussian images, for agreement sweeps on random models."""
    generator = seeded_generator(seed, 7)
    vocab = Vocabulary.for_config(config)
    system = torch.tensor([list(vocab.system_ids)[:2]] * n, dtype=torch.long)
    user = torch.randint(vocab.n_classes, config.vocab_size, (n, 2), generator=generator)
    images = scale * torch.randn(n, *config.patch_grid, config.patch_dim, generator=generator, dtype=DTYPE)
    return TaskBatch(kind=kind, system=system, images=images, user=user, answers=torch.zeros(n, dtype=torch.long))


@pytest.fixture
def prompt(tiny_config) -> MultimodalInput:
    return random_prompt(tiny_config)
