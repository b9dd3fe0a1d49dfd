"""Shared test fixtures for crossprompt-seg.

Provides tiny model shapes that run in milliseconds on CPU, hand-built label
maps and samples, a small run configuration, and an on-disk synthetic
dataset.
"""

from collections.abc import Callable, Iterator
from pathlib import Path

import numpy as np
import pytest
import structlog
import torch

from crossprompt_seg.adapters.synthetic_generator import SyntheticDataset, generate_synthetic
from crossprompt_seg.adapters.toy_segmenter import ToySegmenter, build_toy_model
from crossprompt_seg.cli.dependencies import get_settings
from crossprompt_seg.core.config import LoraConfig, ModelConfig, RunConfig, resolve_run_config
from crossprompt_seg.core.models import ImageSample

TINY_RESOLUTION = 32


# ---------------------------------------------------------------------------
# Process state
# ---------------------------------------------------------------------------


@pytest.fixture(autouse=True)
def _reset_process_state() -> Iterator[None]:
    """Undo logging configuration and cached settings left behind by CLI runs."""
    yield
    structlog.reset_defaults()
    get_settings.cache_clear()


# ---------------------------------------------------------------------------
# Label maps and samples
# ---------------------------------------------------------------------------


def square_label(
    size: int,
    squares: list[tuple[int, int, int, int]],
) -> np.ndarray:
    """Build an int64 label map from (top, left, side, class_id) squares painted in order."""
    label = np.zeros((size, size), dtype=np.int64)
    for top, left, side, class_id in squares:
        label[top : top + side, left : left + side] = class_id
    return label


def sample_from_label(sample_id: str, label: np.ndarray | None, size: int = TINY_RESOLUTION) -> ImageSample:
    """An image whose intensity follows the label, so the shapes are visible."""
    if label is None:
        image = np.full((size, size), 0.2, dtype=np.float32)
    else:
        image = (0.2 + 0.6 * (label > 0) + 0.1 * (label > 1)).astype(np.float32)
    return ImageSample(sample_id=sample_id, image=image, label=label)


@pytest.fixture()
def sample_factory() -> Callable[..., ImageSample]:
    """Factory: ``sample_factory(id, offset=0, labeled=True)`` -> a 32x32 two-class sample."""

    def factory(sample_id: str, offset: int = 0, labeled: bool = True) -> ImageSample:
        label = square_label(TINY_RESOLUTION, [(6 + offset, 8 + offset, 10, 1)])
        sample = sample_from_label(sample_id, label)
        if not labeled:
            sample.label = None
        return sample

    return factory


# ---------------------------------------------------------------------------
# Model and configuration
# ---------------------------------------------------------------------------


@pytest.fixture()
def tiny_model_config() -> ModelConfig:
    """A 32x32 two-class toy shape with two attention blocks."""
    return ModelConfig(
        num_classes=2,
        input_resolution=TINY_RESOLUTION,
        patch_size=8,
        embed_dim=16,
        depth=2,
        num_heads=2,
        seed=0,
    )


@pytest.fixture()
def tiny_model(tiny_model_config: ModelConfig) -> ToySegmenter:
    """Toy segmenter with LoRA applied to the encoder."""
    return build_toy_model(config=tiny_model_config, lora=LoraConfig())


@pytest.fixture()
def tiny_images() -> torch.Tensor:
    """Two 32x32 grayscale images holding one bright square each."""
    labels = [
        square_label(TINY_RESOLUTION, [(4, 4, 12, 1)]),
        square_label(TINY_RESOLUTION, [(14, 12, 10, 1)]),
    ]
    return torch.from_numpy(np.stack([sample_from_label("x", label).image for label in labels]))[:, None]


@pytest.fixture()
def tiny_run_config(tiny_model_config: ModelConfig) -> RunConfig:
    """A four-iteration run on the tiny model, validating every two iterations."""
    return resolve_run_config(
        {
            "seed": 0,
            "model": tiny_model_config.model_dump(),
            "train": {
                "total_iterations": 4,
                "warmup_iterations": 2,
                "batch_size": 4,
                "labeled_fraction": 0.5,
                "val_interval": 2,
            },
        }
    )


# ---------------------------------------------------------------------------
# Datasets on disk
# ---------------------------------------------------------------------------


@pytest.fixture()
def synthetic_dataset(tmp_path: Path) -> SyntheticDataset:
    """Twelve 32x32 two-class samples: 2 labeled, 8 unlabeled, 1 val, 1 test."""
    return generate_synthetic(
        n_samples=12,
        resolution=TINY_RESOLUTION,
        num_classes=2,
        seed=0,
        out_dir=tmp_path / "synth",
        n_labeled=2,
        val_frac=0.1,
        test_frac=0.1,
    )
