"""Abstract interfaces (Protocol classes) for the crossprompt-seg core.

Services depend on these interfaces, not on the torch modules or file
formats in ``adapters/``. This keeps the cross prompting, training, and
evaluation logic testable with small fakes.
"""

from pathlib import Path
from typing import Any, Protocol, runtime_checkable

import torch

from crossprompt_seg.core.models import MetricsRecord, PromptEmbedding, PromptSet


@runtime_checkable
class ISegmenter(Protocol):
    """A promptable segmenter with one shared encoder and two mask decoders.

    Every decoder output is a per-pixel probability map over ``num_classes``
    classes at ``input_resolution``.
    """

    num_classes: int
    input_resolution: int

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Encode (B, 1 or 3, H, W) images in [0, 1] into an image embedding."""
        ...

    def prompt_encode(self, prompts: list[PromptSet | None], batch_size: int) -> PromptEmbedding:
        """Embed one optional PromptSet per sample; None or empty means unprompted."""
        ...

    def decode(
        self,
        branch_id: int,
        image_embedding: torch.Tensor,
        prompt_embedding: PromptEmbedding,
    ) -> torch.Tensor:
        """Decode with branch 1 or 2 into a (B, C, H, W) probability map."""
        ...

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        """Parameters the optimizer updates."""
        ...


@runtime_checkable
class ICheckpointStore(Protocol):
    """Persistence for model, adapter, and training state."""

    def save(self, path: Path, payload: dict[str, Any]) -> Path:
        """Write a checkpoint payload and return the written path."""
        ...

    def load(self, path: Path) -> dict[str, Any]:
        """Read a checkpoint payload written by ``save``."""
        ...


@runtime_checkable
class IReportWriter(Protocol):
    """Writes evaluation reports."""

    def write(self, path: Path, records: list[MetricsRecord], context: dict[str, Any]) -> Path:
        """Write per-sample records plus summary; return the written path."""
        ...


@runtime_checkable
class ITrainingLogPublisher(Protocol):
    """Sink for one structured record per training step."""

    def publish(self, record: dict[str, Any]) -> None:
        """Append one training record."""
        ...

    def close(self) -> None:
        """Flush and release the sink."""
        ...
