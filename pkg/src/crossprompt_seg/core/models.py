"""Domain types shared across the core and adapter layers.

Array conventions:
  - masks and label maps are ``(H, W)`` numpy arrays;
  - probability maps in the model and loss code are ``(B, C, H, W)`` torch
    tensors, and ``(C, H, W)`` numpy arrays inside prompt geometry.

Domain model:
  BinaryMask       : validated H×W boolean grid
  PromptPoint      : one positive point prompt with class identity and mode
  PromptSet        : at most one point per (class, mode) from one source
  PromptEmbedding  : sparse point tokens + dense embedding fed to a decoder
  BranchPrediction : per-decoder unprompted / prompted / ensemble maps
  ImageSample      : one 2D image with optional label map
  MetricsRecord    : per-sample, per-class metric values
"""

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
import torch
from numpy.typing import NDArray

from crossprompt_seg.core.errors import InvalidInputError


class PromptMode(StrEnum):
    """How a point was picked from its component."""

    CENTER = "center"
    RANDOM = "random"


# Emission order within a class: center before random.
PROMPT_MODE_ORDER: tuple[PromptMode, ...] = (PromptMode.CENTER, PromptMode.RANDOM)


@dataclass(frozen=True)
class BinaryMask:
    """An H×W boolean grid.

    Attributes:
        grid: Boolean array of shape (height, width).
    """

    grid: NDArray[np.bool_]

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid)
        if grid.ndim != 2 or grid.shape[0] <= 0 or grid.shape[1] <= 0:
            raise InvalidInputError(f"mask must be a non-empty 2D array, got shape {grid.shape}")
        if grid.dtype != np.bool_:
            if not np.isin(grid, (0, 1)).all():
                raise InvalidInputError("mask cells must be exactly 0 or 1")
            grid = grid.astype(bool)
        object.__setattr__(self, "grid", grid)

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        """Return an all-background mask of the given size."""
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return int(self.grid.shape[0])

    @property
    def width(self) -> int:
        return int(self.grid.shape[1])

    @property
    def area(self) -> int:
        """Number of foreground pixels."""
        return int(self.grid.sum())

    def is_empty(self) -> bool:
        return not self.grid.any()


@dataclass(frozen=True)
class PromptPoint:
    """A positive point prompt.

    Attributes:
        row: Pixel row index.
        col: Pixel column index.
        class_id: Foreground class in [1, C-1].
        mode: Center or random selection.
        positive: Always True; negative points are not supported.
    """

    row: int
    col: int
    class_id: int
    mode: PromptMode
    positive: bool = True

    def __post_init__(self) -> None:
        if self.class_id < 1:
            raise InvalidInputError(f"class_id must be a foreground class (>= 1), got {self.class_id}")
        if self.row < 0 or self.col < 0:
            raise InvalidInputError(f"point ({self.row}, {self.col}) has a negative coordinate")
        if not self.positive:
            raise InvalidInputError("negative point prompts are not supported")

    def in_bounds(self, height: int, width: int) -> bool:
        return 0 <= self.row < height and 0 <= self.col < width

    def to_dict(self) -> dict[str, object]:
        return {
            "row": self.row,
            "col": self.col,
            "class_id": self.class_id,
            "mode": self.mode.value,
            "positive": self.positive,
        }


@dataclass(frozen=True)
class PromptSet:
    """Point prompts from one source, at most one per (class_id, mode).

    Attributes:
        points: The prompts, ordered by class then mode.
        source_branch: Branch whose prediction produced the prompts; None for
            ground-truth or mask-derived prompts.
    """

    points: tuple[PromptPoint, ...] = ()
    source_branch: int | None = None

    def __post_init__(self) -> None:
        keys = [(point.class_id, point.mode) for point in self.points]
        if len(keys) != len(set(keys)):
            raise InvalidInputError("PromptSet holds duplicate (class_id, mode) pairs")

    def __len__(self) -> int:
        return len(self.points)

    def is_empty(self) -> bool:
        return not self.points

    def for_mode(self, mode: PromptMode) -> "PromptSet":
        """Return the subset of points picked with the given mode."""
        return PromptSet(tuple(p for p in self.points if p.mode == mode), self.source_branch)

    def class_ids(self) -> list[int]:
        return sorted({point.class_id for point in self.points})

    def to_dict(self) -> dict[str, object]:
        return {
            "source_branch": self.source_branch,
            "points": [point.to_dict() for point in self.points],
        }


@dataclass
class PromptEmbedding:
    """Decoder-ready prompt embedding for a batch.

    Attributes:
        sparse: Point tokens, shape (B, N, D); always holds at least the
            not-a-point token so attention never sees an all-masked row.
        sparse_valid: Boolean (B, N), True for real tokens.
        dense: Dense embedding, shape (B, D, gh, gw).
    """

    sparse: torch.Tensor
    sparse_valid: torch.Tensor
    dense: torch.Tensor


@dataclass
class BranchPrediction:
    """Outputs of one decoder for a batch.

    Attributes:
        branch_id: 1 or 2.
        p: Unprompted probability map (B, C, H, W).
        p_center: Center-prompted map, or None when no center prompt was used.
        p_random: Random-prompted maps, one per random prompt slot.
        p_ensemble: Mean of all prompted maps (equal to ``p`` when none).
        degenerate: Bool (B,), True where the prompt source predicted no
            foreground and prompted maps fell back to ``p``.
    """

    branch_id: int
    p: torch.Tensor
    p_center: torch.Tensor | None
    p_random: list[torch.Tensor]
    p_ensemble: torch.Tensor
    degenerate: torch.Tensor

    @property
    def p_r(self) -> torch.Tensor | None:
        """First random-prompted map (the single random prompt of the default recipe)."""
        return self.p_random[0] if self.p_random else None

    def prompted_maps(self) -> list[torch.Tensor]:
        maps = [self.p_center] if self.p_center is not None else []
        return maps + list(self.p_random)


@dataclass
class ImageSample:
    """One 2D image with an optional dense label map.

    Attributes:
        sample_id: Stable identifier.
        image: Intensity array (H, W) or (H, W, channels).
        label: Integer map (H, W) with values in [0, C-1], or None if unlabeled.
        spacing: Physical pixel size (row, col), or None for pixel units.
        group: Grouping key (e.g. patient) used for splitting.
        flags: Processing notes such as ``constant_image``.
    """

    sample_id: str
    image: NDArray[np.float32]
    label: NDArray[np.int64] | None = None
    spacing: tuple[float, float] | None = None
    group: str | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.label is not None and self.label.shape != self.image.shape[:2]:
            raise InvalidInputError(
                f"label shape {self.label.shape} is not aligned with image shape {self.image.shape[:2]}"
            )

    @property
    def is_labeled(self) -> bool:
        return self.label is not None


@dataclass
class MetricsRecord:
    """Metric values for one (sample, class) pair.

    Attributes:
        sample_id: Sample identifier.
        class_id: Foreground class.
        dsc: Dice similarity coefficient in percent.
        jc: Jaccard index in percent.
        hd95: 95th-percentile Hausdorff distance, None when undefined.
        asd: Average surface distance, None when undefined.
        flags: Notes such as ``surface_undefined`` or ``load_failed``.
    """

    sample_id: str
    class_id: int
    dsc: float
    jc: float
    hd95: float | None
    asd: float | None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, object]:
        return {
            "sample_id": self.sample_id,
            "class": self.class_id,
            "dsc": self.dsc,
            "jc": self.jc,
            "hd95": self.hd95,
            "asd": self.asd,
            "flags": list(self.flags),
        }


def stack_labels(labels: Iterable[NDArray[np.int64]]) -> torch.Tensor:
    """Stack (H, W) label maps into a (B, H, W) int64 tensor."""
    return torch.from_numpy(np.stack([np.asarray(label, dtype=np.int64) for label in labels]))


def stack_images(images: Sequence[NDArray[np.float32]]) -> torch.Tensor:
    """Stack (H, W) images into a (B, 1, H, W) float32 tensor."""
    return torch.from_numpy(np.stack([np.asarray(image, dtype=np.float32) for image in images])[:, None])
