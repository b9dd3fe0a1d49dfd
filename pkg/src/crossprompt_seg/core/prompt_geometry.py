"""Point prompt extraction from (possibly noisy) probability maps.

Pipeline per foreground class: argmax-binarize the map, label connected
components, keep the largest one, then pick a center point (distance
transform argmax) and/or a uniformly random point from it.

Conventions:
  - connectivity defaults to 8 and is configurable (4 or 8);
  - the image border counts as background for the distance transform;
  - every tie breaks by the lexicographically smallest (row, col).

All functions are pure; randomness flows through an explicit seed or
``numpy.random.Generator``.
"""

from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from crossprompt_seg.core.errors import InvalidInputError, NoForegroundError
from crossprompt_seg.core.models import PROMPT_MODE_ORDER, BinaryMask, PromptMode, PromptPoint, PromptSet

DEFAULT_CONNECTIVITY: int = 8

# Tolerance for the per-pixel simplex check on probability maps
_SIMPLEX_TOLERANCE: float = 1e-4

SeedLike = int | np.random.Generator | None


@dataclass(frozen=True)
class ComponentMap:
    """Connected-component labelling of a mask.

    Attributes:
        labels: Int array (H, W); 0 is background, components are 1..count.
        sizes: Pixel count of each component, ``sizes[k - 1]`` for label k.
    """

    labels: NDArray[np.int32]
    sizes: NDArray[np.int64]

    @property
    def count(self) -> int:
        return int(self.sizes.shape[0])


def _structure(connectivity: int) -> NDArray[np.bool_]:
    if connectivity not in (4, 8):
        raise InvalidInputError(f"connectivity must be 4 or 8, got {connectivity}")
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def connected_components(mask: BinaryMask, connectivity: int = DEFAULT_CONNECTIVITY) -> ComponentMap:
    """Label the maximal connected foreground sets of a mask.

    Args:
        mask: Binary mask.
        connectivity: 4 or 8.

    Returns:
        ComponentMap with background 0 and one label >= 1 per component.
    """
    labels, count = ndimage.label(mask.grid, structure=_structure(connectivity))
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:].astype(np.int64)
    return ComponentMap(labels=labels.astype(np.int32), sizes=sizes)


def largest_component(mask: BinaryMask, connectivity: int = DEFAULT_CONNECTIVITY) -> BinaryMask:
    """Return the component with the most pixels.

    Ties go to the component containing the lexicographically smallest
    (row, col) pixel. An empty input yields an empty output.

    Args:
        mask: Binary mask.
        connectivity: 4 or 8.

    Returns:
        Mask of the selected component.
    """
    components = connected_components(mask, connectivity)
    if components.count == 0:
        return BinaryMask.empty(mask.height, mask.width)

    index = np.arange(1, components.count + 1)
    flat_positions = np.arange(mask.grid.size).reshape(mask.grid.shape)
    first_pixel = np.asarray(ndimage.minimum(flat_positions, components.labels, index=index), dtype=np.int64)

    largest = components.sizes.max()
    candidates = np.flatnonzero(components.sizes == largest)
    chosen = int(candidates[np.argmin(first_pixel[candidates])]) + 1
    return BinaryMask(components.labels == chosen)


def distance_to_background(component: BinaryMask) -> NDArray[np.float64]:
    """Euclidean distance of every pixel to the nearest background pixel.

    The image border is treated as background: a pixel on the edge has
    distance 1.
    """
    padded = np.pad(component.grid, 1, mode="constant", constant_values=False)
    return np.asarray(ndimage.distance_transform_edt(padded)[1:-1, 1:-1], dtype=np.float64)


def center_point(component: BinaryMask, class_id: int = 1) -> PromptPoint:
    """Pick the pixel deepest inside the component.

    Args:
        component: Non-empty component mask.
        class_id: Class identity attached to the point.

    Returns:
        Center-mode point maximizing distance to background; ties go to the
        smallest row, then the smallest column.

    Raises:
        NoForegroundError: If the component is empty.
    """
    if component.is_empty():
        raise NoForegroundError()
    distances = distance_to_background(component)
    # argmax over the row-major flattening returns the first maximum
    row, col = np.unravel_index(int(np.argmax(distances)), distances.shape)
    return PromptPoint(row=int(row), col=int(col), class_id=class_id, mode=PromptMode.CENTER)


def random_point(component: BinaryMask, rng_seed: SeedLike, class_id: int = 1) -> PromptPoint:
    """Sample a pixel uniformly from the component.

    Args:
        component: Non-empty component mask.
        rng_seed: Integer seed or a Generator (consumed by one draw).
        class_id: Class identity attached to the point.

    Returns:
        Random-mode point.

    Raises:
        NoForegroundError: If the component is empty.
    """
    if component.is_empty():
        raise NoForegroundError()
    rng = np.random.default_rng(rng_seed)
    pixels = np.argwhere(component.grid)
    row, col = pixels[int(rng.integers(0, len(pixels)))]
    return PromptPoint(row=int(row), col=int(col), class_id=class_id, mode=PromptMode.RANDOM)


def check_simplex(prob_map: NDArray[np.floating], tolerance: float = _SIMPLEX_TOLERANCE) -> None:
    """Raise InvalidInputError unless a (C, H, W) map is a per-pixel distribution."""
    if prob_map.ndim != 3 or prob_map.shape[0] < 2:
        raise InvalidInputError(f"probability map must have shape (C>=2, H, W), got {prob_map.shape}")
    if (prob_map < -tolerance).any() or not np.allclose(prob_map.sum(axis=0), 1.0, atol=tolerance):
        raise InvalidInputError("probability map does not sum to 1 across classes at every pixel")


def class_components(
    label_map: NDArray[np.integer],
    num_classes: int,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> dict[int, BinaryMask]:
    """Largest component of every foreground class present in a label map.

    Args:
        label_map: Integer map (H, W).
        num_classes: Number of classes C including background.
        connectivity: 4 or 8.

    Returns:
        Mapping class_id -> largest component, ascending by class, absent
        classes omitted.
    """
    components: dict[int, BinaryMask] = {}
    for class_id in range(1, num_classes):
        class_mask = label_map == class_id
        if not class_mask.any():
            continue
        components[class_id] = largest_component(BinaryMask(class_mask), connectivity)
    return components


def prompts_from_label_map(
    label_map: NDArray[np.integer],
    num_classes: int,
    modes: Iterable[PromptMode | str],
    rng_seed: SeedLike,
    connectivity: int = DEFAULT_CONNECTIVITY,
    source_branch: int | None = None,
) -> PromptSet:
    """Emit one point per requested mode for every class present in a label map.

    Args:
        label_map: Integer map (H, W), e.g. ground truth or an argmax map.
        num_classes: Number of classes C including background.
        modes: Subset of {center, random}.
        rng_seed: Seed or Generator for random points.
        connectivity: 4 or 8.
        source_branch: Recorded on the returned PromptSet.

    Returns:
        PromptSet ordered by class, center before random within a class.
    """
    requested = {PromptMode(mode) for mode in modes}
    rng = np.random.default_rng(rng_seed)
    points: list[PromptPoint] = []
    for class_id, component in class_components(label_map, num_classes, connectivity).items():
        for mode in PROMPT_MODE_ORDER:
            if mode not in requested:
                continue
            if mode is PromptMode.CENTER:
                points.append(center_point(component, class_id))
            else:
                points.append(random_point(component, rng, class_id))
    return PromptSet(points=tuple(points), source_branch=source_branch)


def extract_prompts(
    prob_map: NDArray[np.floating],
    modes: Iterable[PromptMode | str],
    rng_seed: SeedLike,
    connectivity: int = DEFAULT_CONNECTIVITY,
    source_branch: int | None = None,
) -> PromptSet:
    """Extract point prompts from a C-class probability map.

    Per foreground class: argmax-binarize, take the largest component, and
    emit one point per requested mode. Classes with no predicted foreground
    contribute no points, so the result may be empty.

    Args:
        prob_map: Probability map (C, H, W) summing to 1 per pixel.
        modes: Subset of {center, random}.
        rng_seed: Seed or Generator for random points.
        connectivity: 4 or 8.
        source_branch: Branch that produced the map, recorded on the result.

    Returns:
        PromptSet with at most one point per (class, mode).

    Raises:
        InvalidInputError: If the map is not a per-pixel distribution.
    """
    prob_map = np.asarray(prob_map)
    check_simplex(prob_map)
    label_map = np.argmax(prob_map, axis=0)
    return prompts_from_label_map(label_map, prob_map.shape[0], modes, rng_seed, connectivity, source_branch)
