"""Cross prompting: each decoder's prediction prompts the other decoder.

For a batch, both decoders first predict with the default (unprompted)
embedding. Point prompts are extracted from each branch's unprompted map and
fed to the OTHER branch: prompts from D1 drive D2 and vice versa. Every
prompt slot (the center point, then each random point) is decoded as one
batched pass in which all foreground classes are prompted jointly.

Random draws consume a single ``numpy.random.Generator`` in a fixed order:
source branch 1 then 2, samples in batch order, classes ascending, and for
each class the center point (no draw) before its random points.
"""

from collections.abc import Sequence

import numpy as np
import torch
from numpy.typing import NDArray

from crossprompt_seg.core.errors import InvalidInputError, ShapeMismatchError
from crossprompt_seg.core.interfaces import ISegmenter
from crossprompt_seg.core.models import BinaryMask, BranchPrediction, PromptPoint, PromptSet
from crossprompt_seg.core.prompt_geometry import (
    DEFAULT_CONNECTIVITY,
    SeedLike,
    center_point,
    class_components,
    random_point,
)

BRANCH_IDS: tuple[int, int] = (1, 2)


def multi_point_prompts(
    component: BinaryMask,
    n_center: int,
    n_random: int,
    rng: SeedLike,
    class_id: int = 1,
) -> tuple[list[PromptPoint], list[PromptPoint]]:
    """Pick up to one center point and ``n_random`` random points from a component.

    Args:
        component: Non-empty component mask.
        n_center: 0 or 1.
        n_random: Number of random points (may repeat pixels).
        rng: Seed or Generator; consumed by ``n_random`` draws.
        class_id: Class identity attached to every point.

    Returns:
        (center points, random points).

    Raises:
        InvalidInputError: If n_center is not 0 or 1, or n_random is negative.
        NoForegroundError: If the component is empty and a point is requested.
    """
    if n_center not in (0, 1):
        raise InvalidInputError(f"n_center must be 0 or 1, got {n_center}")
    if n_random < 0:
        raise InvalidInputError(f"n_random must be non-negative, got {n_random}")
    generator = np.random.default_rng(rng)
    centers = [center_point(component, class_id)] if n_center else []
    randoms = [random_point(component, generator, class_id) for _ in range(n_random)]
    return centers, randoms


def slot_prompts(
    label_map: NDArray[np.integer],
    num_classes: int,
    n_center: int,
    n_random: int,
    rng: np.random.Generator,
    connectivity: int = DEFAULT_CONNECTIVITY,
    source_branch: int | None = None,
) -> list[PromptSet] | None:
    """Build one PromptSet per prompt slot from a label map.

    Slot 0 holds every class's center point (when ``n_center`` is 1), the
    following slots hold the k-th random point of every class.

    Returns:
        The slot prompt sets, or None when no foreground class is present.
    """
    components = class_components(label_map, num_classes, connectivity)
    if not components:
        return None
    centers: list[PromptPoint] = []
    randoms: list[list[PromptPoint]] = [[] for _ in range(n_random)]
    for class_id, component in components.items():
        class_centers, class_randoms = multi_point_prompts(component, n_center, n_random, rng, class_id)
        centers.extend(class_centers)
        for slot, point in zip(randoms, class_randoms, strict=True):
            slot.append(point)
    slots = [PromptSet(tuple(centers), source_branch)] if n_center else []
    slots.extend(PromptSet(tuple(points), source_branch) for points in randoms)
    return slots


def _source_labels(prob: torch.Tensor) -> NDArray[np.int64]:
    return prob.detach().argmax(dim=1).cpu().numpy()


def _prompted_prediction(
    model: ISegmenter,
    branch_id: int,
    image_embedding: torch.Tensor,
    p: torch.Tensor,
    per_sample_slots: Sequence[list[PromptSet] | None],
    n_center: int,
    n_random: int,
) -> BranchPrediction:
    batch_size = p.shape[0]
    prompted_slots = n_center + n_random
    degenerate = torch.tensor(
        [slots is None and prompted_slots > 0 for slots in per_sample_slots],
        dtype=torch.bool,
        device=p.device,
    )
    fallback = degenerate[:, None, None, None]

    maps: list[torch.Tensor] = []
    for slot in range(prompted_slots):
        prompts = [None if slots is None else slots[slot] for slots in per_sample_slots]
        if all(prompt is None for prompt in prompts):
            maps.append(p)
            continue
        embedding = model.prompt_encode(prompts, batch_size)
        prompted = model.decode(branch_id, image_embedding, embedding)
        maps.append(torch.where(fallback, p, prompted))

    p_center = maps[0] if n_center else None
    p_random = maps[n_center:]
    p_ensemble = torch.stack(maps).sum(dim=0) / len(maps) if maps else p
    return BranchPrediction(
        branch_id=branch_id,
        p=p,
        p_center=p_center,
        p_random=p_random,
        p_ensemble=p_ensemble,
        degenerate=degenerate,
    )


def forward_all(
    model: ISegmenter,
    images: torch.Tensor,
    rng: np.random.Generator,
    n_center: int = 1,
    n_random: int = 1,
    connectivity: int = DEFAULT_CONNECTIVITY,
    reference_labels: NDArray[np.integer] | None = None,
    single_branch: bool = False,
) -> tuple[BranchPrediction, BranchPrediction]:
    """Run both decoders unprompted, then cross-prompted.

    Args:
        model: The dual-decoder segmenter.
        images: Batch (B, 1, H, W) in [0, 1].
        rng: Prompt-sampling generator.
        n_center: Center prompts per class (0 or 1).
        n_random: Random prompts per class.
        connectivity: Pixel connectivity for component analysis.
        reference_labels: Optional (B, H, W) label maps; when given, prompts
            for both branches come from these labels instead of the other
            branch's prediction.
        single_branch: Only decoder 1 runs and prompts itself; both returned
            predictions are the same object.

    Returns:
        (branch 1 prediction, branch 2 prediction). Samples whose prompt
        source holds no foreground have ``degenerate`` set and their prompted
        maps equal the unprompted map of the target branch.
    """
    if n_center not in (0, 1) or n_random < 0:
        raise InvalidInputError(f"invalid prompt counts n_center={n_center}, n_random={n_random}")
    batch_size = images.shape[0]
    if reference_labels is not None and len(reference_labels) != batch_size:
        raise ShapeMismatchError(f"{len(reference_labels)} reference label maps for a batch of {batch_size}")

    image_embedding = model.encode(images)
    default_embedding = model.prompt_encode([None] * batch_size, batch_size)
    branches = BRANCH_IDS[:1] if single_branch else BRANCH_IDS
    unprompted = {branch: model.decode(branch, image_embedding, default_embedding) for branch in branches}

    prompts_for: dict[int, list[list[PromptSet] | None]] = {}
    for source in branches:
        target = source if single_branch else BRANCH_IDS[2 - source]
        labels = reference_labels if reference_labels is not None else _source_labels(unprompted[source])
        recorded_source = None if reference_labels is not None else source
        if n_center + n_random == 0:
            prompts_for[target] = [None] * batch_size
            continue
        prompts_for[target] = [
            slot_prompts(
                np.asarray(labels[index]),
                model.num_classes,
                n_center,
                n_random,
                rng,
                connectivity,
                recorded_source,
            )
            for index in range(batch_size)
        ]

    predictions = {
        branch: _prompted_prediction(
            model,
            branch,
            image_embedding,
            unprompted[branch],
            prompts_for[branch],
            n_center,
            n_random,
        )
        for branch in branches
    }
    if single_branch:
        return predictions[1], predictions[1]
    return predictions[1], predictions[2]


def prompt_sets_for_image(
    prob_map: torch.Tensor,
    rng: np.random.Generator,
    n_center: int = 1,
    n_random: int = 1,
    connectivity: int = DEFAULT_CONNECTIVITY,
    source_branch: int | None = None,
) -> list[PromptSet]:
    """Slot prompt sets for a single (C, H, W) map; empty when it has no foreground."""
    label_map = prob_map.detach().argmax(dim=0).cpu().numpy()
    slots = slot_prompts(label_map, prob_map.shape[0], n_center, n_random, rng, connectivity, source_branch)
    return slots or []

