"""Inference and dataset evaluation.

Inference is unprompted: the default dense embedding drives both decoders
and the prediction is the argmax of the mean of their probability maps (ties
go to the lowest class index). The ground-truth-prompted mode instead feeds
the center point of every ground-truth class to both decoders.

Metrics are computed per (sample, class) for every foreground class and
aggregated as unweighted per-class means.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from itertools import combinations
from typing import Any

import numpy as np
import torch
from numpy.typing import NDArray

from crossprompt_seg.core.errors import CrossPromptError, GroundTruthRequiredError, InvalidInputError
from crossprompt_seg.core.interfaces import ISegmenter
from crossprompt_seg.core.metrics import asd, dsc, hd95, jaccard, mean_foreground_dsc
from crossprompt_seg.core.models import (
    BinaryMask,
    ImageSample,
    MetricsRecord,
    PromptMode,
    PromptSet,
    stack_images,
    stack_labels,
)
from crossprompt_seg.core.prompt_geometry import DEFAULT_CONNECTIVITY, prompts_from_label_map
from crossprompt_seg.observability import get_logger

logger = get_logger(__name__)

SURFACE_UNDEFINED_FLAG: str = "surface_undefined"
GT_PROMPT_FALLBACK_FLAG: str = "gt_prompt_fallback"


class EvaluationMode(StrEnum):
    """How predictions are produced for evaluation."""

    UNPROMPTED = "unprompted"
    GT_PROMPT = "gt_prompt"


class EvaluationBranch(StrEnum):
    """Which decoder output is scored."""

    ENSEMBLE = "ensemble"
    D1 = "d1"
    D2 = "d2"


def combine_branches(
    p1: torch.Tensor,
    p2: torch.Tensor,
    branch: EvaluationBranch | str = EvaluationBranch.ENSEMBLE,
) -> torch.Tensor:
    """Select one decoder's map or the elementwise mean of both."""
    branch = EvaluationBranch(branch)
    if branch is EvaluationBranch.D1:
        return p1
    if branch is EvaluationBranch.D2:
        return p2
    return (p1 + p2) / 2


@torch.no_grad()
def infer_probabilities(
    model: ISegmenter,
    images: torch.Tensor,
    branch: EvaluationBranch | str = EvaluationBranch.ENSEMBLE,
) -> torch.Tensor:
    """Unprompted (B, C, H, W) probabilities of the selected branch."""
    embedding = model.encode(images)
    default = model.prompt_encode([None] * images.shape[0], images.shape[0])
    return combine_branches(model.decode(1, embedding, default), model.decode(2, embedding, default), branch)


def infer(
    model: ISegmenter,
    images: torch.Tensor,
    branch: EvaluationBranch | str = EvaluationBranch.ENSEMBLE,
) -> NDArray[np.int64]:
    """Predicted (B, H, W) label maps from unprompted inference."""
    return infer_probabilities(model, images, branch).argmax(dim=1).cpu().numpy()


def gt_center_prompts(
    labels: NDArray[np.integer],
    num_classes: int,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> list[PromptSet | None]:
    """Center point of every ground-truth class per sample; None when a sample has no foreground."""
    prompts: list[PromptSet | None] = []
    for label in labels:
        prompt = prompts_from_label_map(np.asarray(label), num_classes, (PromptMode.CENTER,), None, connectivity)
        prompts.append(None if prompt.is_empty() else prompt)
    return prompts


@torch.no_grad()
def gt_prompt_eval(
    model: ISegmenter,
    images: torch.Tensor,
    labels: NDArray[np.integer] | None,
    branch: EvaluationBranch | str = EvaluationBranch.ENSEMBLE,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> tuple[NDArray[np.int64], list[bool]]:
    """Predict with ground-truth center prompts.

    Samples whose ground truth has no foreground fall back to unprompted
    inference.

    Returns:
        (predicted (B, H, W) label maps, per-sample fallback flags).

    Raises:
        GroundTruthRequiredError: If labels are missing.
    """
    if labels is None:
        raise GroundTruthRequiredError()
    batch_size = images.shape[0]
    prompts = gt_center_prompts(labels, model.num_classes, connectivity)
    fallback = [prompt is None for prompt in prompts]

    embedding = model.encode(images)
    default = model.prompt_encode([None] * batch_size, batch_size)
    prompted = model.prompt_encode(prompts, batch_size)
    p1 = model.decode(1, embedding, prompted)
    p2 = model.decode(2, embedding, prompted)
    combined = combine_branches(p1, p2, branch)
    if any(fallback):
        unprompted = combine_branches(model.decode(1, embedding, default), model.decode(2, embedding, default), branch)
        mask = torch.tensor(fallback, dtype=torch.bool)[:, None, None, None]
        combined = torch.where(mask, unprompted, combined)
    return combined.argmax(dim=1).cpu().numpy(), fallback


def score_sample(
    sample_id: str,
    prediction: NDArray[np.integer],
    label: NDArray[np.integer],
    num_classes: int,
    spacing: tuple[float, float] | None = None,
    flags: Sequence[str] = (),
) -> list[MetricsRecord]:
    """One MetricsRecord per foreground class."""
    records = []
    for class_id in range(1, num_classes):
        pred_mask = BinaryMask(prediction == class_id)
        gt_mask = BinaryMask(label == class_id)
        surface_hd = hd95(pred_mask, gt_mask, spacing)
        surface_asd = asd(pred_mask, gt_mask, spacing)
        record_flags = list(flags)
        if surface_hd is None:
            record_flags.append(SURFACE_UNDEFINED_FLAG)
        records.append(
            MetricsRecord(
                sample_id=sample_id,
                class_id=class_id,
                dsc=dsc(pred_mask, gt_mask),
                jc=jaccard(pred_mask, gt_mask),
                hd95=surface_hd,
                asd=surface_asd,
                flags=record_flags,
            )
        )
    return records


@dataclass
class EvaluationResult:
    """Records per scored branch plus samples that could not be evaluated.

    Attributes:
        records: Branch name -> per-(sample, class) records.
        failures: ``{"sample_id", "error"}`` for every skipped sample.
    """

    records: dict[str, list[MetricsRecord]] = field(default_factory=dict)
    failures: list[dict[str, str]] = field(default_factory=list)


SampleLoader = Callable[[str], ImageSample]


class EvaluationService:
    """Evaluates a segmenter over a list of samples.

    Args:
        model: The trained segmenter.
        connectivity: Pixel connectivity for ground-truth prompts.
    """

    def __init__(self, model: ISegmenter, connectivity: int = DEFAULT_CONNECTIVITY) -> None:
        self._model = model
        self._connectivity = connectivity

    def predict(
        self,
        sample: ImageSample,
        mode: EvaluationMode | str,
        branch: EvaluationBranch | str,
    ) -> tuple[NDArray[np.int64], list[str]]:
        """Predicted label map of one sample plus flags raised while predicting."""
        images = stack_images([sample.image])
        if EvaluationMode(mode) is EvaluationMode.GT_PROMPT:
            labels = None if sample.label is None else stack_labels([sample.label]).numpy()
            prediction, fallback = gt_prompt_eval(self._model, images, labels, branch, self._connectivity)
            return prediction[0], [GT_PROMPT_FALLBACK_FLAG] if fallback[0] else []
        return infer(self._model, images, branch)[0], []

    def evaluate_dataset(
        self,
        sample_ids: Sequence[str],
        load: SampleLoader,
        mode: EvaluationMode | str = EvaluationMode.UNPROMPTED,
        branches: Sequence[EvaluationBranch | str] = (EvaluationBranch.ENSEMBLE,),
        spacing_table: dict[str, tuple[float, float]] | None = None,
    ) -> EvaluationResult:
        """Score every sample of a split.

        Failures to load or predict one sample are recorded and the run
        continues.

        Args:
            sample_ids: Ids to evaluate, in report order.
            load: Returns the preprocessed sample for an id.
            mode: Unprompted or ground-truth-prompted prediction.
            branches: Outputs to score (ensemble, d1, d2).
            spacing_table: Per-sample spacing overriding the sample's own.

        Raises:
            InvalidInputError: If the split is empty.
        """
        if not sample_ids:
            raise InvalidInputError("cannot evaluate an empty split")
        mode = EvaluationMode(mode)
        result = EvaluationResult(records={EvaluationBranch(branch).value: [] for branch in branches})
        spacing_table = spacing_table or {}

        for sample_id in sample_ids:
            try:
                sample = load(sample_id)
                if sample.label is None:
                    raise GroundTruthRequiredError(f"sample {sample_id} has no ground truth to score against")
                spacing = spacing_table.get(sample_id, sample.spacing)
                for branch in result.records:
                    prediction, flags = self.predict(sample, mode, branch)
                    result.records[branch].extend(
                        score_sample(
                            sample_id,
                            prediction,
                            sample.label,
                            self._model.num_classes,
                            spacing,
                            [*sample.flags, *flags],
                        )
                    )
            except GroundTruthRequiredError:
                raise
            except (CrossPromptError, OSError, ValueError) as exc:
                logger.warning("Sample evaluation failed", sample_id=sample_id, error=str(exc))
                result.failures.append({"sample_id": sample_id, "error": str(exc)})

        logger.info(
            "Evaluation complete",
            mode=mode.value,
            samples=len(sample_ids),
            failures=len(result.failures),
            **{f"dsc_{branch}": mean_foreground_dsc(records) for branch, records in result.records.items()},
        )
        return result


def scored_branch(single_branch: bool) -> EvaluationBranch:
    """Branch to score by default; decoder 2 never trains in a single-branch run."""
    return EvaluationBranch.D1 if single_branch else EvaluationBranch.ENSEMBLE


def validation_dsc(
    model: ISegmenter,
    samples: Sequence[ImageSample],
    batch_size: int = 8,
    branch: EvaluationBranch | str = EvaluationBranch.ENSEMBLE,
) -> float:
    """Mean foreground DSC of unprompted inference of one branch over labeled samples."""
    records: list[MetricsRecord] = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        predictions = infer(model, stack_images([sample.image for sample in batch]), branch)
        for sample, prediction in zip(batch, predictions, strict=True):
            if sample.label is None:
                raise GroundTruthRequiredError(f"validation sample {sample.sample_id} has no ground truth")
            for class_id in range(1, model.num_classes):
                records.append(
                    MetricsRecord(
                        sample_id=sample.sample_id,
                        class_id=class_id,
                        dsc=dsc(BinaryMask(prediction == class_id), BinaryMask(sample.label == class_id)),
                        jc=0.0,
                        hd95=None,
                        asd=None,
                    )
                )
    return mean_foreground_dsc(records)


@torch.no_grad()
def prompt_sensitivity(
    model: ISegmenter,
    samples: Sequence[ImageSample],
    n_prompts: int = 5,
    seed: int = 0,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> float:
    """Mean pairwise disagreement (100 - DSC) between outputs under random ground-truth prompts.

    For every labeled sample, ``n_prompts`` prompt sets are drawn with one
    random point per ground-truth class; the ensemble prediction under each
    set is compared with every other. Lower values mean the model is less
    sensitive to where a prompt lands.

    Raises:
        InvalidInputError: If fewer than two prompts are requested.
    """
    if n_prompts < 2:
        raise InvalidInputError(f"n_prompts must be at least 2, got {n_prompts}")
    rng = np.random.default_rng(seed)
    disagreements: list[float] = []
    for sample in samples:
        if sample.label is None:
            continue
        images = stack_images([sample.image])
        embedding = model.encode(images)
        predictions: list[NDArray[np.int64]] = []
        for _ in range(n_prompts):
            prompt = prompts_from_label_map(sample.label, model.num_classes, (PromptMode.RANDOM,), rng, connectivity)
            if prompt.is_empty():
                break
            prompted = model.prompt_encode([prompt], 1)
            combined = combine_branches(model.decode(1, embedding, prompted), model.decode(2, embedding, prompted))
            predictions.append(combined.argmax(dim=1)[0].cpu().numpy())
        for first, second in combinations(predictions, 2):
            scores = [
                dsc(BinaryMask(first == class_id), BinaryMask(second == class_id))
                for class_id in range(1, model.num_classes)
            ]
            disagreements.append(100.0 - float(np.mean(scores)))
    return float(np.mean(disagreements)) if disagreements else 0.0


def evaluation_context(**values: Any) -> dict[str, Any]:
    """Report context with None values dropped."""
    return {key: value for key, value in values.items() if value is not None}
