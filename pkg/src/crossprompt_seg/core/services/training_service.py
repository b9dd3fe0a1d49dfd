"""Semi-supervised training orchestration.

Implements the training workflow:
    1. compose_batch()  draws labeled and unlabeled samples from cycling streams
    2. train_step()     augments, runs the cross-prompted forward pass,
                        combines L_s, L_cross and L_c, and takes one AdamW step
    3. TrainingService.run()  loops train_step, validates every
                        ``val_interval`` iterations, keeps best/last
                        checkpoints, and publishes one log record per step

Randomness comes from three named numpy streams (data, augmentation, prompt)
so changing one kind of draw never shifts another. Each stream, the two
sample cursors, the iteration counter and the optimizer state are saved in
every checkpoint, and a resumed run follows the same trajectory.

Checkpoint payload construction and augmentation are injected; no adapter
module is imported here.
"""

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Generic, TypeVar

import numpy as np
import torch

from crossprompt_seg.core.config import IterationUnit, LabeledPromptSource, PcrTarget, RunConfig, TrainConfig
from crossprompt_seg.core.cross_prompting import forward_all
from crossprompt_seg.core.errors import InvalidInputError, NonFiniteLossError
from crossprompt_seg.core.interfaces import ICheckpointStore, ISegmenter, ITrainingLogPublisher
from crossprompt_seg.core.losses import cross_prompting_loss, one_hot, pcr_loss, supervised_loss, total_loss
from crossprompt_seg.core.models import BranchPrediction, ImageSample, stack_images, stack_labels
from crossprompt_seg.core.schedule import build_optimizer, lr_schedule, set_learning_rate
from crossprompt_seg.core.services.evaluation_service import scored_branch, validation_dsc
from crossprompt_seg.observability import get_logger

logger = get_logger(__name__)

RNG_STREAMS: tuple[str, ...] = ("data", "augmentation", "prompt")

T = TypeVar("T")

Augmenter = Callable[[ImageSample, np.random.Generator], ImageSample]
PayloadBuilder = Callable[[ISegmenter, RunConfig, dict[str, Any]], dict[str, Any]]


def make_rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for data order, augmentation and prompt sampling."""
    return {name: np.random.default_rng([seed, index]) for index, name in enumerate(RNG_STREAMS)}


class CyclingStream(Generic[T]):
    """Endless sampler over a fixed pool that reshuffles on every pass.

    Args:
        items: The pool; may be empty, in which case ``take`` only accepts 0.
        rng: Generator used for each reshuffle.
    """

    def __init__(self, items: Sequence[T], rng: np.random.Generator) -> None:
        self._items = list(items)
        self._rng = rng
        self._order: list[int] = []
        self._position = 0
        self.passes = 0

    def __len__(self) -> int:
        return len(self._items)

    def take(self, count: int) -> list[T]:
        """Return the next ``count`` items, reshuffling whenever a pass ends."""
        if count and not self._items:
            raise InvalidInputError("cannot draw from an empty sample pool")
        taken = []
        for _ in range(count):
            if self._position >= len(self._order):
                self._order = self._rng.permutation(len(self._items)).tolist()
                self._position = 0
                self.passes += 1
            taken.append(self._items[self._order[self._position]])
            self._position += 1
        return taken

    def state_dict(self) -> dict[str, Any]:
        return {"order": list(self._order), "position": self._position, "passes": self.passes}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self._order = [int(index) for index in state["order"]]
        self._position = int(state["position"])
        self.passes = int(state["passes"])


@dataclass
class Batch:
    """Samples of one training step."""

    labeled: list[ImageSample]
    unlabeled: list[ImageSample]

    @property
    def sample_ids(self) -> list[str]:
        return [sample.sample_id for sample in (*self.labeled, *self.unlabeled)]


def batch_counts(config: RunConfig) -> tuple[int, int]:
    """(labeled, unlabeled) samples per batch."""
    batch_size = config.train.batch_size
    if config.ablation.disable_unlabeled:
        return batch_size, 0
    n_labeled = math.floor(round(batch_size * config.train.labeled_fraction, 9))
    return n_labeled, batch_size - n_labeled


def compose_batch(
    labeled: CyclingStream[ImageSample],
    unlabeled: CyclingStream[ImageSample] | None,
    config: RunConfig,
) -> Batch:
    """Draw ``floor(B * labeled_fraction)`` labeled and the rest unlabeled samples.

    With ``disable_unlabeled`` the whole batch is labeled.

    Raises:
        InvalidInputError: If the labeled pool is empty, or unlabeled samples
            are needed and the unlabeled pool is empty.
    """
    if not len(labeled):
        raise InvalidInputError("the labeled set is empty")
    n_labeled, n_unlabeled = batch_counts(config)
    if n_unlabeled and (unlabeled is None or not len(unlabeled)):
        raise InvalidInputError("the unlabeled set is empty; enable disable_unlabeled to train on labels only")
    return Batch(
        labeled=labeled.take(n_labeled),
        unlabeled=unlabeled.take(n_unlabeled) if unlabeled is not None else [],
    )


@dataclass
class TrainState:
    """Everything needed to continue a run.

    Attributes:
        iteration: Completed optimizer steps.
        optimizer: AdamW over the trainable parameters.
        rngs: Named generators, see ``RNG_STREAMS``.
        labeled: Cycling stream over the labeled pool.
        unlabeled: Cycling stream over the unlabeled pool.
        best_val_dsc: Best validation DSC so far, None before the first validation.
        best_iteration: Iteration at which ``best_val_dsc`` was reached.
    """

    iteration: int
    optimizer: torch.optim.Optimizer
    rngs: dict[str, np.random.Generator]
    labeled: CyclingStream[ImageSample]
    unlabeled: CyclingStream[ImageSample]
    best_val_dsc: float | None = None
    best_iteration: int | None = None

    def to_dict(self) -> dict[str, Any]:
        """Serializable snapshot stored under ``train_state`` in checkpoints."""
        return {
            "iteration": self.iteration,
            "optimizer": self.optimizer.state_dict(),
            "rngs": {name: rng.bit_generator.state for name, rng in self.rngs.items()},
            "samplers": {"labeled": self.labeled.state_dict(), "unlabeled": self.unlabeled.state_dict()},
            "best_val_dsc": self.best_val_dsc,
            "best_iteration": self.best_iteration,
        }

    def load_dict(self, state: dict[str, Any]) -> None:
        """Restore a snapshot written by ``to_dict``.

        Raises:
            InvalidInputError: If the snapshot lacks a field.
        """
        try:
            self.iteration = int(state["iteration"])
            self.optimizer.load_state_dict(state["optimizer"])
            for name in RNG_STREAMS:
                self.rngs[name].bit_generator.state = state["rngs"][name]
            self.labeled.load_state_dict(state["samplers"]["labeled"])
            self.unlabeled.load_state_dict(state["samplers"]["unlabeled"])
            self.best_val_dsc = state.get("best_val_dsc")
            self.best_iteration = state.get("best_iteration")
        except KeyError as exc:
            raise InvalidInputError(f"training state is missing {exc}") from exc


def new_train_state(
    model: ISegmenter,
    config: RunConfig,
    labeled: Sequence[ImageSample],
    unlabeled: Sequence[ImageSample],
) -> TrainState:
    """Fresh state: optimizer over the trainable parameters, seeded streams."""
    rngs = make_rng_streams(config.seed)
    return TrainState(
        iteration=0,
        optimizer=build_optimizer(model.trainable_parameters(), config.train),
        rngs=rngs,
        labeled=CyclingStream(labeled, rngs["data"]),
        unlabeled=CyclingStream(unlabeled, rngs["data"]),
    )


@dataclass
class StepOutcome:
    """Loss breakdown and batch tally of one step."""

    iteration: int
    lr: float
    l_s: float
    l_cross: float
    l_c: float
    l_total: float
    n_labeled: int
    n_unlabeled: int
    n_degenerate: int

    def to_record(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "lr": self.lr,
            "l_s": self.l_s,
            "l_cross": self.l_cross,
            "l_c": self.l_c,
            "l_total": self.l_total,
            "n_labeled": self.n_labeled,
            "n_unlabeled": self.n_unlabeled,
            "n_degenerate": self.n_degenerate,
            "val_dsc": None,
        }


def _prompt_counts(config: RunConfig) -> tuple[int, int]:
    if config.ablation.vanilla_cps:
        return 0, 0
    return config.ablation.num_center_points, config.ablation.num_random_points


def _labeled_loss(
    model: ISegmenter,
    samples: list[ImageSample],
    config: RunConfig,
    prompt_rng: np.random.Generator,
) -> torch.Tensor:
    labels = stack_labels([sample.label for sample in samples if sample.label is not None])
    if labels.shape[0] != len(samples):
        raise InvalidInputError("every labeled batch sample needs a label map")
    n_center, n_random = _prompt_counts(config)
    from_ground_truth = config.loss.labeled_prompt_source is LabeledPromptSource.GROUND_TRUTH
    pred1, pred2 = forward_all(
        model,
        stack_images([sample.image for sample in samples]),
        prompt_rng,
        n_center,
        n_random,
        config.train.connectivity,
        reference_labels=labels.numpy() if from_ground_truth else None,
        single_branch=config.ablation.single_branch,
    )
    y = one_hot(labels, model.num_classes).to(pred1.p.dtype)
    if config.ablation.single_branch:
        return supervised_loss(pred1.p, None, pred1.p_center, None, pred1.p_random, [], y, config.loss)
    return supervised_loss(
        pred1.p,
        pred2.p,
        pred1.p_center,
        pred2.p_center,
        pred1.p_random,
        pred2.p_random,
        y,
        config.loss,
    )


def _pcr_terms(prediction: BranchPrediction, config: RunConfig) -> tuple[list[torch.Tensor], torch.Tensor]:
    """Maps pulled by the consistency term and the map they are pulled toward."""
    if config.loss.pcr_target is PcrTarget.CENTER and prediction.p_center is not None:
        return list(prediction.p_random), prediction.p_center
    pulled = list(prediction.p_random)
    if config.loss.pcr_on_center and prediction.p_center is not None:
        pulled.append(prediction.p_center)
    return pulled, prediction.p_ensemble


def _unlabeled_losses(
    model: ISegmenter,
    samples: list[ImageSample],
    config: RunConfig,
    prompt_rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, int]:
    n_center, n_random = _prompt_counts(config)
    pred1, pred2 = forward_all(
        model,
        stack_images([sample.image for sample in samples]),
        prompt_rng,
        n_center,
        n_random,
        config.train.connectivity,
        single_branch=config.ablation.single_branch,
    )
    zero = torch.zeros((), dtype=pred1.p.dtype)
    if config.ablation.vanilla_cps:
        # each unprompted map learns from the other branch's unprompted map
        return cross_prompting_loss(pred1.p, pred2.p, pred1.p, pred2.p, config=config.loss), zero, 0

    degenerate = pred1.degenerate | pred2.degenerate
    l_cross = cross_prompting_loss(pred1.p, pred2.p, pred1.p_ensemble, pred2.p_ensemble, degenerate, config.loss)
    if config.ablation.disable_pcr:
        return l_cross, zero, int(degenerate.sum())
    pulled1, target1 = _pcr_terms(pred1, config)
    pulled2, target2 = _pcr_terms(pred2, config)
    l_c = pcr_loss(pulled1, target1, pulled2, target2, degenerate, config.loss)
    return l_cross, l_c, int(degenerate.sum())


def train_step(
    model: ISegmenter,
    state: TrainState,
    batch: Batch,
    config: RunConfig,
    augmenter: Augmenter | None = None,
) -> StepOutcome:
    """One optimizer step on a composed batch.

    Labeled samples give L_s from unprompted and prompted outputs; unlabeled
    samples give L_cross and L_c from the cross-prompted forward pass. The
    total ``L_s + lambda1 * L_cross + lambda2 * L_c`` is minimized with the
    learning rate ``lr_schedule(state.iteration)``. Ablation flags:
    ``disable_unlabeled`` skips the unlabeled half, ``vanilla_cps`` crosses
    the unprompted maps directly, ``disable_pcr`` drops L_c, and
    ``single_branch`` lets decoder 1 prompt itself.

    Raises:
        NonFiniteLossError: If a loss term is NaN or infinite; its
            diagnostics carry the iteration, lr, and batch sample ids.
    """
    lr = lr_schedule(state.iteration, config.train)
    set_learning_rate(state.optimizer, lr)
    if isinstance(model, torch.nn.Module):
        model.train()

    augmentation_rng, prompt_rng = state.rngs["augmentation"], state.rngs["prompt"]
    if augmenter is not None:
        batch = Batch(
            labeled=[augmenter(sample, augmentation_rng) for sample in batch.labeled],
            unlabeled=[augmenter(sample, augmentation_rng) for sample in batch.unlabeled],
        )

    zero = torch.zeros(())
    l_s = _labeled_loss(model, batch.labeled, config, prompt_rng) if batch.labeled else zero
    l_cross, l_c, n_degenerate = zero, zero, 0
    if batch.unlabeled and not config.ablation.disable_unlabeled:
        l_cross, l_c, n_degenerate = _unlabeled_losses(model, batch.unlabeled, config, prompt_rng)

    try:
        loss = total_loss(l_s, l_cross, l_c, config.loss)
    except NonFiniteLossError as exc:
        exc.diagnostics.update(
            {
                "iteration": state.iteration,
                "lr": lr,
                "l_s": float(l_s.detach()),
                "l_cross": float(l_cross.detach()),
                "l_c": float(l_c.detach()),
                "sample_ids": batch.sample_ids,
            }
        )
        logger.error("Non-finite loss, aborting training", **exc.diagnostics)
        raise

    state.optimizer.zero_grad(set_to_none=True)
    if isinstance(loss, torch.Tensor) and loss.requires_grad:
        loss.backward()
        state.optimizer.step()

    outcome = StepOutcome(
        iteration=state.iteration,
        lr=lr,
        l_s=float(l_s.detach()),
        l_cross=float(l_cross.detach()),
        l_c=float(l_c.detach()),
        l_total=float(loss.detach()) if isinstance(loss, torch.Tensor) else float(loss),
        n_labeled=len(batch.labeled),
        n_unlabeled=len(batch.unlabeled),
        n_degenerate=n_degenerate,
    )
    state.iteration += 1
    return outcome


def iterations_per_epoch(n_samples: int, batch_size: int) -> int:
    return max(1, math.ceil(n_samples / batch_size))


def resolve_schedule(train: TrainConfig, n_samples: int) -> TrainConfig:
    """Express an epoch-based schedule in iterations; iteration schedules pass through."""
    if train.iteration_unit is IterationUnit.ITERATIONS:
        return train
    per_epoch = iterations_per_epoch(n_samples, train.batch_size)
    return train.model_copy(
        update={
            "total_iterations": train.total_iterations * per_epoch,
            "warmup_iterations": train.warmup_iterations * per_epoch,
            "iteration_unit": IterationUnit.ITERATIONS,
        }
    )


@dataclass
class TrainingData:
    """Preprocessed sample pools of one run."""

    labeled: list[ImageSample]
    unlabeled: list[ImageSample] = field(default_factory=list)
    val: list[ImageSample] = field(default_factory=list)


@dataclass
class TrainingResult:
    """What a finished run produced.

    Attributes:
        iterations: Completed optimizer steps.
        last_checkpoint: Checkpoint of the final state.
        best_checkpoint: Checkpoint with the best validation DSC (the final
            state when no validation ran).
        best_val_dsc: Best validation DSC, None when no validation ran.
        history: Every published log record of this invocation.
    """

    iterations: int
    last_checkpoint: Path
    best_checkpoint: Path
    best_val_dsc: float | None
    history: list[dict[str, Any]] = field(default_factory=list)


class TrainingService:
    """Runs semi-supervised training for one model and configuration.

    Args:
        model: Segmenter whose trainable parameters are optimized in place.
        config: Resolved run configuration.
        checkpoint_store: Writes checkpoint payloads.
        log_publisher: Receives one record per step.
        payload_builder: Builds a checkpoint payload from model, config, and train state.
        checkpoint_dir: Directory for best and last checkpoints.
        augmenter: Per-sample augmentation; None trains on raw samples.
        best_name: File name of the best-validation checkpoint.
        last_name: File name of the latest checkpoint.
    """

    def __init__(
        self,
        model: ISegmenter,
        config: RunConfig,
        checkpoint_store: ICheckpointStore,
        log_publisher: ITrainingLogPublisher,
        payload_builder: PayloadBuilder,
        checkpoint_dir: Path,
        augmenter: Augmenter | None = None,
        best_name: str = "best.pt",
        last_name: str = "last.pt",
    ) -> None:
        self._model = model
        self._config = config
        self._store = checkpoint_store
        self._log = log_publisher
        self._build_payload = payload_builder
        self._augmenter = augmenter
        self.best_path = Path(checkpoint_dir) / best_name
        self.last_path = Path(checkpoint_dir) / last_name

    def _save(self, path: Path, state: TrainState) -> Path:
        return self._store.save(path, self._build_payload(self._model, self._config, state.to_dict()))

    def _validate(self, samples: list[ImageSample]) -> float:
        if isinstance(self._model, torch.nn.Module):
            self._model.eval()
        return validation_dsc(self._model, samples, branch=scored_branch(self._config.ablation.single_branch))

    def run(self, data: TrainingData, resume_state: dict[str, Any] | None = None) -> TrainingResult:
        """Train for the configured number of iterations.

        Args:
            data: Labeled, unlabeled, and validation pools.
            resume_state: ``train_state`` of a checkpoint to continue from;
                the model must already hold that checkpoint's weights.

        Returns:
            The run summary.

        Raises:
            InvalidInputError: If the labeled pool is empty.
            NonFiniteLossError: Propagated from ``train_step``.
            CheckpointError: If a checkpoint cannot be written.
        """
        n_train = len(data.labeled) + len(data.unlabeled)
        schedule = resolve_schedule(self._config.train, n_train)
        config = self._config.model_copy(update={"train": schedule})
        state = new_train_state(self._model, config, data.labeled, data.unlabeled)
        if resume_state is not None:
            state.load_dict(resume_state)
            logger.info("Resuming training", iteration=state.iteration, best_val_dsc=state.best_val_dsc)

        total = schedule.total_iterations
        logger.info(
            "Training started",
            total_iterations=total,
            labeled=len(data.labeled),
            unlabeled=len(data.unlabeled),
            val=len(data.val),
            seed=config.seed,
        )
        expected = batch_counts(config)
        history: list[dict[str, Any]] = []
        validated = state.best_val_dsc is not None

        while state.iteration < total:
            batch = compose_batch(state.labeled, state.unlabeled, config)
            if (len(batch.labeled), len(batch.unlabeled)) != expected:
                raise InvalidInputError(f"batch tally {len(batch.labeled)}/{len(batch.unlabeled)} != {expected}")
            outcome = train_step(self._model, state, batch, config, self._augmenter)
            record = outcome.to_record()

            interval = schedule.val_interval
            if data.val and interval and (state.iteration % interval == 0 or state.iteration == total):
                val_dsc = self._validate(data.val)
                record["val_dsc"] = val_dsc
                validated = True
                logger.info("Validation complete", iteration=state.iteration, val_dsc=val_dsc, l_total=outcome.l_total)
                if state.best_val_dsc is None or val_dsc > state.best_val_dsc:
                    state.best_val_dsc, state.best_iteration = val_dsc, state.iteration
                    self._save(self.best_path, state)
                self._save(self.last_path, state)
            else:
                logger.debug("Training step complete", **record)

            self._log.publish(record)
            history.append(record)

        self._save(self.last_path, state)
        if not validated:
            self._save(self.best_path, state)
        logger.info(
            "Training complete",
            iterations=state.iteration,
            best_val_dsc=state.best_val_dsc,
            best_iteration=state.best_iteration,
        )
        return TrainingResult(
            iterations=state.iteration,
            last_checkpoint=self.last_path,
            best_checkpoint=self.best_path,
            best_val_dsc=state.best_val_dsc,
            history=history,
        )
