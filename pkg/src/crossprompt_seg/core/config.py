"""Run configuration schema.

A run is fully described by ``RunConfig``: training schedule, loss weights,
LoRA settings, toy-model shape, data paths, and ablation flags. The YAML run
file mirrors this schema section by section. Precedence when resolving a run
is CLI flag > config file > default (see ``resolve_run_config``).

The resolved config is serialized into every checkpoint and report.
"""

from enum import StrEnum
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from crossprompt_seg.core.errors import ConfigError

# Weight pairs must sum to 1.0 within this tolerance
_WEIGHT_SUM_TOLERANCE: float = 1e-9


class PseudoLabelMode(StrEnum):
    """How prediction-derived targets are formed."""

    HARD = "hard"
    SOFT = "soft"


class LabeledPromptSource(StrEnum):
    """Where the prompts for labeled-set prompted outputs come from."""

    GROUND_TRUTH = "ground_truth"
    PREDICTION = "prediction"


class PcrTarget(StrEnum):
    """Target of the prompt consistency term."""

    ENSEMBLE = "ensemble"
    CENTER = "center"


class IterationUnit(StrEnum):
    """Unit of ``TrainConfig.total_iterations`` and ``warmup_iterations``."""

    ITERATIONS = "iterations"
    EPOCHS = "epochs"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DiceCeWeights(_Section):
    """Dice / cross-entropy mixing weights for one loss family.

    Attributes:
        dice: Weight on the Dice term.
        ce: Weight on the cross-entropy term.
    """

    dice: float = Field(..., ge=0.0)
    ce: float = Field(..., ge=0.0)

    @model_validator(mode="after")
    def _weights_sum_to_one(self) -> "DiceCeWeights":
        if abs(self.dice + self.ce - 1.0) > _WEIGHT_SUM_TOLERANCE:
            raise ValueError(f"dice and ce weights must sum to 1.0, got {self.dice + self.ce!r}")
        return self


class LossConfig(_Section):
    """Scalar weights and switches for every loss family.

    Attributes:
        lambda1: Weight of the cross prompting term in the total loss.
        lambda2: Weight of the prompt consistency term in the total loss.
        supervised_unprompted: Mixing for unprompted labeled outputs.
        supervised_prompted: Mixing for prompted labeled outputs.
        unsupervised: Relative mixing inside each unsupervised bracket; the
            bracket equals ``2 * (dice_w * dice + ce_w * ce)`` so the default
            0.5/0.5 yields the plain ``dice + ce`` sum.
        dice_smooth: Dice smoothing epsilon.
        ce_clamp: Lower clamp for probabilities inside the log.
        pseudo_label: Hardened (argmax one-hot) or soft detached targets.
        labeled_prompt_source: Prompts for labeled prompted outputs.
        pcr_target: Consistency target, ensemble of prompted maps or center map.
        pcr_on_center: Also pull the center-prompted map toward the target.
    """

    lambda1: float = Field(0.4, ge=0.0)
    lambda2: float = Field(0.05, ge=0.0)
    supervised_unprompted: DiceCeWeights = DiceCeWeights(dice=0.8, ce=0.2)
    supervised_prompted: DiceCeWeights = DiceCeWeights(dice=0.5, ce=0.5)
    unsupervised: DiceCeWeights = DiceCeWeights(dice=0.5, ce=0.5)
    dice_smooth: float = Field(1e-5, gt=0.0)
    ce_clamp: float = Field(1e-7, gt=0.0, lt=1.0)
    pseudo_label: PseudoLabelMode = PseudoLabelMode.HARD
    labeled_prompt_source: LabeledPromptSource = LabeledPromptSource.GROUND_TRUTH
    pcr_target: PcrTarget = PcrTarget.ENSEMBLE
    pcr_on_center: bool = False


class LoraConfig(_Section):
    """Low-rank adaptation settings for the image encoder.

    Attributes:
        rank: Rank r of each factor pair.
        alpha: Scaling numerator; the low-rank path is scaled by alpha / rank.
        init_std: Standard deviation of the Gaussian init of factor A.
        targets: Attention projections that receive a low-rank path.
        seed: Seed for factor A initialization.
    """

    rank: int = Field(4, gt=0)
    alpha: float = Field(4.0, gt=0.0)
    init_std: float = Field(0.01, gt=0.0)
    targets: tuple[str, ...] = ("query", "value")
    seed: int = 0

    @field_validator("targets")
    @classmethod
    def _known_targets(cls, value: tuple[str, ...]) -> tuple[str, ...]:
        unknown = set(value) - {"query", "key", "value", "output"}
        if unknown or not value:
            raise ValueError(f"targets must be a non-empty subset of query/key/value/output, got {value!r}")
        return value

    @property
    def scaling(self) -> float:
        """Multiplier applied to the low-rank path."""
        return self.alpha / self.rank


class ModelConfig(_Section):
    """Shape of the toy reference segmenter.

    Attributes:
        num_classes: Number of classes C including background.
        input_resolution: Square input side in pixels.
        patch_size: Patch side; a power of two dividing input_resolution.
        embed_dim: Token width of encoder, prompt encoder, and decoders.
        depth: Number of attention blocks in the encoder.
        num_heads: Attention heads per block.
        in_channels: Channels the encoder expects; grayscale is replicated.
        seed: Initialization seed.
    """

    num_classes: int = Field(2, ge=2)
    input_resolution: int = Field(64, gt=0)
    patch_size: int = Field(8, gt=0)
    embed_dim: int = Field(32, gt=0)
    depth: int = Field(2, ge=1)
    num_heads: int = Field(2, ge=1)
    in_channels: int = Field(3, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _patching_is_consistent(self) -> "ModelConfig":
        if self.patch_size & (self.patch_size - 1):
            raise ValueError(f"patch_size must be a power of two, got {self.patch_size}")
        if self.input_resolution % self.patch_size:
            raise ValueError(
                f"input_resolution {self.input_resolution} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads or self.embed_dim % 2:
            raise ValueError("embed_dim must be even and divisible by num_heads")
        return self


class TrainConfig(_Section):
    """Optimization schedule and batch composition.

    Attributes:
        total_iterations: Number of optimizer steps (or epochs, see iteration_unit).
        warmup_iterations: Linear warmup length in the same unit.
        max_lr: Peak learning rate reached at the end of warmup.
        final_lr_ratio: lr(total) / max_lr; sets the exponential decay constant.
        weight_decay: Decoupled weight decay of the AdamW optimizer.
        betas: AdamW moment coefficients.
        batch_size: Samples per step.
        labeled_fraction: Share of labeled samples in a batch.
        rotation_degrees: Rotation augmentation range (+/-).
        flip_probability: Probability of each of the horizontal and vertical flips.
        val_interval: Validate every this many iterations (0 disables).
        connectivity: Pixel connectivity for component analysis (4 or 8).
        iteration_unit: Unit of total/warmup counts.
    """

    total_iterations: int = Field(10000, ge=0)
    warmup_iterations: int = Field(5000, ge=0)
    max_lr: float = Field(0.001, gt=0.0)
    final_lr_ratio: float = Field(0.01, gt=0.0, le=1.0)
    weight_decay: float = Field(0.01, ge=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = Field(6, ge=1)
    labeled_fraction: float = Field(0.5, ge=0.0, le=1.0)
    rotation_degrees: float = Field(20.0, ge=0.0, le=180.0)
    flip_probability: float = Field(0.5, ge=0.0, le=1.0)
    val_interval: int = Field(200, ge=0)
    connectivity: int = 8
    iteration_unit: IterationUnit = IterationUnit.ITERATIONS

    @field_validator("connectivity")
    @classmethod
    def _valid_connectivity(cls, value: int) -> int:
        if value not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {value}")
        return value

    @model_validator(mode="after")
    def _schedule_is_consistent(self) -> "TrainConfig":
        if self.warmup_iterations > self.total_iterations:
            raise ValueError(
                f"warmup_iterations ({self.warmup_iterations}) exceeds total_iterations ({self.total_iterations})"
            )
        if self.labeled_fraction == 0.5 and self.batch_size % 2:
            raise ValueError(f"batch_size must be even when labeled_fraction is 0.5, got {self.batch_size}")
        return self


class AblationFlags(_Section):
    """Component toggles for ablation runs.

    Attributes:
        disable_unlabeled: Train on labeled data only.
        vanilla_cps: Unprompted outputs cross-supervise each other directly.
        disable_pcr: Drop the prompt consistency term.
        single_branch: One decoder supervises itself through its own prompts.
        num_center_points: Center prompts per class (0 or 1).
        num_random_points: Random prompts per class.
    """

    disable_unlabeled: bool = False
    vanilla_cps: bool = False
    disable_pcr: bool = False
    single_branch: bool = False
    num_center_points: int = Field(1, ge=0, le=1)
    num_random_points: int = Field(1, ge=0)


class DataConfig(_Section):
    """Dataset location.

    Attributes:
        manifest_path: Path to the dataset manifest JSON.
        spacing: Default physical pixel size when entries carry none.
    """

    manifest_path: str | None = None
    spacing: tuple[float, float] = (1.0, 1.0)


class RunConfig(_Section):
    """Merged view of every configuration section for one run."""

    seed: int = 0
    train: TrainConfig = TrainConfig()
    loss: LossConfig = LossConfig()
    lora: LoraConfig = LoraConfig()
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    ablation: AblationFlags = AblationFlags()

    @model_validator(mode="after")
    def _prompting_is_consistent(self) -> "RunConfig":
        flags = self.ablation
        prompted = flags.num_center_points + flags.num_random_points
        if prompted == 0 and not (flags.vanilla_cps or flags.disable_unlabeled):
            raise ValueError("at least one center or random point is required unless vanilla_cps or disable_unlabeled")
        if self.loss.pcr_target is PcrTarget.CENTER and flags.num_center_points == 0 and not flags.disable_pcr:
            raise ValueError("pcr_target 'center' needs num_center_points = 1")
        return self

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON/YAML-safe dict of the resolved configuration."""
        return self.model_dump(mode="json")


def _deep_merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_run_config(
    file_values: dict[str, Any] | None = None,
    flag_overrides: dict[str, Any] | None = None,
) -> RunConfig:
    """Build a validated RunConfig with CLI flag > file > default precedence.

    Args:
        file_values: Parsed run file contents (nested sections).
        flag_overrides: Nested overrides from CLI flags; ``None`` leaves are ignored.

    Returns:
        The validated run configuration.

    Raises:
        ConfigError: If the merged values fail validation; the message names the field.
    """
    overrides = _drop_none(flag_overrides or {})
    merged = _deep_merge(file_values or {}, overrides)
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"Invalid value for '{field}': {first['msg']}", field=field) from exc


def _drop_none(values: dict[str, Any]) -> dict[str, Any]:
    cleaned: dict[str, Any] = {}
    for key, value in values.items():
        if isinstance(value, dict):
            nested = _drop_none(value)
            if nested:
                cleaned[key] = nested
        elif value is not None:
            cleaned[key] = value
    return cleaned
