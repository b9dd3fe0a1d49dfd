"""Dependency factories for the CLI commands.

Commands stay thin: they parse flags and call these factories to build the
settings, run configuration, output layout, repositories, and services.
Concrete adapters are chosen here and nowhere else.
"""

from dataclasses import dataclass, replace
from functools import lru_cache, partial
from pathlib import Path
from typing import Any

import torch
import yaml

from crossprompt_seg.adapters.augmentation import augment
from crossprompt_seg.adapters.checkpoint_store import CheckpointStore, build_payload
from crossprompt_seg.adapters.manifest_repository import ManifestRepository
from crossprompt_seg.adapters.toy_segmenter import ToySegmenter
from crossprompt_seg.adapters.training_log import TrainingLogPublisher
from crossprompt_seg.core.config import RunConfig, TrainConfig, resolve_run_config
from crossprompt_seg.core.errors import ConfigError, GroundTruthRequiredError, NotFoundError
from crossprompt_seg.core.models import ImageSample
from crossprompt_seg.core.services.training_service import Augmenter, TrainingData, TrainingService
from crossprompt_seg.observability import configure_logging, get_logger
from crossprompt_seg.settings import Settings

logger = get_logger(__name__)


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()


def setup_process(settings: Settings) -> None:
    """Configure logging and torch execution once per command."""
    configure_logging(settings.log_level, settings.log_json)
    torch.set_num_threads(settings.torch_num_threads)
    if settings.deterministic:
        torch.use_deterministic_algorithms(True)


@dataclass(frozen=True)
class OutputLayout:
    """Fixed directory layout under an output root."""

    root: Path
    checkpoints: Path
    logs: Path
    reports: Path
    resolved_config: Path
    training_log: Path

    @classmethod
    def under(cls, root: Path, settings: Settings) -> "OutputLayout":
        return cls(
            root=root,
            checkpoints=root / settings.checkpoints_subdir,
            logs=root / settings.logs_subdir,
            reports=root / settings.reports_subdir,
            resolved_config=root / settings.resolved_config_name,
            training_log=root / settings.logs_subdir / settings.training_log_name,
        )

    def create(self) -> "OutputLayout":
        for directory in (self.checkpoints, self.logs, self.reports):
            directory.mkdir(parents=True, exist_ok=True)
        return self


def load_config_file(path: Path | None) -> dict[str, Any]:
    """Parse a YAML run file into nested sections.

    Raises:
        NotFoundError: If the file does not exist.
        ConfigError: If it is not a YAML mapping.
    """
    if path is None:
        return {}
    if not path.is_file():
        raise NotFoundError(f"config file not found: {path}")
    try:
        values = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a mapping of sections")
    return values


def resolve_config(
    file_values: dict[str, Any],
    flag_overrides: dict[str, Any],
    repository: ManifestRepository | None = None,
) -> RunConfig:
    """Resolve the run config; the manifest supplies num_classes when neither file nor flags do.

    Raises:
        ConfigError: On invalid values or a class count that disagrees with the manifest.
    """
    if repository is not None:
        from_file = file_values.get("model", {}).get("num_classes")
        from_flags = flag_overrides.get("model", {}).get("num_classes")
        if from_file is None and from_flags is None:
            file_values = {
                **file_values,
                "model": {**file_values.get("model", {}), "num_classes": repository.num_classes},
            }
    config = resolve_run_config(file_values, flag_overrides)
    if repository is not None and config.model.num_classes != repository.num_classes:
        raise ConfigError(
            f"model.num_classes={config.model.num_classes} but the manifest declares {repository.num_classes}",
            field="model.num_classes",
        )
    return config


def manifest_path_for(config_values: dict[str, Any], flag_overrides: dict[str, Any]) -> Path:
    path = flag_overrides.get("data", {}).get("manifest_path") or config_values.get("data", {}).get("manifest_path")
    if not path:
        raise ConfigError("no dataset manifest given; pass --manifest or set data.manifest_path", field="data")
    return Path(path)


def write_resolved_config(config: RunConfig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")
    logger.info("Resolved config written", path=str(path))
    return path


def make_augmenter(train: TrainConfig) -> Augmenter:
    return partial(augment, rotation_degrees=train.rotation_degrees, flip_probability=train.flip_probability)


def _require_labels(samples: list[ImageSample], split_name: str) -> None:
    missing = [sample.sample_id for sample in samples if sample.label is None]
    if missing:
        raise GroundTruthRequiredError(f"ground truth required: split '{split_name}' has unlabeled entries {missing}")


def load_training_data(repository: ManifestRepository, config: RunConfig) -> TrainingData:
    """Load the labeled, unlabeled, and validation pools at model resolution.

    Labels of unlabeled-split samples are dropped so they cannot leak into training.
    """
    resolution = config.model.input_resolution
    spacing = config.data.spacing
    labeled = repository.load_split("labeled", resolution, spacing)
    _require_labels(labeled, "labeled")
    unlabeled = [replace(sample, label=None) for sample in repository.load_split("unlabeled", resolution, spacing)]
    val = repository.load_split("val", resolution, spacing)
    _require_labels(val, "val")
    return TrainingData(labeled=labeled, unlabeled=unlabeled, val=val)


def build_training_service(
    model: ToySegmenter,
    config: RunConfig,
    layout: OutputLayout,
    settings: Settings,
    log_publisher: TrainingLogPublisher,
) -> TrainingService:
    return TrainingService(
        model=model,
        config=config,
        checkpoint_store=CheckpointStore(),
        log_publisher=log_publisher,
        payload_builder=build_payload,
        checkpoint_dir=layout.checkpoints,
        augmenter=make_augmenter(config.train),
        best_name=settings.best_checkpoint_name,
        last_name=settings.last_checkpoint_name,
    )


def dataset_fingerprint(repository: ManifestRepository) -> dict[str, Any]:
    """Split sizes recorded in report context."""
    return {
        **repository.manifest.counts(),
        "num_classes": repository.num_classes,
        "seed": repository.manifest.seed,
    }

