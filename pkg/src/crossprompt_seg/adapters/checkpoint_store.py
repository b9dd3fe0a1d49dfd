"""Checkpoint persistence.

One file per checkpoint, written with ``torch.save``:

    format          "crossprompt-seg-checkpoint"
    format_version  1
    model_config    ModelConfig as a dict
    lora_config     LoraConfig as a dict
    run_config      resolved RunConfig as a dict
    base_state      model state without LoRA factors
    lora_state      LoRA factors only (keys containing ``lora_``)
    train_state     iteration, optimizer, RNG streams, sampler, best score (optional)

Writes go to a temporary sibling and are renamed into place.
"""

import os
import pickle
from pathlib import Path
from typing import Any

import torch
from pydantic import ValidationError

from crossprompt_seg.adapters.lora import split_state_dict
from crossprompt_seg.adapters.toy_segmenter import ToySegmenter, build_toy_model
from crossprompt_seg.core.config import LoraConfig, ModelConfig, RunConfig
from crossprompt_seg.core.errors import CheckpointError, NotFoundError
from crossprompt_seg.observability import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT: str = "crossprompt-seg-checkpoint"
CHECKPOINT_FORMAT_VERSION: int = 1

_REQUIRED_KEYS: frozenset[str] = frozenset(
    {"format", "format_version", "model_config", "lora_config", "run_config", "base_state", "lora_state"}
)


class CheckpointStore:
    """Reads and writes checkpoint payloads on the local filesystem."""

    def save(self, path: Path, payload: dict[str, Any]) -> Path:
        """Write a payload atomically.

        Raises:
            CheckpointError: If the write fails.
        """
        path = Path(path)
        temporary = path.with_name(f".{path.name}.tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(payload, temporary)
            os.replace(temporary, path)
        except OSError as exc:
            raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc
        train_state = payload.get("train_state") or {}
        logger.info("Checkpoint saved", path=str(path), iteration=train_state.get("iteration"))
        return path

    def load(self, path: Path) -> dict[str, Any]:
        """Read and validate a payload.

        Raises:
            NotFoundError: If the file does not exist.
            CheckpointError: If it is unreadable or not a supported checkpoint.
        """
        path = Path(path)
        if not path.is_file():
            raise NotFoundError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
            raise CheckpointError(f"failed to read checkpoint {path}: {exc}") from exc

        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {payload.get('format_version')!r}; "
                f"expected {CHECKPOINT_FORMAT_VERSION}"
            )
        missing = _REQUIRED_KEYS - payload.keys()
        if missing:
            raise CheckpointError(f"checkpoint {path} is missing {sorted(missing)}")
        return payload


def build_payload(
    model: ToySegmenter,
    run_config: RunConfig,
    train_state: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """Assemble a checkpoint payload for a model and its run."""
    state = {key: value.detach().clone() for key, value in model.state_dict().items()}
    base_state, lora_state = split_state_dict(state)
    return {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.model_dump(mode="json"),
        "lora_config": run_config.lora.model_dump(mode="json"),
        "run_config": run_config.to_dict(),
        "base_state": base_state,
        "lora_state": lora_state,
        "train_state": train_state,
    }


def restore_model(payload: dict[str, Any]) -> ToySegmenter:
    """Rebuild the segmenter described by a payload and load its weights.

    Raises:
        CheckpointError: If the stored configs are invalid or the weights do not fit.
    """
    try:
        model_config = ModelConfig.model_validate(payload["model_config"])
        lora_config = LoraConfig.model_validate(payload["lora_config"])
    except ValidationError as exc:
        raise CheckpointError(f"checkpoint holds an invalid model config: {exc.errors()[0]['msg']}") from exc

    lora = lora_config if payload["lora_state"] else None
    model = build_toy_model(config=model_config, lora=lora)
    try:
        model.load_state_dict({**payload["base_state"], **payload["lora_state"]})
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint weights do not match the model: {exc}") from exc
    return model


def restore_run_config(payload: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(payload["run_config"])
    except ValidationError as exc:
        raise CheckpointError(f"checkpoint holds an invalid run config: {exc.errors()[0]['msg']}") from exc
