"""Command-line interface: train, eval, prompts, synth.

All commands are thin: they parse flags, build dependencies through
``cli.dependencies``, delegate to services and adapters, and print a JSON
result on stdout. Logs go to stderr.

Exit codes: 0 success, 1 runtime failure, 2 usage error (invalid config,
missing file, invalid manifest, missing ground truth, ambiguous input).

Output layout under ``--out-dir``:
    resolved_config.yaml
    checkpoints/{best,last}.pt
    logs/train_log.ndjson
    reports/eval_<split>_<mode>_<branch>.{json,txt}
"""

import json
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import numpy as np
import torch
import typer

from crossprompt_seg import __version__
from crossprompt_seg.adapters.checkpoint_store import CheckpointStore, restore_model, restore_run_config
from crossprompt_seg.adapters.manifest_repository import ManifestRepository, preprocess, read_image, read_label
from crossprompt_seg.adapters.overlay import write_overlay
from crossprompt_seg.adapters.report_generator import ReportWriter, format_summary_table
from crossprompt_seg.adapters.synthetic_generator import generate_synthetic
from crossprompt_seg.adapters.toy_segmenter import build_toy_model
from crossprompt_seg.adapters.training_log import TrainingLogPublisher
from crossprompt_seg.cli.dependencies import (
    OutputLayout,
    build_training_service,
    dataset_fingerprint,
    get_settings,
    load_config_file,
    load_training_data,
    manifest_path_for,
    resolve_config,
    setup_process,
    write_resolved_config,
)
from crossprompt_seg.core.config import ModelConfig
from crossprompt_seg.core.errors import (
    USAGE_ERROR_CODES,
    ConfigError,
    CrossPromptError,
    GroundTruthRequiredError,
    NonFiniteLossError,
)
from crossprompt_seg.core.interfaces import IReportWriter
from crossprompt_seg.core.metrics import grand_means, summarize
from crossprompt_seg.core.models import ImageSample, PromptMode
from crossprompt_seg.core.prompt_geometry import DEFAULT_CONNECTIVITY, extract_prompts, prompts_from_label_map
from crossprompt_seg.core.services.evaluation_service import (
    EvaluationBranch,
    EvaluationMode,
    EvaluationService,
    evaluation_context,
    scored_branch,
)
from crossprompt_seg.observability import get_logger

logger = get_logger(__name__)

EXIT_OK: int = 0
EXIT_RUNTIME: int = 1
EXIT_USAGE: int = 2

# Label PNGs given to ``prompts --mask`` may use any non-negative class value
_MAX_MASK_CLASS: int = np.iinfo(np.int32).max

app = typer.Typer(add_completion=False, help="Semi-supervised promptable segmentation with cross prompting.")


def exit_code_for(error: CrossPromptError) -> int:
    return EXIT_USAGE if error.error_code in USAGE_ERROR_CODES else EXIT_RUNTIME


@contextmanager
def command_errors(command: str) -> Iterator[None]:
    """Translate domain errors into a stderr message and the matching exit code."""
    try:
        yield
    except CrossPromptError as exc:
        code = exit_code_for(exc)
        logger.error("Command failed", command=command, error_code=exc.error_code.value, exit_code=code)
        typer.echo(f"error: {exc.message}", err=True)
        if isinstance(exc, NonFiniteLossError):
            typer.echo(json.dumps(exc.diagnostics, default=str), err=True)
        raise typer.Exit(code) from exc


def _echo_json(payload: dict[str, Any]) -> None:
    typer.echo(json.dumps(payload, indent=2, default=str))


@app.callback()
def main(
    log_level: str | None = typer.Option(None, "--log-level", help="DEBUG, INFO, WARNING or ERROR."),
    log_json: bool | None = typer.Option(None, "--log-json/--log-console", help="Render logs as JSON lines."),
) -> None:
    """crossprompt-seg command-line interface."""
    settings = get_settings()
    updates = {key: value for key, value in {"log_level": log_level, "log_json": log_json}.items() if value is not None}
    setup_process(settings.model_copy(update=updates))


@app.command()
def train(
    config: Path | None = typer.Option(None, "--config", help="YAML run file."),
    out_dir: Path | None = typer.Option(None, "--out-dir", help="Output root (default from settings)."),
    manifest: Path | None = typer.Option(None, "--manifest", help="Dataset manifest; overrides data.manifest_path."),
    resume: Path | None = typer.Option(None, "--resume", help="Checkpoint to continue training from."),
    seed: int | None = typer.Option(None, "--seed", help="Seeds data, augmentation, prompts, and model init."),
    total_iterations: int | None = typer.Option(None, "--total-iterations"),
    warmup_iterations: int | None = typer.Option(None, "--warmup-iterations"),
    iteration_unit: str | None = typer.Option(None, "--iteration-unit", help="iterations or epochs."),
    max_lr: float | None = typer.Option(None, "--max-lr"),
    batch_size: int | None = typer.Option(None, "--batch-size"),
    labeled_fraction: float | None = typer.Option(None, "--labeled-fraction"),
    val_interval: int | None = typer.Option(None, "--val-interval"),
    lambda1: float | None = typer.Option(None, "--lambda1", help="Weight of the cross prompting loss."),
    lambda2: float | None = typer.Option(None, "--lambda2", help="Weight of the prompt consistency loss."),
    pseudo_label: str | None = typer.Option(None, "--pseudo-label", help="hard or soft."),
    pcr_target: str | None = typer.Option(None, "--pcr-target", help="ensemble or center."),
    labeled_prompt_source: str | None = typer.Option(None, "--labeled-prompt-source"),
    lora_rank: int | None = typer.Option(None, "--lora-rank"),
    num_classes: int | None = typer.Option(None, "--num-classes"),
    input_resolution: int | None = typer.Option(None, "--input-resolution"),
    vanilla_cps: bool | None = typer.Option(None, "--vanilla-cps/--no-vanilla-cps"),
    disable_pcr: bool | None = typer.Option(None, "--disable-pcr/--no-disable-pcr"),
    disable_unlabeled: bool | None = typer.Option(None, "--disable-unlabeled/--no-disable-unlabeled"),
    single_branch: bool | None = typer.Option(None, "--single-branch/--no-single-branch"),
    num_center_points: int | None = typer.Option(None, "--num-center-points"),
    num_random_points: int | None = typer.Option(None, "--num-random-points"),
) -> None:
    """Train a segmenter with cross prompting and prompt consistency regularization."""
    settings = get_settings()
    with command_errors("train"):
        store = CheckpointStore()
        resume_payload = store.load(resume) if resume is not None else None
        if config is not None or resume_payload is None:
            file_values = load_config_file(config)
        else:
            file_values = resume_payload["run_config"]

        overrides: dict[str, Any] = {
            "seed": seed,
            "train": {
                "total_iterations": total_iterations,
                "warmup_iterations": warmup_iterations,
                "iteration_unit": iteration_unit,
                "max_lr": max_lr,
                "batch_size": batch_size,
                "labeled_fraction": labeled_fraction,
                "val_interval": val_interval,
            },
            "loss": {
                "lambda1": lambda1,
                "lambda2": lambda2,
                "pseudo_label": pseudo_label,
                "pcr_target": pcr_target,
                "labeled_prompt_source": labeled_prompt_source,
            },
            "lora": {"rank": lora_rank, "seed": seed},
            "model": {"num_classes": num_classes, "input_resolution": input_resolution, "seed": seed},
            "data": {"manifest_path": str(manifest) if manifest is not None else None},
            "ablation": {
                "vanilla_cps": vanilla_cps,
                "disable_pcr": disable_pcr,
                "disable_unlabeled": disable_unlabeled,
                "single_branch": single_branch,
                "num_center_points": num_center_points,
                "num_random_points": num_random_points,
            },
        }
        repository = ManifestRepository(manifest_path_for(file_values, overrides))
        run_config = resolve_config(file_values, overrides, repository)

        resume_state = None
        if resume_payload is not None:
            if ModelConfig.model_validate(resume_payload["model_config"]) != run_config.model:
                raise ConfigError("the model section differs from the checkpoint being resumed", field="model")
            model = restore_model(resume_payload)
            resume_state = resume_payload.get("train_state")
        else:
            model = build_toy_model(config=run_config.model, lora=run_config.lora)

        layout = OutputLayout.under(out_dir or Path(settings.out_dir), settings).create()
        write_resolved_config(run_config, layout.resolved_config)
        data = load_training_data(repository, run_config)

        keep_before = resume_state["iteration"] if resume_state else None
        with TrainingLogPublisher(layout.training_log, keep_before=keep_before) as log_publisher:
            service = build_training_service(model, run_config, layout, settings, log_publisher)
            result = service.run(data, resume_state)

        _echo_json(
            {
                "iterations": result.iterations,
                "best_val_dsc": result.best_val_dsc,
                "best_checkpoint": str(result.best_checkpoint),
                "last_checkpoint": str(result.last_checkpoint),
                "training_log": str(layout.training_log),
                "resolved_config": str(layout.resolved_config),
            }
        )


@app.command("eval")
def evaluate(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint written by train."),
    manifest: Path = typer.Option(..., "--manifest", help="Dataset manifest."),
    split: str = typer.Option("test", "--split", help="labeled, unlabeled, val or test."),
    mode: EvaluationMode = typer.Option(EvaluationMode.UNPROMPTED, "--mode"),
    branch: list[EvaluationBranch] | None = typer.Option(
        None, "--branch", help="Repeatable. Default d1 for single-branch runs, otherwise ensemble."
    ),
    out_dir: Path | None = typer.Option(None, "--out-dir", help="Output root (default from settings)."),
) -> None:
    """Score a checkpoint on a manifest split and write metric reports."""
    settings = get_settings()
    with command_errors("eval"):
        payload = CheckpointStore().load(checkpoint)
        model = restore_model(payload)
        model.eval()
        run_config = restore_run_config(payload)
        repository = ManifestRepository(manifest)
        if repository.num_classes != model.num_classes:
            raise ConfigError(
                f"checkpoint predicts {model.num_classes} classes but the manifest declares {repository.num_classes}",
                field="manifest",
            )

        entries = repository.manifest.entries_for(split)
        if not entries:
            raise ConfigError(f"split '{split}' is empty", field="split")
        unlabeled = [entry.id for entry in entries if entry.label_path is None]
        if unlabeled:
            raise GroundTruthRequiredError(f"ground truth required: split '{split}' has unlabeled entries {unlabeled}")

        by_id = {entry.id: entry for entry in entries}

        def load(sample_id: str) -> ImageSample:
            return repository.load_entry(by_id[sample_id], model.input_resolution, run_config.data.spacing)

        service = EvaluationService(model, connectivity=run_config.train.connectivity)
        branches = branch or [scored_branch(run_config.ablation.single_branch)]
        result = service.evaluate_dataset(list(by_id), load, mode, branches)
        if result.failures and not any(result.records.values()):
            raise CrossPromptError(f"every sample of split '{split}' failed to evaluate")

        layout = OutputLayout.under(out_dir or Path(settings.out_dir), settings).create()
        writer: IReportWriter = ReportWriter()
        reports: dict[str, Any] = {}
        for branch_name, records in result.records.items():
            context = evaluation_context(
                version=__version__,
                checkpoint=str(checkpoint),
                manifest=str(manifest),
                dataset=dataset_fingerprint(repository),
                split=split,
                mode=mode.value,
                branch=branch_name,
                failures=result.failures,
                run_config=run_config.to_dict(),
            )
            path = writer.write(layout.reports / f"eval_{split}_{mode.value}_{branch_name}.json", records, context)
            summaries = summarize(records)
            typer.echo(format_summary_table(summaries), err=True)
            reports[branch_name] = {"report": str(path), "grand_mean": grand_means(summaries)}
        _echo_json({"split": split, "mode": mode.value, "failures": len(result.failures), "reports": reports})


@app.command()
def prompts(
    image: Path | None = typer.Option(None, "--image", help="Image to segment (checkpoint source) or to draw on."),
    mask: Path | None = typer.Option(None, "--mask", help="Integer label PNG to extract prompts from."),
    checkpoint: Path | None = typer.Option(None, "--checkpoint", help="Model whose prediction yields prompts."),
    mode: list[PromptMode] = typer.Option([PromptMode.CENTER, PromptMode.RANDOM], "--mode", help="Repeatable."),
    seed: int = typer.Option(0, "--seed"),
    connectivity: int = typer.Option(DEFAULT_CONNECTIVITY, "--connectivity", help="4 or 8."),
    branch: int = typer.Option(1, "--branch", help="Decoder whose prediction is used (checkpoint source)."),
    num_classes: int | None = typer.Option(None, "--num-classes", help="Classes in the mask; default max label + 1."),
    overlay: Path | None = typer.Option(None, "--overlay", help="Write a PNG with the prompts drawn."),
) -> None:
    """Extract point prompts from a label mask or a model prediction and print them as JSON."""
    with command_errors("prompts"):
        if (mask is None) == (checkpoint is None):
            raise ConfigError("ambiguous prompt source: pass exactly one of --mask or --checkpoint", field="source")
        if connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}", field="connectivity")

        if mask is not None:
            label = read_label(mask, _MAX_MASK_CLASS)
            classes = num_classes or max(2, int(label.max(initial=0)) + 1)
            if label.size and int(label.max()) >= classes:
                raise ConfigError(f"mask holds class {int(label.max())} but --num-classes is {classes}")
            prompt_set = prompts_from_label_map(label, classes, mode, seed, connectivity)
            base: np.ndarray = label
            if image is not None:
                base = preprocess(ImageSample("image", read_image(image)), label.shape).image
            source = "mask"
        else:
            if image is None:
                raise ConfigError("--checkpoint needs --image", field="image")
            model = restore_model(CheckpointStore().load(checkpoint))
            model.eval()
            sample = preprocess(ImageSample("image", read_image(image)), model.input_resolution)
            with torch.no_grad():
                images = torch.from_numpy(sample.image)[None, None]
                embedding = model.encode(images)
                default = model.prompt_encode([None], 1)
                prob = model.decode(branch, embedding, default)[0].numpy()
            prompt_set = extract_prompts(prob, mode, seed, connectivity, source_branch=branch)
            base = sample.image
            source = "checkpoint"

        if overlay is not None:
            write_overlay(base, prompt_set, overlay)
        height, width = int(base.shape[0]), int(base.shape[1])
        _echo_json({"source": source, "height": height, "width": width, **prompt_set.to_dict()})


@app.command()
def synth(
    out_dir: Path = typer.Option(..., "--out-dir", help="Dataset directory."),
    n: int = typer.Option(20, "--n", help="Number of image/label pairs."),
    resolution: int = typer.Option(64, "--resolution"),
    classes: int = typer.Option(2, "--classes", help="Classes including background."),
    seed: int = typer.Option(0, "--seed"),
    n_labeled: int | None = typer.Option(None, "--n-labeled", help="Labeled training samples."),
    val_frac: float = typer.Option(0.1, "--val-frac"),
    test_frac: float = typer.Option(0.1, "--test-frac"),
    force: bool = typer.Option(False, "--force", help="Replace a non-empty out-dir."),
) -> None:
    """Generate a synthetic shape dataset with a manifest."""
    with command_errors("synth"):
        dataset = generate_synthetic(
            n_samples=n,
            resolution=resolution,
            num_classes=classes,
            seed=seed,
            out_dir=out_dir,
            n_labeled=n_labeled,
            val_frac=val_frac,
            test_frac=test_frac,
            force=force,
        )
        _echo_json({"manifest": str(dataset.manifest_path), "counts": dataset.manifest.counts()})
