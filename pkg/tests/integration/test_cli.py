"""End-to-end tests for the crossprompt-seg command line.

Runs the real commands through typer's CliRunner on a tiny synthetic
dataset: synth -> train -> eval, resume, prompt extraction, and the exit
codes for usage errors.
"""

import json
from pathlib import Path
from typing import Any

import numpy as np
import pytest
import torch
import yaml
from PIL import Image
from pytest_mock import MockerFixture
from typer.testing import CliRunner, Result

from crossprompt_seg.adapters.checkpoint_store import CheckpointStore
from crossprompt_seg.adapters.report_generator import validate_report
from crossprompt_seg.adapters.training_log import read_training_log
from crossprompt_seg.cli.app import EXIT_OK, EXIT_USAGE, app
from crossprompt_seg.core.losses import one_hot
from crossprompt_seg.core.models import PromptEmbedding, PromptSet

# ---------------------------------------------------------------------------
# Shared constants
# ---------------------------------------------------------------------------

_TINY_RUN = {
    "seed": 0,
    "model": {"input_resolution": 32, "patch_size": 8, "embed_dim": 16, "depth": 2, "num_heads": 2},
    "train": {"total_iterations": 10, "warmup_iterations": 2, "batch_size": 4, "val_interval": 5},
}


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def invoke(*args: str) -> Result:
    return CliRunner().invoke(app, ["--log-level", "WARNING", *args])


def json_output(result: Result) -> dict[str, Any]:
    """Decode the JSON document a command printed last; log lines may surround it."""
    lines = result.output.splitlines()
    start = max(index for index, line in enumerate(lines) if line == "{")
    document, _ = json.JSONDecoder().raw_decode("\n".join(lines[start:]))
    assert isinstance(document, dict)
    return document


class CornerSquareSegmenter:
    """Predicts class 1 on a fixed 6x6 corner square whatever the image."""

    num_classes = 2
    input_resolution = 32

    def eval(self) -> "CornerSquareSegmenter":
        return self

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return images

    def prompt_encode(self, prompts: list[PromptSet | None], batch_size: int) -> PromptEmbedding:
        return PromptEmbedding(
            sparse=torch.zeros(batch_size, 1, 1),
            sparse_valid=torch.ones(batch_size, 1, dtype=torch.bool),
            dense=torch.zeros(batch_size, 1, 1, 1),
        )

    def decode(self, branch_id: int, image_embedding: torch.Tensor, prompt_embedding: PromptEmbedding) -> torch.Tensor:
        labels = torch.zeros(image_embedding.shape[0], 32, 32, dtype=torch.long)
        labels[:, :6, :6] = 1
        return one_hot(labels, self.num_classes)


def rewrite_checkpoint(source: str, target: Path, **sections: dict[str, Any]) -> str:
    """Copy a checkpoint with some run-config sections updated."""
    store = CheckpointStore()
    payload = store.load(Path(source))
    for section, values in sections.items():
        payload["run_config"][section].update(values)
    return str(store.save(target, payload))


def eval_report(checkpoint: str, dataset: Path, out_dir: Path, *options: str) -> dict[str, Any]:
    """Run eval on the test split and return the printed summary."""
    result = invoke(
        "eval", "--checkpoint", checkpoint, "--manifest", str(dataset), "--out-dir", str(out_dir), *options
    )
    assert result.exit_code == EXIT_OK, result.output
    return json_output(result)


def report_records(output: dict[str, Any], branch: str) -> list[dict[str, Any]]:
    document = json.loads(Path(output["reports"][branch]["report"]).read_text(encoding="utf-8"))
    records: list[dict[str, Any]] = document["records"]
    return records


@pytest.fixture()
def dataset(tmp_path: Path) -> Path:
    """Manifest of a 12-sample 32x32 synthetic dataset written by the synth command."""
    result = invoke(
        "synth",
        "--out-dir",
        str(tmp_path / "data"),
        "--n",
        "12",
        "--resolution",
        "32",
        "--classes",
        "2",
        "--n-labeled",
        "2",
    )
    assert result.exit_code == EXIT_OK, result.output
    return Path(json_output(result)["manifest"])


@pytest.fixture()
def run_file(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(_TINY_RUN), encoding="utf-8")
    return path


@pytest.fixture()
def trained(dataset: Path, run_file: Path, tmp_path: Path) -> dict[str, Any]:
    """Output of a ten-iteration training run."""
    result = invoke(
        "train",
        "--config",
        str(run_file),
        "--manifest",
        str(dataset),
        "--out-dir",
        str(tmp_path / "run"),
    )
    assert result.exit_code == EXIT_OK, result.output
    return json_output(result)


# ---------------------------------------------------------------------------
# Happy path
# ---------------------------------------------------------------------------


class TestSynthTrainEval:
    """The full pipeline on synthetic data."""

    def test_synth_counts(self, tmp_path: Path) -> None:
        """synth reports split sizes that add up to --n."""
        result = invoke("synth", "--out-dir", str(tmp_path / "d"), "--n", "12", "--resolution", "32")
        assert result.exit_code == EXIT_OK, result.output
        counts = json_output(result)["counts"]
        assert sum(counts.values()) == 12
        assert (tmp_path / "d" / "manifest.json").is_file()

    def test_train_writes_layout(self, trained: dict[str, Any], tmp_path: Path) -> None:
        """Training writes both checkpoints, a log line per iteration, and the resolved config."""
        assert trained["iterations"] == 10
        assert Path(trained["best_checkpoint"]).is_file()
        assert Path(trained["last_checkpoint"]).is_file()
        records = read_training_log(Path(trained["training_log"]))
        assert [record["iteration"] for record in records] == list(range(10))
        resolved = yaml.safe_load(Path(trained["resolved_config"]).read_text(encoding="utf-8"))
        assert resolved["model"]["num_classes"] == 2
        assert resolved["train"]["total_iterations"] == 10

    def test_eval_writes_reports(self, trained: dict[str, Any], dataset: Path, tmp_path: Path) -> None:
        """eval scores the test split for each requested branch."""
        result = invoke(
            "eval",
            "--checkpoint",
            trained["best_checkpoint"],
            "--manifest",
            str(dataset),
            "--split",
            "test",
            "--branch",
            "ensemble",
            "--branch",
            "d1",
            "--out-dir",
            str(tmp_path / "run"),
        )
        assert result.exit_code == EXIT_OK, result.output
        output = json_output(result)
        assert set(output["reports"]) == {"ensemble", "d1"}
        report = json.loads(Path(output["reports"]["ensemble"]["report"]).read_text(encoding="utf-8"))
        validate_report(report)
        assert report["context"]["split"] == "test"
        assert {record["class"] for record in report["records"]} == {1}
        assert 0.0 <= output["reports"]["ensemble"]["grand_mean"]["dsc"] <= 100.0

    def test_eval_gt_prompt_mode(self, trained: dict[str, Any], dataset: Path, tmp_path: Path) -> None:
        """Ground-truth-prompted evaluation names its mode in the report file."""
        result = invoke(
            "eval",
            "--checkpoint",
            trained["last_checkpoint"],
            "--manifest",
            str(dataset),
            "--mode",
            "gt_prompt",
            "--out-dir",
            str(tmp_path / "run"),
        )
        assert result.exit_code == EXIT_OK, result.output
        assert (tmp_path / "run" / "reports" / "eval_test_gt_prompt_ensemble.json").is_file()

    def test_single_branch_checkpoint_defaults_to_d1(
        self, trained: dict[str, Any], dataset: Path, tmp_path: Path
    ) -> None:
        """Without --branch, a single-branch run is scored on decoder 1 and a dual-branch run on the ensemble."""
        single_branch = {"single_branch": True}
        single = rewrite_checkpoint(trained["best_checkpoint"], tmp_path / "single.pt", ablation=single_branch)
        assert set(eval_report(single, dataset, tmp_path / "single")["reports"]) == {"d1"}
        assert set(eval_report(trained["best_checkpoint"], dataset, tmp_path / "dual")["reports"]) == {"ensemble"}

    def test_eval_applies_run_spacing(
        self, trained: dict[str, Any], dataset: Path, tmp_path: Path, mocker: MockerFixture
    ) -> None:
        """data.spacing of (2, 2) doubles HD95 and ASD for entries without their own spacing."""
        mocker.patch("crossprompt_seg.cli.app.restore_model", return_value=CornerSquareSegmenter())
        spaced = rewrite_checkpoint(trained["best_checkpoint"], tmp_path / "spaced.pt", data={"spacing": [2.0, 2.0]})
        pixel_output = eval_report(trained["best_checkpoint"], dataset, tmp_path / "pixel")
        spaced_output = eval_report(spaced, dataset, tmp_path / "spaced")

        pixel_records = report_records(pixel_output, "ensemble")
        spaced_records = report_records(spaced_output, "ensemble")
        assert any(record["hd95"] for record in pixel_records)
        for pixel, spaced_record in zip(pixel_records, spaced_records, strict=True):
            assert spaced_record["dsc"] == pixel["dsc"]
            for metric in ("hd95", "asd"):
                if pixel[metric] is None:
                    assert spaced_record[metric] is None
                else:
                    assert spaced_record[metric] == pytest.approx(2 * pixel[metric])

    def test_resume_continues_log(self, trained: dict[str, Any], dataset: Path, tmp_path: Path) -> None:
        """Resuming from last.pt with a longer schedule appends to the training log."""
        result = invoke(
            "train",
            "--resume",
            trained["last_checkpoint"],
            "--manifest",
            str(dataset),
            "--total-iterations",
            "12",
            "--out-dir",
            str(tmp_path / "run"),
        )
        assert result.exit_code == EXIT_OK, result.output
        assert json_output(result)["iterations"] == 12
        records = read_training_log(Path(trained["training_log"]))
        assert [record["iteration"] for record in records] == list(range(12))


class TestPrompts:
    """Prompt extraction from masks and checkpoints."""

    def test_mask_source_with_overlay(self, tmp_path: Path) -> None:
        """Center and random prompts of a square fall inside it; the overlay matches the mask size."""
        label = np.zeros((40, 40), dtype=np.uint8)
        label[10:20, 12:24] = 1
        mask_path = tmp_path / "mask.png"
        Image.fromarray(label).save(mask_path)
        overlay_path = tmp_path / "overlay.png"

        result = invoke("prompts", "--mask", str(mask_path), "--seed", "3", "--overlay", str(overlay_path))
        assert result.exit_code == EXIT_OK, result.output
        output = json_output(result)
        assert output["source"] == "mask"
        assert [point["mode"] for point in output["points"]] == ["center", "random"]
        for point in output["points"]:
            assert point["class_id"] == 1
            assert 10 <= point["row"] < 20 and 12 <= point["col"] < 24
        with Image.open(overlay_path) as overlay:
            assert overlay.size == (40, 40)

    def test_checkpoint_source(self, trained: dict[str, Any], dataset: Path) -> None:
        """A checkpoint plus an image yields prompts at model resolution."""
        image = next((dataset.parent / "images").glob("*.png"))
        result = invoke("prompts", "--checkpoint", trained["best_checkpoint"], "--image", str(image), "--branch", "2")
        assert result.exit_code == EXIT_OK, result.output
        output = json_output(result)
        assert output["source"] == "checkpoint"
        assert output["source_branch"] == 2
        assert (output["height"], output["width"]) == (32, 32)


# ---------------------------------------------------------------------------
# Usage errors
# ---------------------------------------------------------------------------


class TestUsageErrors:
    """Invalid input exits with code 2 and a message on stderr."""

    def test_missing_manifest(self, run_file: Path, tmp_path: Path) -> None:
        """A manifest path that does not exist is a usage error."""
        result = invoke("train", "--config", str(run_file), "--manifest", str(tmp_path / "absent.json"))
        assert result.exit_code == EXIT_USAGE
        assert "error:" in result.output

    def test_no_manifest(self, tmp_path: Path) -> None:
        """Training without any manifest is a usage error."""
        result = invoke("train", "--out-dir", str(tmp_path / "run"))
        assert result.exit_code == EXIT_USAGE

    def test_invalid_config(self, dataset: Path, run_file: Path, tmp_path: Path) -> None:
        """An odd batch at labeled fraction 0.5 fails validation."""
        result = invoke(
            "train",
            "--config",
            str(run_file),
            "--manifest",
            str(dataset),
            "--batch-size",
            "5",
            "--out-dir",
            str(tmp_path / "run"),
        )
        assert result.exit_code == EXIT_USAGE
        assert "even" in result.output

    def test_ambiguous_prompt_source(self) -> None:
        """prompts needs exactly one of --mask or --checkpoint."""
        result = invoke("prompts")
        assert result.exit_code == EXIT_USAGE
        assert "ambiguous" in result.output

    def test_eval_unlabeled_split(self, trained: dict[str, Any], dataset: Path) -> None:
        """Evaluating a split without ground truth is a usage error."""
        result = invoke(
            "eval",
            "--checkpoint",
            trained["best_checkpoint"],
            "--manifest",
            str(dataset),
            "--split",
            "unlabeled",
        )
        assert result.exit_code == EXIT_USAGE
        assert "ground truth" in result.output
