"""Evaluation report generation.

A report is one JSON document:

    {
      "context": {...},                 run config, checkpoint, split, mode, branch
      "records": [{sample_id, class, dsc, jc, hd95, asd, flags}, ...],
      "summary": [{class, metric, mean, std, count, undefined}, ...],
      "grand_mean": {dsc, jc, hd95, asd}   unweighted mean over classes
    }

A plain-text summary table is written next to it for humans.
"""

import json
from pathlib import Path
from typing import Any

from crossprompt_seg.core.errors import InvalidInputError
from crossprompt_seg.core.metrics import METRIC_NAMES, MetricSummary, grand_means, summarize
from crossprompt_seg.core.models import MetricsRecord
from crossprompt_seg.observability import get_logger

logger = get_logger(__name__)

RECORD_KEYS: frozenset[str] = frozenset({"sample_id", "class", "dsc", "jc", "hd95", "asd", "flags"})


def format_summary_table(summaries: list[MetricSummary]) -> str:
    """Render per-class mean ± std for every metric as a fixed-width table."""
    by_class: dict[int, dict[str, MetricSummary]] = {}
    for summary in summaries:
        by_class.setdefault(summary.class_id, {})[summary.metric] = summary

    header = f"{'class':>5}  " + "  ".join(f"{name:>18}" for name in METRIC_NAMES)
    lines = [header, "-" * len(header)]
    for class_id in sorted(by_class):
        cells = []
        for name in METRIC_NAMES:
            summary = by_class[class_id].get(name)
            if summary is None or summary.mean is None:
                cell = "undefined"
            else:
                cell = f"{summary.mean:.2f} ± {summary.std or 0.0:.2f}"
                if summary.undefined:
                    cell += f" ({summary.undefined}u)"
            cells.append(f"{cell:>18}")
        lines.append(f"{class_id:>5}  " + "  ".join(cells))
    return "\n".join(lines)


class ReportWriter:
    """Writes JSON metric reports plus a summary table."""

    def write(self, path: Path, records: list[MetricsRecord], context: dict[str, Any]) -> Path:
        """Write the report to ``path`` and the table to ``path`` with a .txt suffix."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        summaries = summarize(records)
        document = {
            "context": context,
            "records": [record.to_dict() for record in records],
            "summary": [summary.to_dict() for summary in summaries],
            "grand_mean": grand_means(summaries),
        }
        path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
        path.with_suffix(".txt").write_text(format_summary_table(summaries) + "\n", encoding="utf-8")
        logger.info("Report written", path=str(path), records=len(records))
        return path


def validate_report(document: dict[str, Any]) -> None:
    """Check a report document against the schema.

    Raises:
        InvalidInputError: Naming the first violation.
    """
    for key in ("context", "records", "summary"):
        if key not in document:
            raise InvalidInputError(f"report is missing '{key}'")
    for index, record in enumerate(document["records"]):
        if set(record) != RECORD_KEYS:
            raise InvalidInputError(f"record {index} has keys {sorted(record)}; expected {sorted(RECORD_KEYS)}")
        if not isinstance(record["sample_id"], str) or not isinstance(record["class"], int):
            raise InvalidInputError(f"record {index} has an invalid sample_id or class")
        for metric in ("dsc", "jc"):
            if not isinstance(record[metric], int | float) or not 0.0 <= record[metric] <= 100.0:
                raise InvalidInputError(f"record {index} has {metric}={record[metric]!r} outside [0, 100]")
        for metric in ("hd95", "asd"):
            value = record[metric]
            if value is not None and (not isinstance(value, int | float) or value < 0):
                raise InvalidInputError(f"record {index} has invalid {metric}={value!r}")
        if not isinstance(record["flags"], list):
            raise InvalidInputError(f"record {index} flags must be a list")


def load_report(path: Path | str) -> tuple[list[MetricsRecord], dict[str, Any]]:
    """Read a report back into records plus its context."""
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    validate_report(document)
    records = [
        MetricsRecord(
            sample_id=record["sample_id"],
            class_id=record["class"],
            dsc=record["dsc"],
            jc=record["jc"],
            hd95=record["hd95"],
            asd=record["asd"],
            flags=list(record["flags"]),
        )
        for record in document["records"]
    ]
    return records, document["context"]
