"""Newline-delimited JSON training log.

One record per optimizer step with the fields
``iteration, lr, l_s, l_cross, l_c, l_total, n_labeled, n_unlabeled,
n_degenerate, val_dsc`` (``val_dsc`` is null unless validation ran).
"""

import json
from pathlib import Path
from typing import IO, Any

from crossprompt_seg.observability import get_logger

logger = get_logger(__name__)

RECORD_FIELDS: tuple[str, ...] = (
    "iteration",
    "lr",
    "l_s",
    "l_cross",
    "l_c",
    "l_total",
    "n_labeled",
    "n_unlabeled",
    "n_degenerate",
    "val_dsc",
)


class TrainingLogPublisher:
    """Appends training records to an NDJSON file.

    Args:
        path: Log file; parent directories are created.
        keep_before: When resuming, keep existing records with a smaller
            iteration; otherwise the file starts empty.
    """

    def __init__(self, path: Path | str, keep_before: int | None = None) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept: list[dict[str, Any]] = []
        if keep_before is not None and self.path.is_file():
            kept = [record for record in read_training_log(self.path) if record.get("iteration", 0) < keep_before]
        self._handle: IO[str] | None = self.path.open("w", encoding="utf-8")
        for record in kept:
            self._handle.write(json.dumps(record) + "\n")

    def publish(self, record: dict[str, Any]) -> None:
        """Write one record, keeping the documented field order first."""
        if self._handle is None:
            raise ValueError(f"training log {self.path} is closed")
        ordered = {name: record.get(name) for name in RECORD_FIELDS}
        ordered.update({key: value for key, value in record.items() if key not in ordered})
        self._handle.write(json.dumps(ordered) + "\n")
        self._handle.flush()
        logger.debug("Training record published", iteration=record.get("iteration"))

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "TrainingLogPublisher":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


def read_training_log(path: Path | str) -> list[dict[str, Any]]:
    """Read every record of an NDJSON training log."""
    with Path(path).open(encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
