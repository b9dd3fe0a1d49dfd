"""Overlap and surface-distance metrics on binary masks.

DSC and Jaccard are reported in percent. Both masks empty scores 100 and
exactly one empty scores 0. Surface distances (HD95, ASD) are undefined when
either mask is empty; they return None, and aggregation skips them while
counting how often that happened.
"""

from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from crossprompt_seg.core.errors import ShapeMismatchError
from crossprompt_seg.core.models import BinaryMask, MetricsRecord

HD_PERCENTILE: float = 95.0

# 4-connected cross used for erosion when extracting boundaries
_BOUNDARY_STRUCTURE: NDArray[np.bool_] = ndimage.generate_binary_structure(2, 1)

Spacing = tuple[float, float]


def _pair(pred: BinaryMask, gt: BinaryMask) -> tuple[NDArray[np.bool_], NDArray[np.bool_]]:
    if pred.grid.shape != gt.grid.shape:
        raise ShapeMismatchError(f"prediction shape {pred.grid.shape} != ground truth shape {gt.grid.shape}")
    return pred.grid, gt.grid


def dsc(pred: BinaryMask, gt: BinaryMask) -> float:
    """Dice similarity coefficient ``200 * |A & B| / (|A| + |B|)``."""
    a, b = _pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 200.0 * int((a & b).sum()) / total


def jaccard(pred: BinaryMask, gt: BinaryMask) -> float:
    """Jaccard index ``100 * |A & B| / |A | B|``."""
    a, b = _pair(pred, gt)
    union = int((a | b).sum())
    if union == 0:
        return 100.0
    return 100.0 * int((a & b).sum()) / union


def boundary(mask: BinaryMask) -> NDArray[np.bool_]:
    """Foreground pixels with at least one 4-neighbour outside the mask.

    The image border counts as outside, so foreground on the edge is boundary.
    """
    eroded = ndimage.binary_erosion(mask.grid, structure=_BOUNDARY_STRUCTURE, border_value=0)
    return mask.grid & ~eroded


def surface_distances(pred: BinaryMask, gt: BinaryMask, spacing: Spacing | None = None) -> NDArray[np.float64] | None:
    """Pooled symmetric boundary-to-boundary distances.

    For every boundary pixel of each mask, the Euclidean distance (scaled by
    ``spacing``) to the nearest boundary pixel of the other mask.

    Returns:
        1D array of |dB(pred)| + |dB(gt)| distances, or None if either mask is empty.
    """
    a, b = _pair(pred, gt)
    if not a.any() or not b.any():
        return None
    sampling = spacing or (1.0, 1.0)
    border_a, border_b = boundary(pred), boundary(gt)
    to_b = ndimage.distance_transform_edt(~border_b, sampling=sampling)
    to_a = ndimage.distance_transform_edt(~border_a, sampling=sampling)
    return np.concatenate([to_b[border_a], to_a[border_b]]).astype(np.float64)


def hd95(pred: BinaryMask, gt: BinaryMask, spacing: Spacing | None = None) -> float | None:
    """95th percentile (linear interpolation) of the pooled surface distances."""
    distances = surface_distances(pred, gt, spacing)
    if distances is None:
        return None
    return float(np.percentile(distances, HD_PERCENTILE))


def asd(pred: BinaryMask, gt: BinaryMask, spacing: Spacing | None = None) -> float | None:
    """Mean of the pooled surface distances."""
    distances = surface_distances(pred, gt, spacing)
    if distances is None:
        return None
    return float(distances.mean())


@dataclass(frozen=True)
class MetricSummary:
    """Mean and standard deviation of one metric for one class.

    Attributes:
        class_id: Foreground class.
        metric: ``dsc``, ``jc``, ``hd95`` or ``asd``.
        mean: Mean over defined values, None if there are none.
        std: Population standard deviation over defined values.
        count: Number of defined values.
        undefined: Number of records where the metric was undefined.
    """

    class_id: int
    metric: str
    mean: float | None
    std: float | None
    count: int
    undefined: int

    def to_dict(self) -> dict[str, object]:
        return {
            "class": self.class_id,
            "metric": self.metric,
            "mean": self.mean,
            "std": self.std,
            "count": self.count,
            "undefined": self.undefined,
        }


METRIC_NAMES: tuple[str, ...] = ("dsc", "jc", "hd95", "asd")


def summarize(records: Iterable[MetricsRecord]) -> list[MetricSummary]:
    """Aggregate per-class mean and std for every metric.

    Undefined surface distances are excluded from mean and std and counted
    in ``undefined``.
    """
    by_class: dict[int, list[MetricsRecord]] = {}
    for record in records:
        by_class.setdefault(record.class_id, []).append(record)

    summaries: list[MetricSummary] = []
    for class_id in sorted(by_class):
        for metric in METRIC_NAMES:
            raw = [getattr(record, metric) for record in by_class[class_id]]
            values = np.asarray([value for value in raw if value is not None], dtype=np.float64)
            summaries.append(
                MetricSummary(
                    class_id=class_id,
                    metric=metric,
                    mean=float(values.mean()) if values.size else None,
                    std=float(values.std()) if values.size else None,
                    count=int(values.size),
                    undefined=len(raw) - int(values.size),
                )
            )
    return summaries


def mean_foreground_dsc(records: Iterable[MetricsRecord]) -> float:
    """Mean DSC over all (sample, class) records; 0 for no records."""
    values = [record.dsc for record in records]
    return float(np.mean(values)) if values else 0.0


def grand_means(summaries: Iterable[MetricSummary]) -> dict[str, float | None]:
    """Unweighted mean over classes of each metric's class means."""
    by_metric: dict[str, list[float]] = {name: [] for name in METRIC_NAMES}
    for summary in summaries:
        if summary.mean is not None:
            by_metric[summary.metric].append(summary.mean)
    return {name: float(np.mean(values)) if values else None for name, values in by_metric.items()}
