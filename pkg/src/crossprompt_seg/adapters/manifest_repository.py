"""Dataset manifest I/O, sample loading, preprocessing, and splitting.

Layout on disk:
    <root>/manifest.json
    <root>/images/<id>.png
    <root>/labels/<id>.png     integer class index per pixel

Images are read with Pillow; multi-channel images are averaged to grayscale.
Preprocessing resizes to the model resolution (bilinear for images, nearest
for labels) and min-max normalizes each image to [0, 1].
"""

import json
from collections import defaultdict
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from numpy.typing import NDArray
from PIL import Image

from crossprompt_seg.core.errors import ConfigError, InvalidInputError, ManifestError, NotFoundError
from crossprompt_seg.core.manifest import DatasetManifest, DatasetSplit, ManifestEntry, parse_manifest
from crossprompt_seg.core.models import ImageSample
from crossprompt_seg.observability import get_logger

logger = get_logger(__name__)

MANIFEST_FILE_NAME: str = "manifest.json"
CONSTANT_IMAGE_FLAG: str = "constant_image"

_UNCATEGORIZED: str = ""


def load_manifest(path: Path | str) -> DatasetManifest:
    """Load and validate a manifest JSON file.

    Referenced image files are not touched here; they are checked when loaded.

    Raises:
        NotFoundError: If the file does not exist.
        ManifestError: If it is not valid JSON or violates the schema.
    """
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ManifestError(f"manifest {path} must hold a JSON object")
    manifest = parse_manifest(data)
    logger.info("Manifest loaded", path=str(path), num_classes=manifest.num_classes, **manifest.counts())
    return manifest


def write_manifest(manifest: DatasetManifest, path: Path | str) -> Path:
    """Write a manifest as indented JSON and return its path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def read_image(path: Path) -> NDArray[np.float32]:
    """Read an image file as float32 (H, W) or (H, W, channels)."""
    if not path.is_file():
        raise NotFoundError(f"image not found: {path}")
    with Image.open(path) as image:
        if image.mode in ("P", "RGBA", "LA", "CMYK", "YCbCr"):
            image = image.convert("RGB")
        return np.asarray(image, dtype=np.float32)


def read_label(path: Path, num_classes: int) -> NDArray[np.int64]:
    """Read an integer label PNG and check its values are below num_classes."""
    if not path.is_file():
        raise NotFoundError(f"label not found: {path}")
    with Image.open(path) as image:
        label = np.asarray(image, dtype=np.int64)
    if label.ndim != 2:
        raise InvalidInputError(f"label {path} must be single-channel, got shape {label.shape}")
    if label.size and (label.min() < 0 or label.max() >= num_classes):
        raise InvalidInputError(f"label {path} holds values outside [0, {num_classes - 1}]")
    return label


def load_sample(entry: ManifestEntry, root: Path, num_classes: int) -> ImageSample:
    """Load the raw image and optional label of one manifest entry."""
    image = read_image(root / entry.image_path)
    label = read_label(root / entry.label_path, num_classes) if entry.label_path else None
    return ImageSample(
        sample_id=entry.id,
        image=image,
        label=label,
        spacing=entry.spacing,
        group=entry.group,
    )


def _resize(array: NDArray[np.generic], size: tuple[int, int], mode: str) -> NDArray[np.generic]:
    tensor = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))[None, None]
    if mode == "bilinear":
        resized = F.interpolate(tensor, size=size, mode="bilinear", align_corners=False)
    else:
        resized = F.interpolate(tensor, size=size, mode="nearest")
    return resized[0, 0].numpy()


def preprocess(sample: ImageSample, target_resolution: int | tuple[int, int] = 512) -> ImageSample:
    """Resize and normalize a sample for the model.

    The image is averaged to grayscale, resized bilinearly, and min-max
    normalized to [0, 1]; a constant image becomes all zeros and is flagged.
    The label is resized by nearest neighbour, so no class values appear.
    Inputs already at the target size are not resampled.

    Args:
        sample: Raw sample.
        target_resolution: Output side, or (height, width).

    Returns:
        A new preprocessed sample.
    """
    size = (target_resolution, target_resolution) if isinstance(target_resolution, int) else target_resolution
    image = np.asarray(sample.image, dtype=np.float32)
    if image.ndim == 3:
        image = image.mean(axis=2, dtype=np.float32)
    if image.ndim != 2:
        raise InvalidInputError(f"sample {sample.sample_id} image must be 2D, got shape {image.shape}")

    label = sample.label
    spacing = sample.spacing
    if image.shape != size:
        if spacing is not None:
            spacing = (spacing[0] * image.shape[0] / size[0], spacing[1] * image.shape[1] / size[1])
        image = _resize(image, size, "bilinear").astype(np.float32)
        if label is not None:
            label = _resize(label, size, "nearest").astype(np.int64)

    flags = list(sample.flags)
    low, high = float(image.min()), float(image.max())
    if high > low:
        image = ((image - low) / (high - low)).astype(np.float32)
    else:
        image = np.zeros_like(image, dtype=np.float32)
        if CONSTANT_IMAGE_FLAG not in flags:
            flags.append(CONSTANT_IMAGE_FLAG)
        logger.warning("Constant image normalized to zeros", sample_id=sample.sample_id)

    return ImageSample(
        sample_id=sample.sample_id,
        image=image,
        label=label,
        spacing=spacing,
        group=sample.group,
        flags=tuple(flags),
    )


def _allocate(total: int, sizes: dict[str, int]) -> dict[str, int]:
    """Split ``total`` across strata proportionally (largest remainder)."""
    population = sum(sizes.values())
    if population == 0:
        return {key: 0 for key in sizes}
    quotas = {key: total * size / population for key, size in sizes.items()}
    counts = {key: int(np.floor(quota)) for key, quota in quotas.items()}
    leftover = total - sum(counts.values())
    by_remainder = sorted(sizes, key=lambda key: (-(quotas[key] - counts[key]), key))
    for key in by_remainder[:leftover]:
        counts[key] += 1
    return counts


def _take_stratified(
    strata: dict[str, list[str]],
    count: int,
    rng: np.random.Generator,
) -> list[str]:
    """Remove and return ``count`` groups, proportionally across strata."""
    allocation = _allocate(count, {key: len(groups) for key, groups in strata.items()})
    taken: list[str] = []
    for key in sorted(strata):
        groups = strata[key]
        order = rng.permutation(len(groups))
        chosen = {groups[index] for index in order[: allocation[key]]}
        taken.extend(group for group in groups if group in chosen)
        strata[key] = [group for group in groups if group not in chosen]
    return taken


def make_split(
    entries: Sequence[ManifestEntry],
    n_labeled: int,
    val_frac: float = 0.0,
    test_frac: float = 0.0,
    seed: int = 0,
) -> DatasetSplit:
    """Deterministic grouped, stratified split.

    Entries sharing a ``group`` always land in the same split. Validation,
    test, and labeled groups are drawn proportionally from every ``category``
    stratum; all remaining groups are unlabeled. Counts are in groups, so
    with ungrouped entries ``n_labeled`` is an entry count. Groups containing
    an unlabeled entry can only be unlabeled.

    Args:
        entries: Manifest entries to split.
        n_labeled: Labeled groups to draw from the training pool.
        val_frac: Share of labeled-capable groups held out for validation.
        test_frac: Share of labeled-capable groups held out for testing.
        seed: Split seed.

    Returns:
        The split; ids keep their order in ``entries``.

    Raises:
        ConfigError: If the counts or fractions are infeasible.
    """
    if not 0.0 <= val_frac < 1.0 or not 0.0 <= test_frac < 1.0 or val_frac + test_frac >= 1.0:
        raise ConfigError(f"invalid split fractions val={val_frac}, test={test_frac}", field="split")
    if n_labeled < 0:
        raise ConfigError(f"n_labeled must be non-negative, got {n_labeled}", field="n_labeled")

    members: dict[str, list[ManifestEntry]] = defaultdict(list)
    for entry in entries:
        members[entry.group_key].append(entry)

    strata: dict[str, list[str]] = defaultdict(list)
    unlabelable: list[str] = []
    for group, group_entries in members.items():
        if any(entry.label_path is None for entry in group_entries):
            unlabelable.append(group)
        else:
            strata[group_entries[0].category or _UNCATEGORIZED].append(group)

    candidates = sum(len(groups) for groups in strata.values())
    n_test = int(np.floor(test_frac * candidates + 0.5))
    n_val = int(np.floor(val_frac * candidates + 0.5))
    if n_labeled > candidates - n_test - n_val:
        raise ConfigError(
            f"n_labeled={n_labeled} exceeds the {candidates - n_test - n_val} labeled-capable training groups",
            field="n_labeled",
        )

    rng = np.random.default_rng(seed)
    test_groups = set(_take_stratified(strata, n_test, rng))
    val_groups = set(_take_stratified(strata, n_val, rng))
    labeled_groups = set(_take_stratified(strata, n_labeled, rng))

    def ids_in(groups: set[str]) -> list[str]:
        return [entry.id for entry in entries if entry.group_key in groups]

    assigned = test_groups | val_groups | labeled_groups
    split = DatasetSplit(
        labeled_ids=ids_in(labeled_groups),
        unlabeled_ids=[entry.id for entry in entries if entry.group_key not in assigned],
        val_ids=ids_in(val_groups),
        test_ids=ids_in(test_groups),
    )
    logger.info(
        "Split created",
        seed=seed,
        labeled=len(split.labeled_ids),
        unlabeled=len(split.unlabeled_ids),
        val=len(split.val_ids),
        test=len(split.test_ids),
        unlabelable_groups=len(unlabelable),
    )
    return split


class ManifestRepository:
    """Loads preprocessed samples for the splits of one manifest.

    Args:
        manifest_path: Path to manifest.json; relative entry paths resolve
            against its directory.
    """

    def __init__(self, manifest_path: Path | str) -> None:
        self._path = Path(manifest_path)
        self._root = self._path.parent
        self.manifest = load_manifest(self._path)

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    def load_split(
        self,
        split_name: str,
        resolution: int,
        default_spacing: tuple[float, float] | None = None,
    ) -> list[ImageSample]:
        """Load and preprocess every sample of a split."""
        return [
            self.load_entry(entry, resolution, default_spacing) for entry in self.manifest.entries_for(split_name)
        ]

    def load_entry(
        self,
        entry: ManifestEntry,
        resolution: int,
        default_spacing: tuple[float, float] | None = None,
    ) -> ImageSample:
        """Load and preprocess one entry; ``default_spacing`` fills in a missing spacing."""
        sample = preprocess(load_sample(entry, self._root, self.num_classes), resolution)
        if sample.spacing is None and default_spacing is not None:
            sample.spacing = default_spacing
        return sample
