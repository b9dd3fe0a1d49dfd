"""Synthetic shape datasets for desk-scale experiments.

Each image holds soft-intensity shapes on a noisy background, with an exact
label map:
  class 1   filled ellipse in the right half
  class 2   ring (annulus) in the left half, at least 2 px thick
  class 3   core filling the ring's hole
  class 4+  small ellipses placed on free background

Every class below ``num_classes`` appears in every image. Generation is
deterministic: sample i draws from ``default_rng([seed, i])`` and PNGs are
written without metadata, so equal seeds give identical bytes.
"""

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image
from scipy import ndimage

from crossprompt_seg.adapters.manifest_repository import MANIFEST_FILE_NAME, make_split, write_manifest
from crossprompt_seg.core.errors import ConfigError
from crossprompt_seg.core.manifest import DatasetManifest, ManifestEntry
from crossprompt_seg.observability import get_logger

logger = get_logger(__name__)

MIN_RESOLUTION: int = 32
MIN_RING_THICKNESS: float = 2.0

_BACKGROUND_INTENSITY: float = 0.1
_NOISE_STD: float = 0.04
_SMOOTHING_SIGMA: float = 0.8
_PLACEMENT_ATTEMPTS: int = 50


@dataclass(frozen=True)
class SyntheticDataset:
    """Result of ``generate_synthetic``.

    Attributes:
        root: Output directory.
        manifest_path: Path of the written manifest.
        manifest: The manifest itself.
    """

    root: Path
    manifest_path: Path
    manifest: DatasetManifest


def _ellipse(
    shape: tuple[int, int],
    center: tuple[float, float],
    axes: tuple[float, float],
    angle: float = 0.0,
) -> NDArray[np.float64]:
    """Normalized radius field; values <= 1 lie inside the ellipse."""
    rows, cols = np.indices(shape, dtype=np.float64)
    dr, dc = rows - center[0], cols - center[1]
    cos, sin = np.cos(angle), np.sin(angle)
    u = dr * cos + dc * sin
    v = -dr * sin + dc * cos
    return np.sqrt((u / axes[0]) ** 2 + (v / axes[1]) ** 2)


def _is_single_ring(mask: NDArray[np.bool_]) -> bool:
    # one 8-connected component whose 4-connected complement splits into outside + hole
    _, components = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    _, background = ndimage.label(~mask)
    return components == 1 and background == 2


def _ring(
    shape: tuple[int, int],
    rng: np.random.Generator,
    resolution: int,
) -> tuple[NDArray[np.bool_], NDArray[np.bool_]]:
    """Ring and hole masks in the left half."""
    outer_min = max(0.1 * resolution, 5.0)
    outer_max = max(0.16 * resolution, outer_min)
    center = (rng.uniform(0.3, 0.7) * resolution, rng.uniform(0.25, 0.32) * resolution)
    axes = (rng.uniform(outer_min, outer_max), rng.uniform(outer_min, outer_max))
    thickness = max(MIN_RING_THICKNESS, 0.3 * min(axes))

    while True:
        inner = (axes[0] - thickness, axes[1] - thickness)
        outer_field = _ellipse(shape, center, axes)
        inner_field = _ellipse(shape, center, inner)
        hole = inner_field <= 1.0
        ring = (outer_field <= 1.0) & ~hole
        if _is_single_ring(ring) or thickness >= min(axes) - 1.0:
            return ring, hole
        thickness += 0.5


def _free_placement(
    occupied: NDArray[np.bool_],
    rng: np.random.Generator,
    resolution: int,
) -> NDArray[np.bool_]:
    """A small ellipse on background, or a single free pixel when none fits."""
    shape = occupied.shape
    margin = ndimage.binary_dilation(occupied, iterations=1)
    radius_min = max(0.05 * resolution, 2.0)
    radius_max = max(0.08 * resolution, radius_min)
    for _ in range(_PLACEMENT_ATTEMPTS):
        axes = (rng.uniform(radius_min, radius_max), rng.uniform(radius_min, radius_max))
        center = (
            rng.uniform(axes[0] + 1, shape[0] - axes[0] - 1),
            rng.uniform(axes[1] + 1, shape[1] - axes[1] - 1),
        )
        blob = _ellipse(shape, center, axes, rng.uniform(0.0, np.pi)) <= 1.0
        if blob.any() and not (blob & margin).any():
            return blob
    distance = ndimage.distance_transform_edt(~occupied)
    fallback = np.zeros(shape, dtype=bool)
    fallback[np.unravel_index(int(np.argmax(distance)), shape)] = True
    return fallback


def _label_map(rng: np.random.Generator, resolution: int, num_classes: int) -> NDArray[np.uint8]:
    shape = (resolution, resolution)
    label = np.zeros(shape, dtype=np.uint8)

    blob_center = (rng.uniform(0.3, 0.7) * resolution, rng.uniform(0.66, 0.8) * resolution)
    blob_axes = (rng.uniform(0.08, 0.16) * resolution, rng.uniform(0.08, 0.16) * resolution)
    blob = _ellipse(shape, blob_center, blob_axes, rng.uniform(0.0, np.pi)) <= 1.0
    label[blob] = 1

    if num_classes > 2:
        ring, hole = _ring(shape, rng, resolution)
        label[ring] = 2
        if num_classes > 3:
            label[hole] = 3

    for class_id in range(4, num_classes):
        label[_free_placement(label > 0, rng, resolution)] = class_id
    return label


def _render(label: NDArray[np.uint8], rng: np.random.Generator, num_classes: int) -> NDArray[np.uint8]:
    image = np.full(label.shape, _BACKGROUND_INTENSITY, dtype=np.float64)
    steps = max(num_classes - 2, 1)
    for class_id in range(1, num_classes):
        intensity = 0.35 + 0.55 * (class_id - 1) / steps + rng.uniform(-0.04, 0.04)
        image[label == class_id] = intensity
    image = ndimage.gaussian_filter(image, sigma=_SMOOTHING_SIGMA)
    image = image + rng.normal(0.0, _NOISE_STD, size=image.shape)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_sample(
    index: int,
    seed: int,
    resolution: int,
    num_classes: int,
) -> tuple[NDArray[np.uint8], NDArray[np.uint8]]:
    """Image and label map of one synthetic sample."""
    rng = np.random.default_rng([seed, index])
    label = _label_map(rng, resolution, num_classes)
    return _render(label, rng, num_classes), label


def generate_synthetic(
    n_samples: int,
    resolution: int,
    num_classes: int,
    seed: int,
    out_dir: Path | str,
    n_labeled: int | None = None,
    val_frac: float = 0.1,
    test_frac: float = 0.1,
    force: bool = False,
) -> SyntheticDataset:
    """Write a synthetic dataset with ``images/``, ``labels/`` and a manifest.

    Args:
        n_samples: Number of image/label pairs.
        resolution: Square image side.
        num_classes: Classes C including background.
        seed: Generation and split seed.
        out_dir: Output directory.
        n_labeled: Labeled training samples; defaults to a quarter of the
            training pool (at least 1).
        val_frac: Validation share.
        test_frac: Test share.
        force: Replace a non-empty out_dir.

    Raises:
        ConfigError: On invalid sizes, or a non-empty out_dir without force.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be positive, got {n_samples}", field="n_samples")
    if resolution < MIN_RESOLUTION:
        raise ConfigError(f"resolution must be at least {MIN_RESOLUTION}, got {resolution}", field="resolution")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be at least 2, got {num_classes}", field="num_classes")

    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise ConfigError(f"output directory {root} is not empty; pass --force to overwrite", field="out_dir")
        shutil.rmtree(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)

    entries: list[ManifestEntry] = []
    for index in range(n_samples):
        sample_id = f"synth_{index:04d}"
        image, label = generate_sample(index, seed, resolution, num_classes)
        image_path = Path("images") / f"{sample_id}.png"
        label_path = Path("labels") / f"{sample_id}.png"
        Image.fromarray(image).save(root / image_path)
        Image.fromarray(label).save(root / label_path)
        entries.append(ManifestEntry(id=sample_id, image_path=image_path.as_posix(), label_path=label_path.as_posix()))

    held_out = int(np.floor(test_frac * n_samples + 0.5)) + int(np.floor(val_frac * n_samples + 0.5))
    if n_labeled is None:
        n_labeled = max(1, (n_samples - held_out) // 4)
    split = make_split(entries, n_labeled=n_labeled, val_frac=val_frac, test_frac=test_frac, seed=seed)
    manifest = DatasetManifest(num_classes=num_classes, seed=seed, entries=entries, split=split)
    manifest_path = write_manifest(manifest, root / MANIFEST_FILE_NAME)

    logger.info(
        "Synthetic dataset written",
        out_dir=str(root),
        n_samples=n_samples,
        resolution=resolution,
        num_classes=num_classes,
        seed=seed,
    )
    return SyntheticDataset(root=root, manifest_path=manifest_path, manifest=manifest)
