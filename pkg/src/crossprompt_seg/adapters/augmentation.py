"""Aligned geometric augmentation of an image and its label map.

One draw fixes a rotation angle and two flips; the same transform is applied
to the image (bilinear) and to the label (nearest neighbour, so no new class
values appear). Every draw consumes exactly three values from the generator.
"""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from crossprompt_seg.core.models import ImageSample


@dataclass(frozen=True)
class AugmentationDraw:
    """Parameters of one augmentation.

    Attributes:
        angle: Rotation in degrees (counter-clockwise).
        flip_horizontal: Mirror left-right.
        flip_vertical: Mirror top-bottom.
    """

    angle: float = 0.0
    flip_horizontal: bool = False
    flip_vertical: bool = False


IDENTITY = AugmentationDraw()


def draw_augmentation(
    rng: np.random.Generator,
    rotation_degrees: float = 20.0,
    flip_probability: float = 0.5,
) -> AugmentationDraw:
    """Sample an angle uniformly in [-rotation_degrees, rotation_degrees] and two flips."""
    angle = float(rng.uniform(-rotation_degrees, rotation_degrees))
    flip_horizontal = bool(rng.random() < flip_probability)
    flip_vertical = bool(rng.random() < flip_probability)
    return AugmentationDraw(angle=angle, flip_horizontal=flip_horizontal, flip_vertical=flip_vertical)


def apply_augmentation(
    image: NDArray[np.float32],
    label: NDArray[np.int64] | None,
    draw: AugmentationDraw,
) -> tuple[NDArray[np.float32], NDArray[np.int64] | None]:
    """Apply one draw to a (H, W) image and optional (H, W) label."""
    if draw.angle != 0.0:
        image = ndimage.rotate(image, draw.angle, reshape=False, order=1, mode="constant", cval=0.0)
        image = np.clip(image, 0.0, 1.0)
        if label is not None:
            label = ndimage.rotate(label, draw.angle, reshape=False, order=0, mode="constant", cval=0)
    if draw.flip_horizontal:
        image = np.flip(image, axis=1)
        label = None if label is None else np.flip(label, axis=1)
    if draw.flip_vertical:
        image = np.flip(image, axis=0)
        label = None if label is None else np.flip(label, axis=0)
    image = np.ascontiguousarray(image, dtype=np.float32)
    label = None if label is None else np.ascontiguousarray(label, dtype=np.int64)
    return image, label


def augment(
    sample: ImageSample,
    rng: np.random.Generator,
    rotation_degrees: float = 20.0,
    flip_probability: float = 0.5,
) -> ImageSample:
    """Randomly rotate and flip a preprocessed sample."""
    draw = draw_augmentation(rng, rotation_degrees, flip_probability)
    image, label = apply_augmentation(sample.image, sample.label, draw)
    return ImageSample(
        sample_id=sample.sample_id,
        image=image,
        label=label,
        spacing=sample.spacing,
        group=sample.group,
        flags=sample.flags,
    )
