"""Prompt overlay rendering with Pillow.

Center points are drawn as filled discs, random points as rings; the color
encodes the class.
"""

from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image, ImageDraw

from crossprompt_seg.core.models import PromptMode, PromptSet
from crossprompt_seg.observability import get_logger

logger = get_logger(__name__)

CLASS_COLORS: tuple[tuple[int, int, int], ...] = (
    (230, 25, 75),
    (60, 180, 75),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
)


def class_color(class_id: int) -> tuple[int, int, int]:
    return CLASS_COLORS[(class_id - 1) % len(CLASS_COLORS)]


def to_grayscale_rgb(base: NDArray[np.floating] | NDArray[np.integer]) -> Image.Image:
    """Min-max scale a (H, W) array to an 8-bit RGB image."""
    array = np.asarray(base, dtype=np.float64)
    low, high = float(array.min()), float(array.max())
    scaled = (array - low) / (high - low) if high > low else np.zeros_like(array)
    return Image.fromarray((scaled * 255).round().astype(np.uint8)).convert("RGB")


def write_overlay(base: NDArray[np.floating] | NDArray[np.integer], prompts: PromptSet, path: Path) -> Path:
    """Draw prompts over a (H, W) base image and save it as PNG."""
    image = to_grayscale_rgb(base)
    draw = ImageDraw.Draw(image)
    radius = max(2, min(image.size) // 40)
    for point in prompts.points:
        box = (point.col - radius, point.row - radius, point.col + radius, point.row + radius)
        color = class_color(point.class_id)
        if point.mode is PromptMode.CENTER:
            draw.ellipse(box, fill=color)
        else:
            draw.ellipse(box, outline=color, width=max(1, radius // 2))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path)
    logger.info("Prompt overlay written", path=str(path), points=len(prompts))
    return path
