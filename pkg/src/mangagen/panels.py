"""Page <-> panel-stack algebra.

A page is an H x W x 3 float array with intensities in [0, 1] (white = 1.0).
Splitting copies the page into one full-page image per panel, whitening
everything outside the panel's box; composition merges a stack back into a
page by pixel-wise minimum, for which white is the identity.  Both directions
are pure functions.

Images are stored on disk as 8-bit PNG with intensities mapped linearly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .annotations import BBox
from .errors import DataError

__all__ = [
    "PanelImageStack",
    "as_page_image",
    "split_page",
    "compose_page",
    "load_image",
    "save_image",
]


def as_page_image(array: np.ndarray) -> np.ndarray:
    """Validate/convert an array to the page-image contract (float32, [0,1])."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"page image must be HxWx3, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError("page image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("page image intensities must lie in [0, 1]")
    return arr


@dataclass(frozen=True)
class PanelImageStack:
    """K full-page panel images plus their source boxes (None if generated)."""

    images: np.ndarray  # (K, H, W, 3) float32 in [0, 1]
    boxes: tuple[BBox, ...] | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim != 4 or images.shape[3] != 3 or images.shape[0] == 0:
            raise DataError(f"panel stack must be KxHxWx3 with K >= 1, got {images.shape}")
        object.__setattr__(self, "images", images)
        if self.boxes is not None:
            object.__setattr__(self, "boxes", tuple(self.boxes))
            if len(self.boxes) != images.shape[0]:
                raise DataError(
                    f"{len(self.boxes)} boxes for {images.shape[0]} panel images"
                )

    def __len__(self) -> int:
        return int(self.images.shape[0])


def split_page(page: np.ndarray, boxes: Sequence[BBox]) -> PanelImageStack:
    """Copy the page once per box, whitening all pixels outside that box.

    Stack order follows box order.  Boxes must lie within the page.
    """
    page = as_page_image(page)
    height, width = page.shape[:2]
    stack = np.ones((len(boxes), height, width, 3), dtype=np.float32)
    for i, box in enumerate(boxes):
        if box.xmin < 0 or box.ymin < 0 or box.xmax > width or box.ymax > height:
            raise DataError(f"box[{i}] {box.as_tuple()} outside page {width}x{height}")
        stack[i, box.ymin : box.ymax, box.xmin : box.xmax] = page[
            box.ymin : box.ymax, box.xmin : box.xmax
        ]
    return PanelImageStack(images=stack, boxes=tuple(boxes))


def compose_page(stack: PanelImageStack) -> np.ndarray:
    """Pixel-wise minimum over the stack, per channel.

    min is a semilattice: commutative, associative, idempotent, with the
    all-white image as identity, so padded white panels never affect output.
    """
    return np.min(stack.images, axis=0)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return arr


def save_image(path: str | Path, array: np.ndarray) -> None:
    arr = as_page_image(array)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")
