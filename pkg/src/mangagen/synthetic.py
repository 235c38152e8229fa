"""Synthetic annotated pages for tests, demos and overfit runs.

Pages are built by recursive guillotine splits with white gutters, so layouts
look like real panel grids and are guaranteed non-overlapping.  Each panel is
filled with a flat gray tone drawn from a small named palette and captioned
after that tone, giving a learnable caption -> pixels mapping.  Panels may
carry a character box and a dialogue text box; the text boxes double as the
synthetic speech-bubble boxes (this is the promised trivial bubble generator,
not a segmentation model).

All intensities sit on the 1/255 grid so PNG round-trips are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import (
    BBox,
    DialogLink,
    NamedRegion,
    PageAnnotation,
    PanelAnnotation,
    TextRegion,
    serialize_page_annotation,
)
from .dataset import CaptionResult
from .panel_order import order_panels
from .panels import save_image

__all__ = ["SyntheticPage", "synth_page", "synth_pages", "write_synthetic_dataset"]

_PALETTE = (
    ("ink", 16),
    ("charcoal", 64),
    ("slate", 104),
    ("storm", 136),
    ("ash", 168),
    ("fog", 200),
    ("mist", 232),
)

_CHARACTER_NAMES = ("Aoi", "Botan", "Chiyo", "Daichi")


@dataclass(frozen=True)
class SyntheticPage:
    annotation: PageAnnotation
    image: np.ndarray  # (H, W, 3) float32
    bubble_boxes: tuple[BBox, ...]
    order: tuple[int, ...]  # panel indices in reading order
    captions: CaptionResult  # aligned with ``order``


def _guillotine(
    rng: np.random.Generator, rect: BBox, count: int, min_size: int, gutter: int
) -> list[BBox]:
    if count == 1:
        return [rect]
    k1 = int(rng.integers(1, count))
    k2 = count - k1

    # Prefer cutting across the longer side; fall back to the other axis.
    axes = ["horizontal", "vertical"] if rect.height >= rect.width else ["vertical", "horizontal"]
    for axis in axes:
        lo, hi = (rect.ymin, rect.ymax) if axis == "horizontal" else (rect.xmin, rect.xmax)
        # Each side must be able to host its panel count at minimum size.
        need_a = k1 * (min_size + gutter)
        need_b = k2 * (min_size + gutter)
        if hi - lo < need_a + need_b:
            continue
        c = int(rng.integers(lo + need_a, hi - need_b + 1))
        if axis == "horizontal":
            a = BBox(rect.xmin, rect.ymin, rect.xmax, c)
            b = BBox(rect.xmin, c + gutter, rect.xmax, rect.ymax)
        else:
            a = BBox(rect.xmin, rect.ymin, c, rect.ymax)
            b = BBox(c + gutter, rect.ymin, rect.xmax, rect.ymax)
        return _guillotine(rng, a, k1, min_size, gutter) + _guillotine(
            rng, b, k2, min_size, gutter
        )
    return [rect]  # cannot split further, merge the remaining count


def _inner_box(rng: np.random.Generator, panel: BBox, frac: float) -> BBox | None:
    w = max(2, int(panel.width * frac))
    h = max(2, int(panel.height * frac))
    if panel.width - w < 2 or panel.height - h < 2:
        return None
    x = int(rng.integers(panel.xmin + 1, panel.xmax - w))
    y = int(rng.integers(panel.ymin + 1, panel.ymax - h))
    return BBox(x, y, x + w, y + h)


def synth_page(
    rng: np.random.Generator,
    page_id: str,
    width: int = 48,
    height: int = 64,
    max_panels: int = 4,
    dialogue_prob: float = 0.6,
) -> SyntheticPage:
    """Generate one annotated page with deterministic captions."""
    margin, gutter = 2, 2
    min_size = max(8, min(width, height) // 5)
    n_target = int(rng.integers(1, max_panels + 1))
    frame = BBox(margin, margin, width - margin, height - margin)
    boxes = _guillotine(rng, frame, n_target, min_size, gutter)

    image = np.ones((height, width, 3), dtype=np.float32)
    shades: list[str] = []
    characters: list[NamedRegion] = []
    texts: list[TextRegion] = []
    links: list[DialogLink] = []
    bubbles: list[BBox] = []

    for i, box in enumerate(boxes):
        name, level = _PALETTE[int(rng.integers(0, len(_PALETTE)))]
        shades.append(name)
        image[box.ymin : box.ymax, box.xmin : box.xmax] = level / 255.0

        if rng.random() < dialogue_prob:
            speaker = _CHARACTER_NAMES[int(rng.integers(0, len(_CHARACTER_NAMES)))]
            char_box = _inner_box(rng, box, 0.3)
            text_box = _inner_box(rng, box, 0.35)
            if char_box is not None:
                characters.append(NamedRegion(speaker, char_box))
                image[char_box.ymin : char_box.ymax, char_box.xmin : char_box.xmax] = (
                    max(0, level - 16) / 255.0
                )
            if text_box is not None:
                content = f"{speaker} speaks in the {name} panel."
                if char_box is not None:
                    links.append(DialogLink(len(texts), speaker))
                texts.append(TextRegion(content, text_box))
                bubbles.append(text_box)
                image[text_box.ymin : text_box.ymax, text_box.xmin : text_box.xmax] = (
                    252 / 255.0
                )

    annotation = PageAnnotation(
        page_id=page_id,
        width=width,
        height=height,
        panels=tuple(PanelAnnotation(box=b) for b in boxes),
        characters=tuple(characters),
        texts=tuple(texts),
        dialog_links=tuple(links),
    )
    order = order_panels([p.box for p in annotation.panels], (width, height)).permutation
    captions = CaptionResult(
        panel_captions=tuple(f"a panel filled with {shades[i]} tone" for i in order),
        story=" then ".join(shades[i] for i in order),
    )
    return SyntheticPage(
        annotation=annotation,
        image=image,
        bubble_boxes=tuple(bubbles),
        order=order,
        captions=captions,
    )


def synth_pages(
    n_pages: int,
    seed: int,
    width: int = 48,
    height: int = 64,
    max_panels: int = 4,
    dialogue_prob: float = 0.6,
) -> list[SyntheticPage]:
    rng = np.random.default_rng(seed)
    return [
        synth_page(rng, f"page{i:04d}", width, height, max_panels, dialogue_prob)
        for i in range(n_pages)
    ]


def write_synthetic_dataset(
    out_dir: str | Path,
    n_pages: int,
    seed: int,
    width: int = 48,
    height: int = 64,
    max_panels: int = 4,
) -> Path:
    """Write raw inputs (images/, xml/, bubbles/) that build-dataset consumes."""
    out = Path(out_dir)
    for sub in ("images", "xml", "bubbles"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for page in synth_pages(n_pages, seed, width, height, max_panels):
        pid = page.annotation.page_id
        save_image(out / "images" / f"{pid}.png", page.image)
        (out / "xml" / f"{pid}.xml").write_text(
            serialize_page_annotation(page.annotation), encoding="utf-8"
        )
        (out / "bubbles" / f"{pid}.json").write_text(
            json.dumps([list(b.as_tuple()) for b in page.bubble_boxes]),
            encoding="utf-8",
        )
    return out
