"""Model-ready training records from annotated pages.

A TrainingRecord holds everything one page contributes to training: k_max
full-page panel images in reading order (padded with all-white images), k_max
captions (padded with "EMPTY"), a per-panel speech-bubble token mask, the
padding flags, and the ordered panel boxes.

Captions come from an external captioning client; the client contract carries
the page image, the enriched reading-order XML string, and a prompt.  A
deterministic mock client (captions derived solely from the XML dialogue) is
included so the pipeline runs offline and tests stay reproducible.

Bubble boxes are consumed as input from any segmenter; no segmentation model
lives here.  Record building is pure per page, so pages can be processed in
parallel; the mock client is pure as well.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .annotations import BBox, EnrichedPageXML, PageAnnotation, parse_page_annotation
from .errors import CaptioningProtocolError, CaptioningTransportError, DataError
from .panel_order import OrderResult
from .panels import as_page_image, load_image, save_image, split_page
from .scripts import EMPTY_SCRIPT

__all__ = [
    "TOKEN_STRIDE",
    "CaptionResult",
    "CaptioningClient",
    "MockCaptioningClient",
    "DEFAULT_CAPTION_PROMPT",
    "request_captions",
    "rasterize_bubble_mask",
    "TrainingRecord",
    "build_record",
    "write_record",
    "read_record",
    "write_records",
    "read_records",
    "load_manifest",
    "record_from_manifest_entry",
]

# One token cell covers 16x16 page pixels: the codec downsamples 8x and the
# patchifier groups 2x2 latent sites per token.
TOKEN_STRIDE = 16

DEFAULT_CAPTION_PROMPT = (
    "You are given a manga page image and an XML file describing it. The XML "
    "lists the panels in reading order; characters nest under the panel that "
    "contains them and dialogue lines nest under their speakers. Write one "
    "caption per panel describing what the panel shows, in panel order, then "
    "summarize the whole page as a short story."
)


@dataclass(frozen=True)
class CaptionResult:
    """Per-panel captions in reading order plus the page-level story."""

    panel_captions: tuple[str, ...]
    story: str

    def __post_init__(self):
        object.__setattr__(self, "panel_captions", tuple(self.panel_captions))
        for i, c in enumerate(self.panel_captions):
            if not c:
                raise DataError(f"caption[{i}] is empty")


class CaptioningClient(Protocol):
    """Wire contract: image pixels + XML string + prompt in, captions out.

    Implementations raise CaptioningTransportError for delivery failures.
    Clients must either be safe for concurrent requests or document a serial
    contract.
    """

    def request(
        self, page_image: np.ndarray, enriched_xml: str, prompt_template: str
    ) -> CaptionResult: ...


class MockCaptioningClient:
    """Offline stand-in: echoes each panel's dialogue as its caption.

    Panels without any dialogue caption as "a wordless panel". The story is
    the captions joined in reading order. Pure function of the XML string.
    """

    def request(
        self, page_image: np.ndarray, enriched_xml: str, prompt_template: str
    ) -> CaptionResult:
        root = ET.fromstring(enriched_xml)
        captions = []
        for panel in root.findall("panel"):
            lines = [t.text or "" for t in panel.iter("text")]
            joined = " ".join(line.strip() for line in lines if line.strip())
            captions.append(joined if joined else "a wordless panel")
        return CaptionResult(panel_captions=tuple(captions), story=" ".join(captions))


def request_captions(
    client: CaptioningClient,
    page_image: np.ndarray,
    enriched_xml: EnrichedPageXML | str,
    prompt_template: str = DEFAULT_CAPTION_PROMPT,
    retries: int = 2,
) -> CaptionResult:
    """Call the captioning client and validate its answer against the XML.

    Transport failures are retried ``retries`` times, then surfaced; a
    response whose caption count disagrees with the XML's panel count raises
    CaptioningProtocolError.
    """
    xml_text = (
        enriched_xml.to_string()
        if isinstance(enriched_xml, EnrichedPageXML)
        else enriched_xml
    )
    expected = len(ET.fromstring(xml_text).findall("panel"))

    attempt = 0
    while True:
        try:
            result = client.request(page_image, xml_text, prompt_template)
            break
        except CaptioningTransportError:
            attempt += 1
            if attempt > retries:
                raise

    if len(result.panel_captions) != expected:
        raise CaptioningProtocolError(
            f"client returned {len(result.panel_captions)} captions "
            f"for {expected} panels"
        )
    return result


def rasterize_bubble_mask(
    bubble_boxes: Sequence[BBox],
    page_size: tuple[int, int],
    token_stride: int = TOKEN_STRIDE,
    coverage_threshold: float = 0.5,
) -> np.ndarray:
    """Token-resolution bubble mask for a (width, height) page.

    A cell is masked iff the union of bubble boxes covers strictly more than
    ``coverage_threshold`` of its stride x stride pixel footprint.  Returns a
    (height/stride, width/stride) boolean grid.
    """
    width, height = page_size
    if width % token_stride or height % token_stride:
        raise DataError(
            f"token stride {token_stride} must divide page size {width}x{height}"
        )
    coverage = np.zeros((height, width), dtype=bool)
    for i, box in enumerate(bubble_boxes):
        if box.xmin < 0 or box.ymin < 0 or box.xmax > width or box.ymax > height:
            raise DataError(f"bubble[{i}] {box.as_tuple()} outside page {width}x{height}")
        coverage[box.ymin : box.ymax, box.xmin : box.xmax] = True

    ht, wt = height // token_stride, width // token_stride
    cell_area = coverage.reshape(ht, token_stride, wt, token_stride).sum(axis=(1, 3))
    return cell_area > coverage_threshold * token_stride * token_stride


def _cells_touching(box: BBox, page_size: tuple[int, int], token_stride: int) -> np.ndarray:
    """Boolean grid of token cells whose pixel footprint overlaps ``box``."""
    width, height = page_size
    ht, wt = height // token_stride, width // token_stride
    rows = np.arange(ht) * token_stride
    cols = np.arange(wt) * token_stride
    row_hit = (rows < box.ymax) & (rows + token_stride > box.ymin)
    col_hit = (cols < box.xmax) & (cols + token_stride > box.xmin)
    return row_hit[:, None] & col_hit[None, :]


@dataclass(frozen=True)
class TrainingRecord:
    """One page's model-ready sample. All panel slots are padded to k_max."""

    page_id: str
    panel_images: np.ndarray  # (k_max, H, W, 3) float32, padded slots all 1.0
    captions: tuple[str, ...]  # padded slots are "EMPTY"
    intra_mask: np.ndarray  # (k_max, h_tok, w_tok) bool, True = bubble-masked
    inter_mask: np.ndarray  # (k_max,) bool, True = padded slot
    boxes: tuple[BBox | None, ...]  # ordered source boxes, None for padding

    def __post_init__(self):
        images = np.asarray(self.panel_images, dtype=np.float32)
        intra = np.asarray(self.intra_mask, dtype=bool)
        inter = np.asarray(self.inter_mask, dtype=bool)
        object.__setattr__(self, "panel_images", images)
        object.__setattr__(self, "intra_mask", intra)
        object.__setattr__(self, "inter_mask", inter)
        object.__setattr__(self, "captions", tuple(self.captions))
        object.__setattr__(self, "boxes", tuple(self.boxes))

        k_max = images.shape[0]
        if not (
            len(self.captions) == k_max
            and intra.shape[0] == k_max
            and inter.shape == (k_max,)
            and len(self.boxes) == k_max
        ):
            raise DataError(f"record fields disagree on k_max={k_max}")
        k = int((~inter).sum())
        if not 1 <= k <= k_max:
            raise DataError(f"record needs 1..{k_max} real panels, found {k}")
        if inter[:k].any():
            raise DataError("real panels must precede padded ones")
        for i in range(k, k_max):
            if not (images[i] == 1.0).all():
                raise DataError(f"padded panel {i} is not all-white")
            if self.captions[i] != EMPTY_SCRIPT:
                raise DataError(f"padded caption {i} is {self.captions[i]!r}")
            if intra[i].any():
                raise DataError(f"padded panel {i} has bubble-masked tokens")
            if self.boxes[i] is not None:
                raise DataError(f"padded panel {i} carries a box")

    @property
    def k_real(self) -> int:
        return int((~self.inter_mask).sum())

    @property
    def k_max(self) -> int:
        return int(self.inter_mask.shape[0])


def build_record(
    page_image: np.ndarray,
    annotation: PageAnnotation,
    order: OrderResult | Sequence[int],
    captions: CaptionResult,
    bubble_boxes: Sequence[BBox],
    k_max: int,
) -> TrainingRecord:
    """Assemble one page's TrainingRecord.

    Panels are split out of the page in reading order (white outside each
    box), then padded up to k_max with all-white images captioned "EMPTY".
    The bubble mask is rasterized once at token resolution and restricted to
    each panel's box.  Pages with more than k_max panels belong upstream of
    this call (they are discarded when building datasets) and raise here.
    """
    page = as_page_image(page_image)
    height, width = page.shape[:2]
    if (width, height) != (annotation.width, annotation.height):
        raise DataError(
            f"page {annotation.page_id!r}: image is {width}x{height} but the "
            f"annotation says {annotation.width}x{annotation.height}"
        )

    perm = tuple(order.permutation) if isinstance(order, OrderResult) else tuple(order)
    n = len(annotation.panels)
    if n == 0:
        raise DataError(f"page {annotation.page_id!r} has no panels")
    if n > k_max:
        raise DataError(
            f"page {annotation.page_id!r} has {n} panels, exceeding k_max={k_max}"
        )
    if sorted(perm) != list(range(n)):
        raise DataError(f"order {perm} is not a permutation of 0..{n - 1}")
    if len(captions.panel_captions) != n:
        raise DataError(
            f"page {annotation.page_id!r}: {len(captions.panel_captions)} captions "
            f"for {n} panels"
        )

    ordered_boxes = [annotation.panels[i].box for i in perm]
    stack = split_page(page, ordered_boxes)

    panel_images = np.ones((k_max,) + page.shape, dtype=np.float32)
    panel_images[:n] = stack.images

    bubble_grid = rasterize_bubble_mask(bubble_boxes, (width, height))
    intra = np.zeros((k_max,) + bubble_grid.shape, dtype=bool)
    for i, box in enumerate(ordered_boxes):
        intra[i] = bubble_grid & _cells_touching(box, (width, height), TOKEN_STRIDE)

    inter = np.arange(k_max) >= n
    full_captions = tuple(captions.panel_captions) + (EMPTY_SCRIPT,) * (k_max - n)
    boxes: tuple[BBox | None, ...] = tuple(ordered_boxes) + (None,) * (k_max - n)
    return TrainingRecord(
        page_id=annotation.page_id,
        panel_images=panel_images,
        captions=full_captions,
        intra_mask=intra,
        inter_mask=inter,
        boxes=boxes,
    )


# --- record and manifest serialization --------------------------------------


def write_record(record: TrainingRecord, out_dir: str | Path) -> dict:
    """Write panel images as side-car PNGs and return the record's JSON line.

    Exact round-trips require intensities on the 1/255 grid (true for any
    image that was loaded from an 8-bit file; padding white is exact).
    """
    out_dir = Path(out_dir)
    panel_dir = out_dir / "panels"
    panel_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(record.k_max):
        rel = f"panels/{record.page_id}_p{i}.png"
        save_image(out_dir / rel, record.panel_images[i])
        paths.append(rel)
    return {
        "page_id": record.page_id,
        "panel_images": paths,
        "captions": list(record.captions),
        "intra_mask": record.intra_mask.astype(int).tolist(),
        "inter_mask": record.inter_mask.astype(int).tolist(),
        "boxes": [list(b.as_tuple()) if b is not None else None for b in record.boxes],
    }


def read_record(line: dict, base_dir: str | Path) -> TrainingRecord:
    base = Path(base_dir)
    images = np.stack([load_image(base / rel) for rel in line["panel_images"]])
    return TrainingRecord(
        page_id=line["page_id"],
        panel_images=images,
        captions=tuple(line["captions"]),
        intra_mask=np.asarray(line["intra_mask"], dtype=bool),
        inter_mask=np.asarray(line["inter_mask"], dtype=bool),
        boxes=tuple(BBox(*b) if b is not None else None for b in line["boxes"]),
    )


def write_records(records: Sequence[TrainingRecord], out_dir: str | Path) -> Path:
    """Archive records as records.jsonl plus side-car panel PNGs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "records.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(write_record(record, out), sort_keys=True) + "\n")
    return path


def read_records(archive_dir: str | Path) -> list[TrainingRecord]:
    base = Path(archive_dir)
    records = []
    with open(base / "records.jsonl", encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if raw:
                records.append(read_record(json.loads(raw), base))
    return records


_MANIFEST_KEYS = {
    "page_id",
    "image_path",
    "xml_path",
    "captions",
    "story",
    "bubble_boxes",
    "order",
}


def load_manifest(path: str | Path) -> list[dict]:
    """Read a JSON-lines dataset manifest, checking each entry's keys."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            entry = json.loads(raw)
            missing = _MANIFEST_KEYS - entry.keys()
            if missing:
                raise DataError(
                    f"{path}:{lineno}: manifest entry missing keys {sorted(missing)}"
                )
            entries.append(entry)
    if not entries:
        raise DataError(f"{path}: manifest is empty")
    return entries


def record_from_manifest_entry(
    entry: dict, base_dir: str | Path, k_max: int
) -> TrainingRecord:
    """Load a manifest entry's inputs from disk and build its TrainingRecord."""
    base = Path(base_dir)
    page = load_image(base / entry["image_path"])
    annotation = parse_page_annotation((base / entry["xml_path"]).read_text("utf-8"))
    captions = CaptionResult(
        panel_captions=tuple(entry["captions"]), story=entry["story"]
    )
    bubbles = [BBox(*b) for b in entry["bubble_boxes"]]
    return build_record(page, annotation, entry["order"], captions, bubbles, k_max)
