"""Page annotation model: parsing, validation, serialization, enrichment.

Two XML dialects are handled here.  The *flat* dialect is the storage format
for raw page annotations::

    <page id="ID" width="W" height="H">
      <panel xmin=".." ymin=".." xmax=".." ymax=".." [order=".."] [caption=".."]/>
      <character name="NAME" xmin=".." ymin=".." xmax=".." ymax=".."/>
      <face name="NAME" xmin=".." ymin=".." xmax=".." ymax=".."/>
      <text xmin=".." ymin=".." xmax=".." ymax="..">CONTENT</text>
      <link text_index="I" character="NAME"/>
    </page>

The *enriched* dialect nests dialogue into reading order for downstream
captioning: panel elements appear in reading order, characters nest under the
panel containing them, and each character's dialogue lines nest under it::

    <page id="ID" width="W" height="H">
      <panel order="POS" xmin=".." ymin=".." xmax=".." ymax="..">
        <character name="NAME" xmin=".." ...>
          <text xmin=".." ...>CONTENT</text>
        </character>
        <text xmin=".." ...>STRAY LINE</text>
      </panel>
    </page>

All coordinates are integer pixels, origin top-left, half-open on the
right/bottom edge (``xmax``/``ymax`` may equal the page extent).  Fractional
coordinates are rejected rather than rounded so parsing stays lossless.

Everything in this module is immutable after construction; parsing and
serialization are pure functions and safe to call concurrently.
"""

from __future__ import annotations

import operator
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

from .errors import AnnotationParseError, AnnotationValidationError, DataError

__all__ = [
    "BBox",
    "PanelAnnotation",
    "NamedRegion",
    "TextRegion",
    "DialogLink",
    "PageAnnotation",
    "Violation",
    "UnknownElementWarning",
    "validate_page_annotation",
    "parse_page_annotation",
    "serialize_page_annotation",
    "EnrichedCharacter",
    "EnrichedPanel",
    "EnrichedPageXML",
    "build_enriched_xml",
]


class UnknownElementWarning(UserWarning):
    """Raised (as a warning) for XML elements outside the documented schema."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned integer pixel box, origin top-left, half-open right/bottom."""

    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def __post_init__(self):
        for name in ("xmin", "ymin", "xmax", "ymax"):
            # operator.index accepts any integral type and rejects floats.
            object.__setattr__(self, name, operator.index(getattr(self, name)))

    @property
    def width(self) -> int:
        return self.xmax - self.xmin

    @property
    def height(self) -> int:
        return self.ymax - self.ymin

    @property
    def area(self) -> int:
        return max(0, self.width) * max(0, self.height)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)

    def contains_point(self, x: float, y: float) -> bool:
        """Closed containment test, used for center-in-box assignment."""
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def intersection_area(self, other: "BBox") -> int:
        w = min(self.xmax, other.xmax) - max(self.xmin, other.xmin)
        h = min(self.ymax, other.ymax) - max(self.ymin, other.ymin)
        return max(0, w) * max(0, h)

    def shifted(self, dx: int, dy: int) -> "BBox":
        return BBox(self.xmin + dx, self.ymin + dy, self.xmax + dx, self.ymax + dy)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass(frozen=True)
class PanelAnnotation:
    box: BBox
    order_index: int | None = None
    caption: str | None = None


@dataclass(frozen=True)
class NamedRegion:
    """A named box: a character or a face occurrence on the page."""

    name: str
    box: BBox


@dataclass(frozen=True)
class TextRegion:
    content: str
    box: BBox


@dataclass(frozen=True)
class DialogLink:
    """Associates texts[text_index] with the character who speaks it."""

    text_index: int
    character_name: str


@dataclass(frozen=True)
class PageAnnotation:
    """A fully parsed page: panels, characters, faces, texts, speaker links."""

    page_id: str
    width: int
    height: int
    panels: tuple[PanelAnnotation, ...] = ()
    characters: tuple[NamedRegion, ...] = ()
    faces: tuple[NamedRegion, ...] = ()
    texts: tuple[TextRegion, ...] = ()
    dialog_links: tuple[DialogLink, ...] = ()

    def __post_init__(self):
        for name in ("panels", "characters", "faces", "texts", "dialog_links"):
            object.__setattr__(self, name, tuple(getattr(self, name)))


@dataclass(frozen=True)
class Violation:
    """One named invariant violation, pointing at the offending element."""

    code: str
    element: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] {self.element}: {self.message}"


def _check_box(box: BBox, extent: tuple[int, int], element: str, out: list[Violation]) -> None:
    width, height = extent
    if box.xmin >= box.xmax or box.ymin >= box.ymax:
        out.append(Violation("inverted-box", element, f"degenerate box {box.as_tuple()}"))
        return
    if box.xmin < 0 or box.ymin < 0 or box.xmax > width or box.ymax > height:
        out.append(
            Violation(
                "box-out-of-bounds",
                element,
                f"box {box.as_tuple()} exceeds page extent {width}x{height}",
            )
        )


def validate_page_annotation(a: PageAnnotation) -> tuple[Violation, ...]:
    """Check every structural invariant; return one named violation per breach.

    Codes: ``nonpositive-page-extent``, ``inverted-box``, ``box-out-of-bounds``,
    ``negative-order-index``, ``order-not-permutation``, ``dangling-link-text``,
    ``dangling-link-character``.
    """
    out: list[Violation] = []
    if a.width <= 0 or a.height <= 0:
        out.append(
            Violation("nonpositive-page-extent", "page", f"extent {a.width}x{a.height}")
        )
    extent = (a.width, a.height)

    for i, panel in enumerate(a.panels):
        _check_box(panel.box, extent, f"panel[{i}]", out)
        if panel.order_index is not None and panel.order_index < 0:
            out.append(
                Violation(
                    "negative-order-index", f"panel[{i}]", f"order {panel.order_index}"
                )
            )
    orders = [p.order_index for p in a.panels if p.order_index is not None]
    if orders and sorted(orders) != list(range(len(a.panels))):
        out.append(
            Violation(
                "order-not-permutation",
                "page",
                f"order indices {orders} are not a permutation of 0..{len(a.panels) - 1}",
            )
        )

    for i, ch in enumerate(a.characters):
        _check_box(ch.box, extent, f"character[{i}] ({ch.name!r})", out)
    for i, fc in enumerate(a.faces):
        _check_box(fc.box, extent, f"face[{i}] ({fc.name!r})", out)
    for i, tx in enumerate(a.texts):
        _check_box(tx.box, extent, f"text[{i}]", out)

    character_names = {c.name for c in a.characters}
    for i, link in enumerate(a.dialog_links):
        if not 0 <= link.text_index < len(a.texts):
            out.append(
                Violation(
                    "dangling-link-text",
                    f"link[{i}]",
                    f"text_index {link.text_index} out of range",
                )
            )
        if link.character_name not in character_names:
            out.append(
                Violation(
                    "dangling-link-character",
                    f"link[{i}]",
                    f"unknown character {link.character_name!r}",
                )
            )
    return tuple(out)


_KNOWN_PAGE_CHILDREN = {"panel", "character", "face", "text", "link"}


def _require_attr(elem: ET.Element, name: str, element_desc: str) -> str:
    value = elem.get(name)
    if value is None:
        raise AnnotationValidationError(
            [Violation("missing-attribute", element_desc, f"attribute {name!r} required")]
        )
    return value


def _int_attr(elem: ET.Element, name: str, element_desc: str) -> int:
    raw = _require_attr(elem, name, element_desc)
    try:
        return int(raw)
    except ValueError:
        raise AnnotationValidationError(
            [
                Violation(
                    "non-integer-coordinate",
                    element_desc,
                    f"attribute {name}={raw!r} is not an integer",
                )
            ]
        ) from None


def _box_from_attrs(elem: ET.Element, element_desc: str) -> BBox:
    return BBox(
        _int_attr(elem, "xmin", element_desc),
        _int_attr(elem, "ymin", element_desc),
        _int_attr(elem, "xmax", element_desc),
        _int_attr(elem, "ymax", element_desc),
    )


def parse_page_annotation(xml_text: str) -> PageAnnotation:
    """Parse the flat annotation dialect into a validated PageAnnotation.

    Unknown elements are skipped with an UnknownElementWarning.  Malformed XML
    raises AnnotationParseError (with line/column); a well-formed document that
    breaks an invariant raises AnnotationValidationError naming the element.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as e:
        line, column = e.position if e.position else (None, None)
        raise AnnotationParseError(f"malformed XML: {e.msg}", line, column) from e

    if root.tag != "page":
        raise AnnotationValidationError(
            [Violation("unexpected-root", root.tag, "root element must be <page>")]
        )

    page_id = _require_attr(root, "id", "page")
    width = _int_attr(root, "width", "page")
    height = _int_attr(root, "height", "page")

    panels: list[PanelAnnotation] = []
    characters: list[NamedRegion] = []
    faces: list[NamedRegion] = []
    texts: list[TextRegion] = []
    links: list[DialogLink] = []

    for child in root:
        tag = child.tag
        if tag == "panel":
            desc = f"panel[{len(panels)}]"
            order = child.get("order")
            panels.append(
                PanelAnnotation(
                    box=_box_from_attrs(child, desc),
                    order_index=_int_attr(child, "order", desc) if order is not None else None,
                    caption=child.get("caption"),
                )
            )
        elif tag == "character":
            desc = f"character[{len(characters)}]"
            characters.append(
                NamedRegion(_require_attr(child, "name", desc), _box_from_attrs(child, desc))
            )
        elif tag == "face":
            desc = f"face[{len(faces)}]"
            faces.append(
                NamedRegion(_require_attr(child, "name", desc), _box_from_attrs(child, desc))
            )
        elif tag == "text":
            desc = f"text[{len(texts)}]"
            texts.append(TextRegion(child.text or "", _box_from_attrs(child, desc)))
        elif tag == "link":
            desc = f"link[{len(links)}]"
            links.append(
                DialogLink(
                    _int_attr(child, "text_index", desc),
                    _require_attr(child, "character", desc),
                )
            )
        else:
            warnings.warn(
                f"ignoring unknown element <{tag}> in page {page_id!r}",
                UnknownElementWarning,
                stacklevel=2,
            )

    annotation = PageAnnotation(
        page_id=page_id,
        width=width,
        height=height,
        panels=tuple(panels),
        characters=tuple(characters),
        faces=tuple(faces),
        texts=tuple(texts),
        dialog_links=tuple(links),
    )
    violations = validate_page_annotation(annotation)
    if violations:
        raise AnnotationValidationError(violations)
    return annotation


def _set_box_attrs(elem: ET.Element, box: BBox) -> None:
    elem.set("xmin", str(box.xmin))
    elem.set("ymin", str(box.ymin))
    elem.set("xmax", str(box.xmax))
    elem.set("ymax", str(box.ymax))


def serialize_page_annotation(a: PageAnnotation) -> str:
    """Emit the flat dialect. Refuses invalid annotations with the full report.

    Round-trips: ``parse_page_annotation(serialize_page_annotation(a)) == a``.
    """
    violations = validate_page_annotation(a)
    if violations:
        raise AnnotationValidationError(violations)

    root = ET.Element("page", id=a.page_id, width=str(a.width), height=str(a.height))
    for panel in a.panels:
        elem = ET.SubElement(root, "panel")
        if panel.order_index is not None:
            elem.set("order", str(panel.order_index))
        _set_box_attrs(elem, panel.box)
        if panel.caption is not None:
            elem.set("caption", panel.caption)
    for ch in a.characters:
        elem = ET.SubElement(root, "character", name=ch.name)
        _set_box_attrs(elem, ch.box)
    for fc in a.faces:
        elem = ET.SubElement(root, "face", name=fc.name)
        _set_box_attrs(elem, fc.box)
    for tx in a.texts:
        elem = ET.SubElement(root, "text")
        _set_box_attrs(elem, tx.box)
        elem.text = tx.content
    for link in a.dialog_links:
        ET.SubElement(
            root, "link", text_index=str(link.text_index), character=link.character_name
        )
    ET.indent(root)
    return ET.tostring(root, encoding="unicode")


# --- enriched reading-order tree -------------------------------------------


@dataclass(frozen=True)
class EnrichedCharacter:
    name: str
    box: BBox
    texts: tuple[TextRegion, ...] = ()


@dataclass(frozen=True)
class EnrichedPanel:
    """One panel in reading order with its characters and dialogue nested."""

    box: BBox
    position: int  # 0-based position in reading order
    source_index: int  # index of the panel in the flat annotation
    characters: tuple[EnrichedCharacter, ...] = ()
    texts: tuple[TextRegion, ...] = ()  # dialogue whose speaker is absent


@dataclass(frozen=True)
class EnrichedPageXML:
    """Reading-order page tree (panel -> character -> text).

    Characters or texts whose box center falls inside no panel are kept in the
    unassigned overflow lists rather than dropped; they are not serialized.
    """

    page_id: str
    width: int
    height: int
    panels: tuple[EnrichedPanel, ...] = ()
    unassigned_characters: tuple[NamedRegion, ...] = ()
    unassigned_texts: tuple[TextRegion, ...] = ()

    @property
    def panel_count(self) -> int:
        return len(self.panels)

    def to_string(self) -> str:
        root = ET.Element(
            "page", id=self.page_id, width=str(self.width), height=str(self.height)
        )
        for panel in self.panels:
            p = ET.SubElement(root, "panel", order=str(panel.position))
            _set_box_attrs(p, panel.box)
            for ch in panel.characters:
                c = ET.SubElement(p, "character", name=ch.name)
                _set_box_attrs(c, ch.box)
                for tx in ch.texts:
                    t = ET.SubElement(c, "text")
                    _set_box_attrs(t, tx.box)
                    t.text = tx.content
            for tx in panel.texts:
                t = ET.SubElement(p, "text")
                _set_box_attrs(t, tx.box)
                t.text = tx.content
        ET.indent(root)
        return ET.tostring(root, encoding="unicode")


def _assign_to_panel(box: BBox, ordered: list[tuple[int, BBox]]) -> int | None:
    """Return the reading position of the panel owning ``box``, else None.

    Ownership: the box center lies inside the panel box (closed test); among
    candidates, the largest intersection area wins, earliest reading position
    breaking exact ties.
    """
    cx, cy = box.center
    best_pos: int | None = None
    best_area = -1
    for pos, (_, panel_box) in enumerate(ordered):
        if panel_box.contains_point(cx, cy):
            area = panel_box.intersection_area(box)
            if area > best_area:
                best_area = area
                best_pos = pos
    return best_pos


def build_enriched_xml(a: PageAnnotation, order: "list[int] | tuple[int, ...]") -> EnrichedPageXML:
    """Nest characters and dialogue under panels emitted in reading order.

    ``order`` lists panel indices in reading order (first element = first
    panel read).  A text nests under its linked speaker when that speaker sits
    in the text's panel; otherwise it attaches at panel level so dialogue
    survives for captioning.
    """
    order = list(order)
    if sorted(order) != list(range(len(a.panels))):
        raise DataError(
            f"order {order} is not a permutation of panel indices 0..{len(a.panels) - 1}"
        )

    ordered = [(idx, a.panels[idx].box) for idx in order]

    # character occurrence -> reading position (or None)
    char_panel: list[int | None] = []
    unassigned_characters: list[NamedRegion] = []
    panel_characters: list[list[tuple[NamedRegion, list[TextRegion]]]] = [
        [] for _ in ordered
    ]
    for ch in a.characters:
        pos = _assign_to_panel(ch.box, ordered)
        char_panel.append(pos)
        if pos is None:
            unassigned_characters.append(ch)
        else:
            panel_characters[pos].append((ch, []))

    speaker_of: dict[int, str] = {}
    for link in a.dialog_links:
        speaker_of.setdefault(link.text_index, link.character_name)

    panel_stray_texts: list[list[TextRegion]] = [[] for _ in ordered]
    unassigned_texts: list[TextRegion] = []
    for i, tx in enumerate(a.texts):
        pos = _assign_to_panel(tx.box, ordered)
        if pos is None:
            unassigned_texts.append(tx)
            continue
        speaker = speaker_of.get(i)
        placed = False
        if speaker is not None:
            for ch, lines in panel_characters[pos]:
                if ch.name == speaker:
                    lines.append(tx)
                    placed = True
                    break
        if not placed:
            panel_stray_texts[pos].append(tx)

    panels = tuple(
        EnrichedPanel(
            box=panel_box,
            position=pos,
            source_index=idx,
            characters=tuple(
                EnrichedCharacter(ch.name, ch.box, tuple(lines))
                for ch, lines in panel_characters[pos]
            ),
            texts=tuple(panel_stray_texts[pos]),
        )
        for pos, (idx, panel_box) in enumerate(ordered)
    )
    return EnrichedPageXML(
        page_id=a.page_id,
        width=a.width,
        height=a.height,
        panels=panels,
        unassigned_characters=tuple(unassigned_characters),
        unassigned_texts=tuple(unassigned_texts),
    )
