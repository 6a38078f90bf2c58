"""Document domain model and FUNSD-compatible OCR-JSON ingestion.

The on-disk schema (all coordinates in page pixels):

    {
      "words": [{"text": str, "box": [x0, y0, x1, y1], "label": str?}, ...],
      "meta": {                                # extension block, all optional
        "page_size": [width, height],
        "gold_order": [word indices],
        "segments": [{"kind": str, "word_ids": [...]}],
        "class_label": int,
        "qa": {"question": str, "answer_start": int, "answer_end": int},
        "image": "relative/path.png"
      }
    }

Real FUNSD files, which use a top-level "form" list of entries each
carrying nested "words", also load: entry words are flattened in file
order, each entry becomes a segment, and entry labels expand to BIO tags
(first word B-, rest I-; "other" maps to O).

Word "label" in the flat schema is a full BIO tag. Coordinates are
normalized into [0, 1000] at load time. Documents are immutable after
load and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SEGMENT_KINDS = ("paragraph", "table_cell", "list_item", "title", "figure")


class DocumentError(ValueError):
    """Malformed OCR JSON or invariant violation during ingestion."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with coordinates normalized to [0, 1000]."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if not (0 <= v <= 1000):
                raise DocumentError(f"coordinate {name}={v} outside [0, 1000]")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise DocumentError(f"inverted box ({self.x0},{self.y0},{self.x1},{self.y1})")

    @property
    def w(self) -> int:
        return self.x1 - self.x0

    @property
    def h(self) -> int:
        return self.y1 - self.y0

    @property
    def x_center(self) -> int:
        return (self.x0 + self.x1) // 2

    @property
    def y_center(self) -> int:
        return (self.y0 + self.y1) // 2

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


ZERO_BOX = BBox(0, 0, 0, 0)


@dataclass(frozen=True)
class Word:
    text: str
    bbox: BBox
    segment_id: int | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise DocumentError("word text empty after whitespace trimming")


@dataclass(frozen=True)
class Segment:
    kind: str
    word_ids: tuple[int, ...]
    bbox: BBox

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise DocumentError(f"unknown segment kind {self.kind!r}")
        if not self.word_ids:
            raise DocumentError("segment with no words")


@dataclass(frozen=True)
class Annotations:
    bio_tags: tuple[str, ...] | None = None
    qa: dict | None = None
    class_label: int | None = None


@dataclass(frozen=True)
class Document:
    words: tuple[Word, ...]
    image: np.ndarray  # height x width x channels, uint8
    raw_size: tuple[int, int]  # (width, height) in pixels
    pixel_boxes: tuple[tuple[int, int, int, int], ...]  # original pixel-space boxes
    segments: tuple[Segment, ...] = ()
    gold_order: tuple[int, ...] | None = None
    annotations: Annotations = field(default_factory=Annotations)

    def __post_init__(self):
        if self.gold_order is not None:
            if sorted(self.gold_order) != list(range(len(self.words))):
                raise DocumentError("gold_order is not a permutation of word indices")
        if self.annotations.bio_tags is not None:
            if len(self.annotations.bio_tags) != len(self.words):
                raise DocumentError("BIO tag count does not match word count")
            _check_bio(self.annotations.bio_tags)

    def __len__(self) -> int:
        return len(self.words)


def _check_bio(tags) -> None:
    prev_type = None
    for i, tag in enumerate(tags):
        if tag == "O":
            prev_type = None
            continue
        if not (tag.startswith("B-") or tag.startswith("I-")) or len(tag) < 3:
            raise DocumentError(f"malformed BIO tag {tag!r} at word {i}")
        if tag.startswith("I-") and prev_type != tag[2:]:
            raise DocumentError(f"I- tag {tag!r} at word {i} does not continue an entity")
        prev_type = tag[2:]


def normalize_coords(box, page_size: tuple[int, int]) -> BBox:
    """Scale a pixel-space (x0, y0, x1, y1) rectangle into [0, 1000].

    Each coordinate maps to floor(coord / extent * 1000), clamped; flooring
    keeps the mapping monotone.
    """
    pw, ph = page_size
    if pw <= 0 or ph <= 0:
        raise DocumentError(f"page extent must be positive, got {page_size}")
    x0, y0, x1, y1 = box

    def scale(v, extent):
        return int(min(1000, max(0, v * 1000 // extent)))

    return BBox(scale(x0, pw), scale(y0, ph), scale(x1, pw), scale(y1, ph))


def union_bbox(boxes) -> BBox:
    boxes = list(boxes)
    if not boxes:
        raise DocumentError("union of empty box list")
    return BBox(
        min(b.x0 for b in boxes),
        min(b.y0 for b in boxes),
        max(b.x1 for b in boxes),
        max(b.y1 for b in boxes),
    )


def synthesize_image(page_size: tuple[int, int], pixel_boxes) -> np.ndarray:
    """White page with black filled rectangles at word boxes.

    Stand-in page pixels for text-only corpora, so the visual path always
    has deterministic input.
    """
    pw, ph = page_size
    img = np.full((ph, pw, 1), 255, dtype=np.uint8)
    for x0, y0, x1, y1 in pixel_boxes:
        img[y0:y1, x0:x1, :] = 0
    return img


def load_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr[:, :, None]


def _flatten_form(form: list) -> tuple[list[dict], list[list[int]], list[str]]:
    words, groups, tags = [], [], []
    for entry in form:
        label = entry.get("label", "other")
        ids = []
        for j, w in enumerate(entry.get("words", [])):
            if not str(w.get("text", "")).strip():
                continue  # FUNSD contains empty word stubs
            ids.append(len(words))
            words.append(w)
            if label and label != "other":
                tags.append(("B-" if j == 0 else "I-") + label.upper())
            else:
                tags.append("O")
        if ids:
            groups.append(ids)
    return words, groups, tags


def load_ocr_json(path) -> Document:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DocumentError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e

    meta = raw.get("meta", {})
    form_groups: list[list[int]] = []
    bio_tags: list[str] | None = None

    if "form" in raw:
        entries, form_groups, tags = _flatten_form(raw["form"])
        if any(t != "O" for t in tags):
            bio_tags = tags
    elif "words" in raw:
        entries = raw["words"]
        if any("label" in w for w in entries):
            bio_tags = [w.get("label", "O") for w in entries]
    else:
        raise DocumentError(f"{path}: neither 'words' nor 'form' present")

    image = None
    if "image" in meta:
        image = load_image(path.parent / meta["image"])

    if "page_size" in meta:
        page_size = tuple(meta["page_size"])
    elif image is not None:
        page_size = (image.shape[1], image.shape[0])
    else:
        # no size information: treat coordinates as already normalized
        page_size = (1000, 1000)

    words: list[Word] = []
    pixel_boxes: list[tuple[int, int, int, int]] = []
    for i, entry in enumerate(entries):
        text = str(entry.get("text", "")).strip()
        if not text:
            raise DocumentError(f"word {i}: empty text")
        box = entry.get("box")
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise DocumentError(f"word {i}: malformed box {box!r}")
        try:
            bbox = normalize_coords(box, page_size)
        except DocumentError as e:
            raise DocumentError(f"word {i}: {e}") from e
        if box[2] < box[0] or box[3] < box[1]:
            raise DocumentError(f"word {i}: inverted box {box!r}")
        words.append(Word(text=text, bbox=bbox))
        pixel_boxes.append(tuple(int(v) for v in box))

    segments: list[Segment] = []
    seg_specs = meta.get("segments")
    if seg_specs is None and form_groups:
        seg_specs = [{"kind": "paragraph", "word_ids": ids} for ids in form_groups]
    if seg_specs:
        seen: set[int] = set()
        seg_assign: dict[int, int] = {}
        for si, spec in enumerate(seg_specs):
            ids = tuple(int(i) for i in spec["word_ids"])
            overlap = seen.intersection(ids)
            if overlap:
                raise DocumentError(f"word {min(overlap)} assigned to more than one segment")
            seen.update(ids)
            segments.append(
                Segment(
                    kind=spec.get("kind", "paragraph"),
                    word_ids=ids,
                    bbox=union_bbox([words[i].bbox for i in ids]),
                )
            )
            for wid in ids:
                seg_assign[wid] = si
        words = [
            Word(w.text, w.bbox, seg_assign.get(i)) if i in seg_assign else w
            for i, w in enumerate(words)
        ]

    if image is None:
        image = synthesize_image(page_size, pixel_boxes)

    gold_order = meta.get("gold_order")
    annotations = Annotations(
        bio_tags=tuple(bio_tags) if bio_tags else None,
        qa=meta.get("qa"),
        class_label=meta.get("class_label"),
    )
    return Document(
        words=tuple(words),
        image=image,
        raw_size=(int(page_size[0]), int(page_size[1])),
        pixel_boxes=tuple(pixel_boxes),
        segments=tuple(segments),
        gold_order=tuple(gold_order) if gold_order is not None else None,
        annotations=annotations,
    )


def document_to_json(doc: Document) -> dict:
    """Serialize back to the flat schema; load_ocr_json round-trips it."""
    out_words = []
    for i, (w, pbox) in enumerate(zip(doc.words, doc.pixel_boxes)):
        entry = {"text": w.text, "box": list(pbox)}
        if doc.annotations.bio_tags is not None:
            entry["label"] = doc.annotations.bio_tags[i]
        out_words.append(entry)
    meta: dict = {"page_size": list(doc.raw_size)}
    if doc.gold_order is not None:
        meta["gold_order"] = list(doc.gold_order)
    if doc.segments:
        meta["segments"] = [
            {"kind": s.kind, "word_ids": list(s.word_ids)} for s in doc.segments
        ]
    if doc.annotations.class_label is not None:
        meta["class_label"] = doc.annotations.class_label
    if doc.annotations.qa is not None:
        meta["qa"] = doc.annotations.qa
    return {"words": out_words, "meta": meta}


def save_ocr_json(doc: Document, path) -> None:
    Path(path).write_text(json.dumps(document_to_json(doc)))
