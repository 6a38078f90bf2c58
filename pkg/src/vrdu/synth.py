"""Synthetic document generator with exact ground truth.

Pages are laid out in pixel space (600 x 800) from four layout families:

  * single_column - one block of left-to-right lines;
  * two_column    - two columns whose lines interleave vertically, so a
    raster scan mixes the columns while the proper order reads the left
    column in full first;
  * table         - an aligned grid with 1-2 line cells, read row-major
    with each cell's words contiguous;
  * mixed         - a title, a paragraph, and a table stacked vertically.

Words are stored in raster-scan file order (what an OCR tool would emit);
``gold_order`` holds the human reading order. Text is a stream of filler
words with embedded key/value pairs: a key word from a small key
vocabulary followed by one to three value words. Keys tag B-Q, values
B-A/I-A, filler O, which yields entity spans for key-information
extraction, an extractive QA pair per document, and the family id as the
classification label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vrdu.docmodel import Annotations, Document, Word, normalize_coords, synthesize_image
from vrdu.embedder import SPECIAL_TOKENS, Vocab
from vrdu.rng import RngStream
from vrdu.serializer import SerializerConfig, raster_scan_order

PAGE_W, PAGE_H = 600, 800
WORD_H = 10
CHAR_W = 6

FAMILIES = ("single_column", "two_column", "table", "mixed")

N_KEYS = 8


def build_synthetic_vocab(size: int = 200) -> Vocab:
    keys = [f"key{i}" for i in range(N_KEYS)]
    n_fill = size - len(SPECIAL_TOKENS) - len(keys)
    if n_fill <= 0:
        raise ValueError(f"vocab size {size} too small")
    fillers = [f"w{i:03d}" for i in range(n_fill)]
    return Vocab(list(SPECIAL_TOKENS) + keys + fillers)


@dataclass(frozen=True)
class SyntheticSpec:
    family: str = "mixed"  # one of FAMILIES, or "all" to cycle
    vocab_size: int = 200
    tokens_per_doc: int = 50

    def __post_init__(self):
        if self.family not in FAMILIES + ("all",):
            raise ValueError(f"unknown layout family {self.family!r}")
        if self.tokens_per_doc < 4:
            raise ValueError("tokens_per_doc too small")


@dataclass
class _PlacedWord:
    text: str
    box: tuple[int, int, int, int]
    tag: str


class _TextEmitter:
    """Filler stream with embedded key/value pairs and their BIO tags.

    Words come in indivisible groups (a lone filler, or a key plus its
    values) so the layout code can keep every entity on a single line;
    entities crossing lines would shatter under raster file order.
    """

    def __init__(self, vocab: Vocab, stream: RngStream):
        self.vocab = vocab
        self.stream = stream
        self.kv_pairs: list[tuple[str, list[int]]] = []  # (key text, value emit ids)
        self.emitted = 0

    def next_group(self) -> list[tuple[str, str]]:
        if self.stream.random() < 0.3:
            key = f"key{int(self.stream.integers(0, N_KEYS))}"
            n_vals = int(self.stream.integers(1, 4))
            group = [(key, "B-Q")]
            for j in range(n_vals):
                group.append((self.filler_word(), "B-A" if j == 0 else "I-A"))
            return group
        return [(self.filler_word(), "O")]

    def record(self, group: list[tuple[str, str]]) -> None:
        """Track emitted key/value pairs for QA span generation."""
        values = []
        key = None
        for text, tag in group:
            if tag == "B-Q":
                key = text
            elif tag in ("B-A", "I-A"):
                values.append(self.emitted)
            self.emitted += 1
        if key is not None and values:
            self.kv_pairs.append((key, values))

    def filler_word(self) -> str:
        n_fill = len(self.vocab) - len(SPECIAL_TOKENS) - N_KEYS
        return f"w{int(self.stream.integers(0, n_fill)):03d}"


def _word_width(text: str) -> int:
    return CHAR_W * len(text)


def _fill_line(emitter: _TextEmitter, x: int, y: int, x_limit: int, budget: int,
               out: list[_PlacedWord], word_gap: int = 4) -> int:
    """Place words on one line until the x limit or the budget; returns the
    number placed."""
    placed = 0
    while placed < budget:
        group = emitter.next_group()
        if len(group) > budget - placed:
            # dropping trailing values keeps the group's tags well-formed
            group = group[: budget - placed]
        width = sum(_word_width(t) for t, _ in group) + word_gap * (len(group) - 1)
        if x + width > x_limit:
            break
        emitter.record(group)
        for text, tag in group:
            w = _word_width(text)
            out.append(_PlacedWord(text, (x, y, x + w, y + WORD_H), tag))
            x += w + word_gap
            placed += 1
    return placed


def _finalize(placed: list[_PlacedWord], gold_internal: list[int], family: str,
              stream: RngStream, qa_from_kv: list[tuple[str, list[int]]] | None = None
              ) -> Document:
    """Reorder words into raster file order, remap gold/labels, build the doc."""
    page = (PAGE_W, PAGE_H)
    tmp_words = tuple(
        Word(p.text, normalize_coords(p.box, page)) for p in placed
    )
    tmp_doc = Document(
        words=tmp_words,
        image=np.zeros((1, 1, 1), dtype=np.uint8),
        raw_size=page,
        pixel_boxes=tuple(p.box for p in placed),
    )
    perm = raster_scan_order(tmp_doc).permutation  # file order
    new_index = {old: new for new, old in enumerate(perm)}

    words = tuple(tmp_words[i] for i in perm)
    pixel_boxes = tuple(placed[i].box for i in perm)
    tags = tuple(placed[i].tag for i in perm)
    gold = tuple(new_index[i] for i in gold_internal)

    qa = None
    if qa_from_kv:
        key, values = qa_from_kv[int(stream.integers(0, len(qa_from_kv)))]
        if values:
            spans = sorted(new_index[v] for v in values)
            qa = {"question": key, "answer_start": spans[0], "answer_end": spans[-1]}

    image = synthesize_image(page, pixel_boxes)
    return Document(
        words=words,
        image=image,
        raw_size=page,
        pixel_boxes=pixel_boxes,
        gold_order=gold,
        annotations=Annotations(
            bio_tags=tags,
            qa=qa,
            class_label=FAMILIES.index(family),
        ),
    )


def _gen_block(emitter: _TextEmitter, budget: int, x0: int, x1: int, y0: int,
               line_step: int, out: list[_PlacedWord]) -> tuple[list[int], int]:
    """Sequential lines in [x0, x1) starting at y0; returns (emit order, next y)."""
    order: list[int] = []
    y = y0
    remaining = budget
    while remaining > 0 and y + WORD_H < PAGE_H - 20:
        before = len(out)
        placed = _fill_line(emitter, x0, y, x1, remaining, out)
        if placed == 0:
            break
        order.extend(range(before, before + placed))
        remaining -= placed
        y += line_step
    return order, y


def _gen_single_column(spec, stream, emitter) -> Document:
    out: list[_PlacedWord] = []
    order, _ = _gen_block(emitter, spec.tokens_per_doc, 40, PAGE_W - 40, 40, 18, out)
    if not order:
        raise ValueError("page cannot fit any words")
    return _finalize(out, order, "single_column", stream, emitter.kv_pairs)


def _gen_two_column(spec, stream, emitter) -> Document:
    out: list[_PlacedWord] = []
    half = spec.tokens_per_doc // 2
    # half-line vertical offset between the columns makes a raster scan
    # interleave them
    left, _ = _gen_block(emitter, half, 40, 280, 40, 18, out)
    right, _ = _gen_block(emitter, spec.tokens_per_doc - half, 320, 560, 49, 18, out)
    if not left or not right:
        raise ValueError("page cannot fit the requested two-column content")
    return _finalize(out, left + right, "two_column", stream, emitter.kv_pairs)


def _gen_table_block(spec, stream, emitter, out: list[_PlacedWord], y0: int,
                     budget: int) -> list[int]:
    """Aligned grid; column 0 holds keys, other cells hold values."""
    n_rows = int(stream.integers(2, 5))
    n_cols = int(stream.integers(2, 4))
    col_gap, row_gap = 24, 10
    x_start, x_end = 40, 560
    cw = (x_end - x_start - (n_cols - 1) * col_gap) // n_cols
    order: list[int] = []
    y = y0
    used = 0
    for r in range(n_rows):
        lines_per_cell = [int(stream.integers(1, 3)) for _ in range(n_cols)]
        band_lines = max(lines_per_cell)
        for c in range(n_cols):
            cx = x_start + c * (cw + col_gap)
            if c == 0:
                key = f"key{int(stream.integers(0, N_KEYS))}"
                order.append(len(out))
                out.append(_PlacedWord(key, (cx, y, cx + max(cw - 8, CHAR_W), y + WORD_H), "B-Q"))
                used += 1
                continue
            for ln in range(lines_per_cell[c]):
                if used >= budget:
                    break
                ly = y + ln * (WORD_H + 2)
                n_words = int(stream.integers(1, 3))
                x = cx
                for wi in range(n_words):
                    text = emitter.filler_word()
                    w = min(_word_width(text), cw // n_words - 2)
                    w = max(w, CHAR_W)
                    if x + w > cx + cw:
                        break
                    # one entity per cell line; a multi-line entity would
                    # shatter under raster file order
                    tag = "B-A" if wi == 0 else "I-A"
                    order.append(len(out))
                    out.append(_PlacedWord(text, (x, ly, x + w, ly + WORD_H), tag))
                    used += 1
                    x += w + 4
        y += band_lines * (WORD_H + 2) + row_gap
    return order


def _gen_table(spec, stream, emitter) -> Document:
    out: list[_PlacedWord] = []
    order = _gen_table_block(spec, stream, emitter, out, 60, spec.tokens_per_doc)
    return _finalize(out, order, "table", stream, None)


def _gen_mixed(spec, stream, emitter) -> Document:
    out: list[_PlacedWord] = []
    title_n = int(stream.integers(2, 5))
    torder, _ = _gen_block(emitter, title_n, 180, 460, 30, 18, out)
    para_budget = max(4, spec.tokens_per_doc // 3)
    porder, y_end = _gen_block(emitter, para_budget, 40, PAGE_W - 40, 70, 18, out)
    table_budget = max(6, spec.tokens_per_doc - title_n - para_budget)
    worder = _gen_table_block(spec, stream, emitter, out, y_end + 30, table_budget)
    return _finalize(out, torder + porder + worder, "mixed", stream, emitter.kv_pairs)


_GENERATORS = {
    "single_column": _gen_single_column,
    "two_column": _gen_two_column,
    "table": _gen_table,
    "mixed": _gen_mixed,
}


def gen_synthetic_document(spec: SyntheticSpec, family: str, seed: int,
                           doc_id: int, vocab: Vocab) -> Document:
    stream = RngStream(seed, f"doc/{doc_id}")
    emitter = _TextEmitter(vocab, stream)
    return _GENERATORS[family](spec, stream, emitter)


def gen_synthetic_corpus(spec: SyntheticSpec, n_docs: int, seed: int,
                         vocab: Vocab | None = None) -> list[Document]:
    """Deterministic corpus; family "all" cycles through the four families."""
    if vocab is None:
        vocab = build_synthetic_vocab(spec.vocab_size)
    docs = []
    for i in range(n_docs):
        family = spec.family if spec.family != "all" else FAMILIES[i % len(FAMILIES)]
        docs.append(gen_synthetic_document(spec, family, seed, i, vocab))
    return docs
