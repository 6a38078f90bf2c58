"""Reading-order serialization: raster scan, XY-cut layout parsing, metrics.

Two orderings are produced from word boxes alone. The raster scan groups
words into lines by vertical overlap and reads left-to-right, top-to-bottom.
The layout-aware path recursively splits the page along its widest empty
gap (XY-cut), detects aligned grids as tables before cutting through them,
and reads columns top-to-bottom and table cells row-major, which keeps the
words of one cell contiguous in the output.

All thresholds are in normalized [0, 1000] coordinate units and live in
``SerializerConfig``. Ties everywhere break by original word index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vrdu.docmodel import BBox, Document, Segment, union_bbox


@dataclass(frozen=True)
class SerializerConfig:
    line_overlap: float = 0.5  # fraction of the smaller height two words must share
    gap_threshold: float = 12.0  # minimum empty gap width for an XY-cut
    col_run_gap: float = 10.0  # x-gap separating runs within a line (table detection)
    row_band_gap: float = 4.0  # y-gap separating table row bands
    overlap_threshold: float = 0.5  # x-interval overlap fraction for column clustering
    table_coverage: float = 0.8  # fraction of words that must sit in aligned columns


@dataclass(frozen=True)
class ReadingOrder:
    permutation: tuple[int, ...]
    method: str

    def __post_init__(self):
        if sorted(self.permutation) != list(range(len(self.permutation))):
            raise ValueError("reading order is not a permutation")


@dataclass(frozen=True)
class OrderQuality:
    kendall_tau: float
    pair_accuracy: float
    exact_match: bool

    def as_dict(self) -> dict:
        return {
            "kendall_tau": self.kendall_tau,
            "pair_accuracy": self.pair_accuracy,
            "exact_match": self.exact_match,
        }


# ---------------------------------------------------------------------------
# line grouping and raster scan


def _share_line(a: BBox, b: BBox, min_overlap: float) -> bool:
    overlap = min(a.y1, b.y1) - max(a.y0, b.y0)
    smaller = min(a.h, b.h)
    if smaller == 0:
        return overlap >= 0
    return overlap >= min_overlap * smaller


def group_lines(boxes: list[BBox], ids: list[int] | None = None,
                min_overlap: float = 0.5) -> list[list[int]]:
    """Partition word ids into lines (transitive closure of vertical overlap),
    returned top-to-bottom with members sorted left-to-right."""
    if ids is None:
        ids = list(range(len(boxes)))
    n = len(ids)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if _share_line(boxes[ids[i]], boxes[ids[j]], min_overlap):
                parent[find(i)] = find(j)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(ids[i])

    lines = list(groups.values())
    for line in lines:
        line.sort(key=lambda w: (boxes[w].x0, w))
    lines.sort(key=lambda line: (union_bbox([boxes[w] for w in line]).y_center,
                                 min(line)))
    return lines


def raster_scan_order(doc: Document, cfg: SerializerConfig = SerializerConfig()) -> ReadingOrder:
    boxes = [w.bbox for w in doc.words]
    perm: list[int] = []
    for line in group_lines(boxes, min_overlap=cfg.line_overlap):
        perm.extend(line)
    return ReadingOrder(tuple(perm), "raster_scan")


# ---------------------------------------------------------------------------
# XY-cut and table detection


def _projection_gaps(intervals: list[tuple[int, int]]) -> list[tuple[float, float]]:
    """Empty gaps strictly between merged occupied intervals, as (start, end)."""
    if not intervals:
        return []
    intervals = sorted(intervals)
    gaps = []
    cur_end = intervals[0][1]
    for lo, hi in intervals[1:]:
        if lo > cur_end:
            gaps.append((cur_end, lo))
        cur_end = max(cur_end, hi)
    return gaps


def _widest_cut(boxes: list[BBox], ids: list[int], threshold: float):
    """Best (axis, position, width) cut for a region, or None.

    Horizontal (y) cuts take priority over vertical ones: splitting rows
    before columns keeps aligned grids row-major even when the column gap
    is wider than the row gap.
    """
    for axis in ("y", "x"):
        if axis == "x":
            intervals = [(boxes[i].x0, boxes[i].x1) for i in ids]
        else:
            intervals = [(boxes[i].y0, boxes[i].y1) for i in ids]
        best = None
        for lo, hi in _projection_gaps(intervals):
            width = hi - lo
            if width > threshold and (best is None or width > best[2]):
                best = (axis, (lo + hi) / 2.0, width)
        if best is not None:
            return best
    return None


def _runs_in_line(boxes: list[BBox], line: list[int], run_gap: float) -> list[list[int]]:
    runs: list[list[int]] = [[line[0]]]
    for w in line[1:]:
        prev = runs[-1]
        right_edge = max(boxes[p].x1 for p in prev)
        if boxes[w].x0 - right_edge >= run_gap:
            runs.append([w])
        else:
            prev.append(w)
    return runs


def _interval_overlap(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Overlap as a fraction of the smaller interval, so a short run still
    matches the wide column that contains it."""
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    smaller = min(a[1] - a[0], b[1] - b[0])
    if smaller <= 0:
        return 1.0
    return inter / smaller


def _detect_table(boxes: list[BBox], ids: list[int], cfg: SerializerConfig):
    """Return row-major cell word lists if the region is an aligned grid.

    A grid needs at least two x-interval clusters recurring across lines,
    at least two row bands separated by clear horizontal gaps, and nearly
    all words accounted for by the recurring columns.
    """
    lines = group_lines(boxes, ids, cfg.line_overlap)
    if len(lines) < 2:
        return None

    run_entries = []  # (line_index, interval, word_ids)
    for li, line in enumerate(lines):
        for run in _runs_in_line(boxes, line, cfg.col_run_gap):
            interval = (min(boxes[w].x0 for w in run), max(boxes[w].x1 for w in run))
            run_entries.append((li, interval, run))

    clusters: list[dict] = []  # {"interval", "lines", "runs"}
    for li, interval, run in run_entries:
        best, best_j = None, 0.0
        for c in clusters:
            j = _interval_overlap(interval, c["interval"])
            if j >= cfg.overlap_threshold and j > best_j:
                best, best_j = c, j
        if best is None:
            clusters.append({"interval": interval, "lines": {li}, "runs": [(li, run)]})
        else:
            lo = min(best["interval"][0], interval[0])
            hi = max(best["interval"][1], interval[1])
            best["interval"] = (lo, hi)
            best["lines"].add(li)
            best["runs"].append((li, run))

    columns = [c for c in clusters if len(c["lines"]) >= 2]
    if len(columns) < 2:
        return None

    covered = sum(len(run) for c in columns for _, run in c["runs"])
    if covered < cfg.table_coverage * len(ids):
        return None

    # row bands: full-width horizontal gaps within the region
    y_intervals = [(boxes[i].y0, boxes[i].y1) for i in ids]
    band_edges = [lo + (hi - lo) / 2.0
                  for lo, hi in _projection_gaps(y_intervals)
                  if hi - lo >= cfg.row_band_gap]
    if not band_edges:
        return None

    def band_of(y):
        return sum(1 for e in band_edges if y > e)

    n_bands = len(band_edges) + 1
    columns.sort(key=lambda c: c["interval"][0])

    # assign every word to (band, column); stray runs go to the closest column
    cells: dict[tuple[int, int], list[int]] = {}
    assigned: set[int] = set()
    for ci, c in enumerate(columns):
        for _, run in c["runs"]:
            for w in run:
                cells.setdefault((band_of(boxes[w].y_center), ci), []).append(w)
                assigned.add(w)
    for w in ids:
        if w in assigned:
            continue
        centers = [(c["interval"][0] + c["interval"][1]) / 2.0 for c in columns]
        ci = min(range(len(columns)), key=lambda k: abs(boxes[w].x_center - centers[k]))
        cells.setdefault((band_of(boxes[w].y_center), ci), []).append(w)

    bands_with_cols = {b for (b, _) in cells}
    multi = sum(1 for b in range(n_bands)
                if len({c for (bb, c) in cells if bb == b}) >= 2)
    if len(bands_with_cols) < 2 or multi < 2:
        return None

    ordered_cells = []
    for b in range(n_bands):
        for ci in range(len(columns)):
            if (b, ci) in cells:
                words = cells[(b, ci)]
                flat = [w for ln in group_lines(boxes, words, cfg.line_overlap) for w in ln]
                ordered_cells.append(flat)
    return ordered_cells


def _xy_cut(boxes: list[BBox], ids: list[int], cfg: SerializerConfig,
            out: list[Segment]) -> None:
    if not ids:
        return
    cells = _detect_table(boxes, ids, cfg)
    if cells is not None:
        for cell in cells:
            out.append(Segment("table_cell", tuple(cell),
                               union_bbox([boxes[w] for w in cell])))
        return
    cut = _widest_cut(boxes, ids, cfg.gap_threshold)
    if cut is None:
        flat = [w for ln in group_lines(boxes, ids, cfg.line_overlap) for w in ln]
        out.append(Segment("paragraph", tuple(flat),
                           union_bbox([boxes[w] for w in ids])))
        return
    axis, pos, _ = cut
    if axis == "x":
        first = [i for i in ids if boxes[i].x_center < pos]
        second = [i for i in ids if boxes[i].x_center >= pos]
    else:
        first = [i for i in ids if boxes[i].y_center < pos]
        second = [i for i in ids if boxes[i].y_center >= pos]
    _xy_cut(boxes, first, cfg, out)
    _xy_cut(boxes, second, cfg, out)


def layout_parse(doc: Document, cfg: SerializerConfig = SerializerConfig()) -> list[Segment]:
    """Segment the page via recursive XY-cut with grid-aware table handling.

    The returned segment list is already in reading order: vertical splits
    emit the left part (column) in full before the right, horizontal splits
    top before bottom, and table cells appear row-major.
    """
    boxes = [w.bbox for w in doc.words]
    out: list[Segment] = []
    _xy_cut(boxes, list(range(len(boxes))), cfg, out)
    return out


def reading_order(doc: Document, segments: list[Segment],
                  cfg: SerializerConfig = SerializerConfig()) -> ReadingOrder:
    """Concatenate per-segment raster orders following the segment list
    order produced by layout_parse."""
    seen: list[int] = []
    for seg in segments:
        seen.extend(seg.word_ids)
    if sorted(seen) != list(range(len(doc.words))):
        raise ValueError("segments do not partition the document words")
    boxes = [w.bbox for w in doc.words]
    perm: list[int] = []
    for seg in segments:
        for line in group_lines(boxes, list(seg.word_ids), cfg.line_overlap):
            perm.extend(line)
    return ReadingOrder(tuple(perm), "layout_parse")


def layout_order(doc: Document, cfg: SerializerConfig = SerializerConfig()) -> ReadingOrder:
    return reading_order(doc, layout_parse(doc, cfg), cfg)


# ---------------------------------------------------------------------------
# order metrics


def order_quality(pred: ReadingOrder, gold) -> OrderQuality:
    gold = tuple(gold)
    perm = pred.permutation
    if len(perm) != len(gold):
        raise ValueError(f"length mismatch: {len(perm)} vs {len(gold)}")
    if sorted(gold) != list(range(len(gold))):
        raise ValueError("gold order is not a permutation")
    n = len(gold)
    exact = perm == gold
    if n < 2:
        return OrderQuality(1.0, 1.0, exact)
    rank_pred = np.empty(n, dtype=np.int64)
    rank_gold = np.empty(n, dtype=np.int64)
    rank_pred[list(perm)] = np.arange(n)
    rank_gold[list(gold)] = np.arange(n)
    dp = rank_pred[:, None] - rank_pred[None, :]
    dg = rank_gold[:, None] - rank_gold[None, :]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    concordant = int(((dp * dg > 0) & upper).sum())
    total = n * (n - 1) // 2
    discordant = total - concordant
    tau = 1.0 - 2.0 * discordant / total
    return OrderQuality(tau, concordant / total, exact)
