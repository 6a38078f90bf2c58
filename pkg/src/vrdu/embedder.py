"""Multi-modal input construction: tokens, patches, layout, combined sequence.

The input sequence has a textual part ([CLS] tokens... [SEP], at most
``max_text_len`` positions) and a fixed visual part of grid*grid = 49
patch tokens. Every token, textual or visual, carries a layout box in
[0, 1000]; visual tokens use their grid-cell rectangle and their own 1D
position index space 0..48. The combined representation is

    H = [T + L_text ; V + L_visual]

where T sums token/1D-position/type rows, V projects pooled patch
features and adds 1D-position/type rows, and L sums the x0/x1/width and
y0/y1/height coordinate table rows of the token's box. No normalization
is applied here, so H stays linear in every table.

The visual backbone is deliberately simple and deterministic: bilinear
resize to 224x224, 7x7 grid of mean-pooled cells, and a frozen random
linear map to the patch feature dimension. It stands in for a detection
backbone while preserving the 49-token interface.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vrdu.autodiff import Parameter, Tensor, add, linear, take_rows
from vrdu.docmodel import BBox, Document, ZERO_BOX
from vrdu.rng import RngStream
from vrdu.serializer import ReadingOrder

TYPE_TEXT = 0
TYPE_VISUAL = 1

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")


class Vocab:
    """Token table; id = line number in the vocabulary file."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for t in SPECIAL_TOKENS:
            if t not in self.index:
                raise ValueError(f"vocabulary missing special token {t}")
        self.pad_id = self.index["[PAD]"]
        self.unk_id = self.index["[UNK]"]
        self.cls_id = self.index["[CLS]"]
        self.sep_id = self.index["[SEP]"]
        self.mask_id = self.index["[MASK]"]
        self.special_ids = frozenset(self.index[t] for t in SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        return cls([ln for ln in lines if ln])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    def tokenize_word(self, text: str) -> list[int]:
        """Lowercased whole-word lookup with per-character fallback."""
        t = text.strip().lower()
        if t in self.index:
            return [self.index[t]]
        return [self.index.get(ch, self.unk_id) for ch in t]


@dataclass
class ModelDims:
    d: int = 64
    max_text_len: int = 512
    grid: int = 7
    patch_dim: int = 8
    image_channels: int = 1

    @property
    def hw(self) -> int:
        return self.grid * self.grid


def grid_cell_box(row: int, col: int, grid: int = 7) -> BBox:
    return BBox(
        1000 * col // grid,
        1000 * row // grid,
        1000 * (col + 1) // grid,
        1000 * (row + 1) // grid,
    )


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear resample of an HxWxC uint8 image to float64."""
    h, w = image.shape[:2]
    img = image.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def mean_pool_patches(image: np.ndarray, grid: int = 7, target: int = 224) -> np.ndarray:
    """Resize to target x target and mean-pool a grid x grid cell partition.

    Returns (grid*grid, channels) in [0, 1], flattened row-major.
    """
    if image.ndim == 2:
        image = image[:, :, None]
    resized = bilinear_resize(image, target, target) / 255.0
    cell = target // grid
    resized = resized[: grid * cell, : grid * cell]
    c = resized.shape[2]
    pooled = resized.reshape(grid, cell, grid, cell, c).mean(axis=(1, 3))
    return pooled.reshape(grid * grid, c)


class PatchEncoder:
    """Frozen random linear map from pooled cell means to patch features."""

    def __init__(self, dims: ModelDims, seed: int):
        stream = RngStream(seed, "patch-encoder")
        self.dims = dims
        self.weight = stream.normal((dims.image_channels, dims.patch_dim), std=1.0)
        self.bias = stream.normal((dims.patch_dim,), std=0.1)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        pooled = mean_pool_patches(image, self.dims.grid)
        return pooled @ self.weight + self.bias


@dataclass
class MultiModalSequence:
    """Discrete inputs of one example; embeddings are computed on demand."""

    token_ids: np.ndarray  # (N,) textual ids including [CLS]/[SEP]/[PAD]
    boxes: list[BBox]  # per textual token
    positions: np.ndarray  # (N,) textual 1D positions
    type_ids: np.ndarray  # (N,)
    word_index: np.ndarray  # (N,) source word per token, -1 for specials
    patches: np.ndarray  # (HW, patch_dim)
    visual_boxes: list[BBox]
    visual_positions: np.ndarray  # 0..HW-1, own index space
    attention_mask: np.ndarray  # (N + HW,) True where the key is valid

    @property
    def n_text(self) -> int:
        return len(self.token_ids)

    @property
    def hw(self) -> int:
        return len(self.patches)

    @property
    def length(self) -> int:
        return self.n_text + self.hw

    def all_boxes(self) -> list[BBox]:
        return list(self.boxes) + list(self.visual_boxes)

    def global_positions(self) -> np.ndarray:
        """Concatenated sequence indices used for 1D relative distances."""
        return np.arange(self.length, dtype=np.int64)


class EmbeddingTables:
    """All input embedding tables plus the visual projection."""

    def __init__(self, dims: ModelDims, vocab_size: int, stream: RngStream, std: float = 0.02):
        d = dims.d

        def table(name, rows):
            return Parameter(stream.normal((rows, d), std=std), name)

        self.dims = dims
        self.tok = table("emb.tok", vocab_size)
        self.pos1d = table("emb.pos1d", dims.max_text_len)
        # visual tokens index their own 0..HW-1 position space so textual
        # position 3 and grid cell 3 never share an embedding row
        self.pos1d_vis = table("emb.pos1d_vis", dims.hw)
        self.type = table("emb.type", 2)
        self.x = table("emb.x", 1001)
        self.w = table("emb.w", 1001)
        self.y = table("emb.y", 1001)
        self.h = table("emb.h", 1001)
        self.vis_w = Parameter(stream.normal((dims.patch_dim, d), std=std), "emb.vis_w")
        self.vis_b = Parameter(np.zeros(d), "emb.vis_b")

    def parameters(self) -> list[Parameter]:
        return [self.tok, self.pos1d, self.pos1d_vis, self.type,
                self.x, self.w, self.y, self.h, self.vis_w, self.vis_b]


def text_embedding(tables: EmbeddingTables, token_ids, positions, type_ids) -> Tensor:
    token_ids = np.asarray(token_ids, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    if token_ids.size and token_ids.max() >= tables.tok.shape[0]:
        raise ValueError("token id out of vocabulary")
    if positions.size and positions.max() >= tables.dims.max_text_len:
        raise ValueError("1D position exceeds the textual budget")
    t = take_rows(tables.tok, token_ids)
    t = add(t, take_rows(tables.pos1d, positions))
    return add(t, take_rows(tables.type, np.asarray(type_ids, dtype=np.int64)))


def visual_embedding(tables: EmbeddingTables, patches, visual_positions) -> Tensor:
    v = linear(Tensor(np.asarray(patches, dtype=np.float64)), tables.vis_w, tables.vis_b)
    v = add(v, take_rows(tables.pos1d_vis, np.asarray(visual_positions, dtype=np.int64)))
    types = np.full(len(patches), TYPE_VISUAL, dtype=np.int64)
    return add(v, take_rows(tables.type, types))


def layout_embedding(tables: EmbeddingTables, boxes: list[BBox]) -> Tensor:
    xs0 = np.array([b.x0 for b in boxes], dtype=np.int64)
    xs1 = np.array([b.x1 for b in boxes], dtype=np.int64)
    ws = np.array([b.w for b in boxes], dtype=np.int64)
    ys0 = np.array([b.y0 for b in boxes], dtype=np.int64)
    ys1 = np.array([b.y1 for b in boxes], dtype=np.int64)
    hs = np.array([b.h for b in boxes], dtype=np.int64)
    lx = add(add(take_rows(tables.x, xs0), take_rows(tables.x, xs1)), take_rows(tables.w, ws))
    ly = add(add(take_rows(tables.y, ys0), take_rows(tables.y, ys1)), take_rows(tables.h, hs))
    return add(lx, ly)


def embed_sequence(tables: EmbeddingTables, seq: MultiModalSequence) -> Tensor:
    """The combined representation H = [T + L_text ; V + L_visual]."""
    t = text_embedding(tables, seq.token_ids, seq.positions, seq.type_ids)
    t = add(t, layout_embedding(tables, seq.boxes))
    v = visual_embedding(tables, seq.patches, seq.visual_positions)
    v = add(v, layout_embedding(tables, seq.visual_boxes))
    from vrdu.autodiff import concat

    return concat([t, v], axis=0)


@dataclass
class TokenizedDoc:
    """Word-piece expansion of a document in a chosen reading order."""

    token_ids: list[int]
    word_index: list[int]  # source word id per token
    boxes: list[BBox]
    truncated: bool = False


def tokenize_document(doc: Document, order: ReadingOrder, vocab: Vocab,
                      max_text_len: int = 512) -> TokenizedDoc:
    """Expand words to subword tokens following the reading order; each
    subword inherits its word's box. Truncates to the textual budget
    (minus [CLS]/[SEP]) with a warning."""
    budget = max_text_len - 2
    token_ids: list[int] = []
    word_index: list[int] = []
    boxes: list[BBox] = []
    truncated = False
    for wid in order.permutation:
        word = doc.words[wid]
        for tid in vocab.tokenize_word(word.text):
            if len(token_ids) >= budget:
                truncated = True
                break
            token_ids.append(tid)
            word_index.append(wid)
            boxes.append(word.bbox)
        if truncated:
            break
    if truncated:
        warnings.warn(f"document truncated to {budget} textual tokens")
    return TokenizedDoc(token_ids, word_index, boxes, truncated)


def build_sequence(tok: TokenizedDoc, patches: np.ndarray, vocab: Vocab,
                   dims: ModelDims) -> MultiModalSequence:
    """Wrap tokens with [CLS]/[SEP], attach the visual part, no padding."""
    ids = [vocab.cls_id] + tok.token_ids + [vocab.sep_id]
    boxes = [ZERO_BOX] + tok.boxes + [ZERO_BOX]
    word_index = [-1] + tok.word_index + [-1]
    n = len(ids)
    grid = dims.grid
    visual_boxes = [grid_cell_box(r, c, grid) for r in range(grid) for c in range(grid)]
    return MultiModalSequence(
        token_ids=np.array(ids, dtype=np.int64),
        boxes=boxes,
        positions=np.arange(n, dtype=np.int64),
        type_ids=np.full(n, TYPE_TEXT, dtype=np.int64),
        word_index=np.array(word_index, dtype=np.int64),
        patches=np.asarray(patches, dtype=np.float64),
        visual_boxes=visual_boxes,
        visual_positions=np.arange(dims.hw, dtype=np.int64),
        attention_mask=np.ones(n + dims.hw, dtype=bool),
    )


def combine(doc: Document, order: ReadingOrder, vocab: Vocab, dims: ModelDims,
            patch_encoder: PatchEncoder) -> MultiModalSequence:
    tok = tokenize_document(doc, order, vocab, dims.max_text_len)
    patches = patch_encoder(doc.image)
    return build_sequence(tok, patches, vocab, dims)
