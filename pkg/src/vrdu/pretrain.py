"""Pre-training example construction and the four objectives.

One example per page. The pipeline order is fixed: text corruption for
masked visual-language modeling, then line covering for text-image
alignment (applied to the page pixels before patch extraction), then
patch replacement for replaced-region prediction (applied to the
extracted patch features, so the replacement labels stay exact no matter
what covering did to the image).

Losses:
  * reading order  - cross-entropy between the gold next-token matrix and
    the row-softmax of the final layer's head-averaged score matrix,
    restricted to real textual positions (sum reduction);
  * replaced region - binary cross-entropy of the [CLS] classifier over
    the 49 patch slots (sum reduction);
  * masked LM       - mean cross-entropy at masked positions with logits
    tied to the token embedding table;
  * text-image alignment - mean binary cross-entropy per textual token,
    with corruption-selected tokens excluded.

The total objective is the unweighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vrdu.autodiff import (
    Tensor,
    add,
    binary_cross_entropy,
    linear,
    log,
    matmul,
    mul,
    neg,
    sigmoid,
    softmax,
    take_rows,
    transpose,
    tsum,
)
from vrdu.docmodel import Document
from vrdu.embedder import MultiModalSequence, Vocab, build_sequence, mean_pool_patches, tokenize_document
from vrdu.model import DocModel, ForwardResult
from vrdu.rng import RngStream
from vrdu.serializer import SerializerConfig, group_lines, layout_order


@dataclass(frozen=True)
class CorruptionConfig:
    mvlm_ratio: float = 0.15
    mvlm_mask_frac: float = 0.8
    mvlm_random_frac: float = 0.1
    rrp_ratio: float = 0.10
    tia_ratio: float = 0.15


@dataclass
class PretrainExample:
    seq: MultiModalSequence  # post-corruption inputs
    mvlm_targets: list[tuple[int, int]]  # (sequence position, gold token id)
    rrp_labels: np.ndarray  # (HW,) 0/1
    tia_labels: np.ndarray  # (n_text,) 0/1
    tia_include: np.ndarray  # (n_text,) bool, tokens that enter the TIA loss
    rop_g: np.ndarray  # (n_text, n_text) 0/1, one 1 per valid row
    rop_valid: np.ndarray  # (n_text,) bool


@dataclass(frozen=True)
class LossReport:
    rop: float
    rrp: float
    mvlm: float
    tia: float

    @property
    def total(self) -> float:
        return self.rop + self.rrp + self.mvlm + self.tia

    def as_dict(self) -> dict:
        return {"rop": self.rop, "rrp": self.rrp, "mvlm": self.mvlm,
                "tia": self.tia, "total": self.total}


# ---------------------------------------------------------------------------
# target construction and samplers


def build_rop_targets(order_positions, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Next-token matrix over n sequence positions.

    ``order_positions`` lists the valid textual positions in reading order;
    each points to its successor, the final one to itself. Positions not
    listed (specials, padding) have all-zero rows and are masked out.
    """
    g = np.zeros((n, n), dtype=np.float64)
    valid = np.zeros(n, dtype=bool)
    order_positions = list(order_positions)
    for idx, p in enumerate(order_positions):
        succ = order_positions[idx + 1] if idx + 1 < len(order_positions) else p
        g[p, succ] = 1.0
        valid[p] = True
    return g, valid


def sample_mvlm(token_ids: list[int], vocab: Vocab, stream: RngStream,
                cfg: CorruptionConfig) -> tuple[list[int], list[tuple[int, int]]]:
    """BERT-style corruption over real subword tokens.

    Returns (corrupted ids, [(token index, gold id)]). Of the selected
    tokens, mask_frac become [MASK], random_frac become a random
    non-special vocab token, the rest stay unchanged.
    """
    m = len(token_ids)
    count = int(round(cfg.mvlm_ratio * m))
    count = min(max(count, 0), m)
    if count == 0:
        return list(token_ids), []
    picked = np.sort(stream.choice_without_replacement(m, count))
    rolls = stream.random(count)
    candidates = [i for i in range(len(vocab)) if i not in vocab.special_ids]
    random_ids = stream.integers(0, len(candidates), count)
    corrupted = list(token_ids)
    targets = []
    for j, pos in enumerate(picked):
        gold = token_ids[pos]
        if rolls[j] < cfg.mvlm_mask_frac:
            corrupted[pos] = vocab.mask_id
        elif rolls[j] < cfg.mvlm_mask_frac + cfg.mvlm_random_frac:
            corrupted[pos] = candidates[int(random_ids[j])]
        # else: keep the original token, still predicted
        targets.append((int(pos), int(gold)))
    return corrupted, targets


def sample_tia(doc: Document, included_words, stream: RngStream,
               cfg: CorruptionConfig, ser_cfg: SerializerConfig = SerializerConfig()
               ) -> tuple[np.ndarray, set[int]]:
    """Cover a fraction of text lines with black rectangles.

    Returns (covered image copy, covered word id set). Lines come from the
    same vertical-overlap grouping the serializer uses.
    """
    included = sorted(set(included_words))
    image = doc.image.copy()
    if not included:
        return image, set()
    boxes = [w.bbox for w in doc.words]
    lines = group_lines(boxes, included, ser_cfg.line_overlap)
    count = int(round(cfg.tia_ratio * len(lines)))
    count = min(max(count, 0), len(lines))
    if count == 0:
        return image, set()
    picked = stream.choice_without_replacement(len(lines), count)
    covered: set[int] = set()
    ph, pw = image.shape[:2]
    for li in picked:
        line = lines[int(li)]
        covered.update(line)
        x0 = min(doc.pixel_boxes[w][0] for w in line)
        y0 = min(doc.pixel_boxes[w][1] for w in line)
        x1 = max(doc.pixel_boxes[w][2] for w in line)
        y1 = max(doc.pixel_boxes[w][3] for w in line)
        image[max(0, y0):min(ph, y1), max(0, x0):min(pw, x1), :] = 0
    return image, covered


def sample_rrp(patches: np.ndarray, stream: RngStream, donor_pool,
               cfg: CorruptionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Swap a fixed share of patch slots with the same slot of a random
    donor's patch features. Labels mark replaced slots even when the donor
    features happen to coincide."""
    if not donor_pool:
        raise ValueError("replaced-region sampling needs a non-empty donor pool")
    hw = len(patches)
    count = int(round(cfg.rrp_ratio * hw))
    labels = np.zeros(hw, dtype=np.float64)
    out = np.array(patches, dtype=np.float64, copy=True)
    if count == 0:
        return out, labels
    positions = stream.choice_without_replacement(hw, count)
    donors = stream.integers(0, len(donor_pool), count)
    for pos, di in zip(positions, donors):
        out[int(pos)] = donor_pool[int(di)][int(pos)]
        labels[int(pos)] = 1.0
    return out, labels


def build_pretrain_example(doc: Document, vocab: Vocab, model: DocModel,
                           cfg: CorruptionConfig, seed: int, example_id: str,
                           donor_pool,
                           ser_cfg: SerializerConfig = SerializerConfig(),
                           order=None) -> PretrainExample:
    """Full corruption pipeline for one page, serialized in layout order.

    ``order`` may carry a precomputed reading order so a multi-epoch loop
    does not repeat the layout parse."""
    if order is None:
        order = layout_order(doc, ser_cfg)
    tok = tokenize_document(doc, order, vocab, model.cfg.max_text_len)

    mvlm_stream = RngStream(seed, f"mvlm/{example_id}")
    corrupted_ids, raw_targets = sample_mvlm(tok.token_ids, vocab, mvlm_stream, cfg)
    tok.token_ids = corrupted_ids
    corrupt_positions = {pos + 1 for pos, _ in raw_targets}  # +1 for [CLS]
    mvlm_targets = [(pos + 1, gold) for pos, gold in raw_targets]

    tia_stream = RngStream(seed, f"tia/{example_id}")
    covered_image, covered_words = sample_tia(doc, tok.word_index, tia_stream, cfg, ser_cfg)
    patches = model.patch_encoder(covered_image)

    rrp_stream = RngStream(seed, f"rrp/{example_id}")
    patches, rrp_labels = sample_rrp(patches, rrp_stream, donor_pool, cfg)

    seq = build_sequence(tok, patches, vocab, model.cfg.dims())
    n = seq.n_text

    tia_labels = np.zeros(n, dtype=np.float64)
    tia_include = np.zeros(n, dtype=bool)
    for pos in range(n):
        wid = seq.word_index[pos]
        if wid < 0:
            continue
        tia_include[pos] = pos not in corrupt_positions
        tia_labels[pos] = 1.0 if wid in covered_words else 0.0

    rop_g, rop_valid = build_rop_targets(range(1, n - 1), n)
    return PretrainExample(
        seq=seq,
        mvlm_targets=mvlm_targets,
        rrp_labels=rrp_labels,
        tia_labels=tia_labels,
        tia_include=tia_include,
        rop_g=rop_g,
        rop_valid=rop_valid,
    )


def donor_features(docs, model: DocModel) -> list[np.ndarray]:
    """Uncorrupted patch features per document, the donor pool for patch
    replacement."""
    return [model.patch_encoder(d.image) for d in docs]


# ---------------------------------------------------------------------------
# losses


def rop_loss(attn_stack, rop_g: np.ndarray, rop_valid: np.ndarray,
             eps: float = 1e-12, aggregation: str = "final") -> Tensor:
    """Cross-entropy of the head-averaged scores against the next-token
    matrix, restricted and row-normalized over valid textual positions.

    ``aggregation`` picks which layers are supervised: "final" (default)
    averages the heads of the last layer only, "all" averages over every
    layer and head.
    """
    vidx = np.flatnonzero(rop_valid).astype(np.int64)
    if vidx.size == 0:
        return Tensor(0.0)
    if aggregation == "final":
        heads = attn_stack[-1]
    elif aggregation == "all":
        heads = [a for layer in attn_stack for a in layer]
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    a_mean = heads[0]
    for a in heads[1:]:
        a_mean = add(a_mean, a)
    a_mean = mul(a_mean, 1.0 / len(heads))
    rows = take_rows(a_mean, vidx)
    sub = transpose(take_rows(transpose(rows), vidx))
    probs = softmax(sub, axis=-1)
    g_sub = rop_g[np.ix_(vidx, vidx)]
    return neg(tsum(mul(log(probs, eps=eps), Tensor(g_sub))))


def rrp_loss(result: ForwardResult, model: DocModel, labels: np.ndarray) -> Tensor:
    cls_hidden = result.final[0:1, :]
    logits = linear(cls_hidden, model.rrp_w, model.rrp_b)
    probs = sigmoid(logits)
    return binary_cross_entropy(probs.reshape(-1), labels, reduction="sum")


def mvlm_loss(result: ForwardResult, model: DocModel,
              targets: list[tuple[int, int]]) -> Tensor:
    if not targets:
        return Tensor(0.0)
    positions = np.array([p for p, _ in targets], dtype=np.int64)
    golds = np.array([g for _, g in targets], dtype=np.int64)
    hidden = take_rows(result.final, positions)
    logits = matmul(hidden, transpose(model.tables.tok))  # weight tying
    onehot = np.zeros((len(targets), model.cfg.vocab_size), dtype=np.float64)
    onehot[np.arange(len(targets)), golds] = 1.0
    from vrdu.autodiff import cross_entropy

    return cross_entropy(logits, onehot, reduction="mean")


def tia_loss(result: ForwardResult, model: DocModel, labels: np.ndarray,
             include: np.ndarray) -> Tensor:
    idx = np.flatnonzero(include).astype(np.int64)
    if idx.size == 0:
        return Tensor(0.0)
    hidden = take_rows(result.final, idx)
    probs = sigmoid(linear(hidden, model.tia_w, model.tia_b))
    return binary_cross_entropy(probs.reshape(-1), labels[idx], reduction="mean")


def compute_losses(model: DocModel, ex: PretrainExample, train: bool = False,
                   drop_stream: RngStream | None = None,
                   rop_aggregation: str = "final") -> tuple[Tensor, LossReport]:
    result = model.forward(ex.seq, train=train, drop_stream=drop_stream)
    l_rop = rop_loss(result.attn_stack, ex.rop_g, ex.rop_valid,
                     aggregation=rop_aggregation)
    l_rrp = rrp_loss(result, model, ex.rrp_labels)
    l_mvlm = mvlm_loss(result, model, ex.mvlm_targets)
    l_tia = tia_loss(result, model, ex.tia_labels, ex.tia_include)
    total = add(add(l_rop, l_rrp), add(l_mvlm, l_tia))
    report = LossReport(rop=l_rop.item(), rrp=l_rrp.item(),
                        mvlm=l_mvlm.item(), tia=l_tia.item())
    return total, report


def total_loss(parts: LossReport) -> float:
    return parts.total
