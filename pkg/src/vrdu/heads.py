"""Downstream task heads and evaluation metrics.

Three fine-tuning paradigms share the encoder: BIO sequence labeling on
word-level states (first subword per word), extractive QA start/end
prediction over textual positions, and whole-document classification from
the [CLS] state. Metrics: entity-level micro F1 over exact
(type, start, end) matches, average normalized Levenshtein similarity
with the conventional 0.5 threshold, and plain accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vrdu.autodiff import Parameter, Tensor, cross_entropy, linear, take_rows
from vrdu.rng import RngStream


@dataclass
class TaskHead:
    kind: str  # "bio" | "qa" | "cls"
    labels: tuple[str, ...]
    w: Parameter
    b: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


def make_head(kind: str, labels, d: int, stream: RngStream) -> TaskHead:
    labels = tuple(labels)
    if not labels:
        raise ValueError("label set must be non-empty")
    out_dim = {"bio": len(labels), "qa": 2, "cls": len(labels)}[kind]
    return TaskHead(
        kind=kind,
        labels=labels,
        w=Parameter(stream.normal((d, out_dim), std=0.02), f"head.{kind}_w"),
        b=Parameter(np.zeros(out_dim), f"head.{kind}_b"),
    )


def head_logits(head: TaskHead, hidden: Tensor, positions=None) -> Tensor:
    if positions is not None:
        hidden = take_rows(hidden, np.asarray(positions, dtype=np.int64))
    return linear(hidden, head.w, head.b)


def head_loss(head: TaskHead, hidden: Tensor, positions, target_ids) -> Tensor:
    """Mean cross-entropy of the head over the selected positions."""
    logits = head_logits(head, hidden, positions)
    n, k = logits.shape
    onehot = np.zeros((n, k), dtype=np.float64)
    onehot[np.arange(n), np.asarray(target_ids, dtype=np.int64)] = 1.0
    return cross_entropy(logits, onehot, reduction="mean")


# ---------------------------------------------------------------------------
# BIO decoding and entity F1


def bio_decode(word_tags: list[str]) -> list[tuple[str, int, int]]:
    """Maximal B-I runs as (type, start, end) word spans, ends inclusive.

    An I- tag that does not continue an entity of its own type starts a
    new entity.
    """
    spans: list[tuple[str, int, int]] = []
    cur_type, cur_start = None, -1
    for i, tag in enumerate(word_tags):
        if tag == "O":
            if cur_type is not None:
                spans.append((cur_type, cur_start, i - 1))
                cur_type = None
            continue
        prefix, etype = tag[:2], tag[2:]
        if prefix == "B-" or cur_type != etype:
            if cur_type is not None:
                spans.append((cur_type, cur_start, i - 1))
            cur_type, cur_start = etype, i
    if cur_type is not None:
        spans.append((cur_type, cur_start, len(word_tags) - 1))
    return spans


def bio_decode_logits(token_logits: np.ndarray, first_token_per_word,
                      labels) -> list[tuple[str, int, int]]:
    """Word tags from first-subword logits, then span decoding."""
    rows = np.asarray(token_logits)[np.asarray(first_token_per_word, dtype=np.int64)]
    tags = [labels[i] for i in rows.argmax(axis=1)]
    return bio_decode(tags)


def entity_f1(pred_spans, gold_spans) -> float:
    """Exact-match micro F1 over (type, start, end) triples."""
    pred = list(pred_spans)
    gold = list(gold_spans)
    gold_left = list(gold)
    right = 0
    for p in pred:
        if p in gold_left:
            gold_left.remove(p)
            right += 1
    precision = right / len(pred) if pred else 0.0
    recall = right / len(gold) if gold else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def entity_prf(pred_spans, gold_spans) -> dict:
    f1 = entity_f1(pred_spans, gold_spans)
    pred, gold = list(pred_spans), list(gold_spans)
    right = sum(1 for p in pred if p in gold)
    return {
        "precision": right / len(pred) if pred else 0.0,
        "recall": right / len(gold) if gold else 0.0,
        "f1": f1,
    }


# ---------------------------------------------------------------------------
# extractive QA


def qa_decode(start_logits: np.ndarray, end_logits: np.ndarray,
              max_answer_len: int) -> tuple[int, int] | None:
    """Best (start, end) with start <= end and end - start < max_answer_len,
    maximizing start_logit + end_logit. None when no pair is valid."""
    start_logits = np.asarray(start_logits, dtype=np.float64)
    end_logits = np.asarray(end_logits, dtype=np.float64)
    n = len(start_logits)
    best, best_score = None, -np.inf
    for s in range(n):
        hi = min(n, s + max_answer_len)
        if hi <= s:
            continue
        e = s + int(np.argmax(end_logits[s:hi]))
        score = start_logits[s] + end_logits[e]
        if score > best_score:
            best, best_score = (s, e), score
    return best


# ---------------------------------------------------------------------------
# ANLS


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(pred: str, golds, threshold: float = 0.5) -> float:
    """Normalized Levenshtein similarity against the best gold; similarities
    below the threshold score zero."""
    best = 0.0
    for gold in golds:
        denom = max(len(pred), len(gold))
        sim = 1.0 if denom == 0 else 1.0 - levenshtein(pred, gold) / denom
        if sim >= threshold:
            best = max(best, sim)
    return best


def corpus_anls(pred_gold_pairs) -> float:
    pairs = list(pred_gold_pairs)
    if not pairs:
        return 0.0
    return sum(anls(p, g) for p, g in pairs) / len(pairs)


# ---------------------------------------------------------------------------
# classification


def classify(logits: np.ndarray) -> int:
    return int(np.asarray(logits).argmax())


def accuracy(preds, golds) -> float:
    preds, golds = list(preds), list(golds)
    if len(preds) != len(golds):
        raise ValueError("prediction/gold length mismatch")
    if not preds:
        return 0.0
    return sum(p == g for p, g in zip(preds, golds)) / len(preds)
