"""Training loops, run configuration, and evaluation.

Pre-training serializes every page in layout order and draws fresh
corruption per epoch from named random streams, so a run is fully
determined by (seed, config, corpus). Fine-tuning feeds documents in
their stored file order, which is what a downstream dataset would
provide. Losses and metrics are logged as JSON lines; any non-finite
loss aborts the run.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vrdu.autodiff import Tensor, backward, cross_entropy, no_grad, transpose
from vrdu.checkpoint import load_checkpoint, save_checkpoint
from vrdu.docmodel import Document
from vrdu.embedder import Vocab, build_sequence, tokenize_document
from vrdu.heads import (
    TaskHead,
    anls,
    bio_decode,
    bio_decode_logits,
    head_logits,
    head_loss,
    make_head,
    qa_decode,
)
from vrdu.model import DocModel, ModelConfig
from vrdu.optim import Adam, lr_schedule
from vrdu.pretrain import (
    CorruptionConfig,
    LossReport,
    build_pretrain_example,
    build_rop_targets,
    compute_losses,
    donor_features,
)
from vrdu.rng import RngStream
from vrdu.serializer import ReadingOrder, layout_order


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    # model
    layers: int = 2
    d: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.0
    vocab_size: int = 200
    max_text_len: int = 512
    k_1d: int = 128
    k_2d: int = 64
    bucket_width_2d: int = 16
    # corruption
    mvlm_ratio: float = 0.15
    rrp_ratio: float = 0.10
    tia_ratio: float = 0.15
    rop_aggregation: str = "final"  # "final" or "all"
    # optimizer
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.1
    # run
    batch_size: int = 8
    epochs: int = 5
    seed: int = 0
    data_seed: int = 0
    n_docs: int = 100
    family: str = "all"
    tokens_per_doc: int = 50
    data_dir: str = ""

    def __post_init__(self):
        positives = ("layers", "d", "heads", "ffn_dim", "vocab_size",
                     "max_text_len", "k_1d", "k_2d", "bucket_width_2d",
                     "lr", "batch_size", "epochs", "n_docs", "tokens_per_doc")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError("warmup fraction must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.rop_aggregation not in ("final", "all"):
            raise ValueError("rop_aggregation must be 'final' or 'all'")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            layers=self.layers, d=self.d, heads=self.heads, ffn_dim=self.ffn_dim,
            dropout=self.dropout, vocab_size=self.vocab_size,
            max_text_len=self.max_text_len, k_1d=self.k_1d, k_2d=self.k_2d,
            bucket_width_2d=self.bucket_width_2d,
        )

    def corruption_config(self) -> CorruptionConfig:
        return CorruptionConfig(mvlm_ratio=self.mvlm_ratio,
                                rrp_ratio=self.rrp_ratio,
                                tia_ratio=self.tia_ratio)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_config_file(path) -> RunConfig:
    """Flat ``key = value`` file; '#' starts a comment, blank lines ignored."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    casts = {"int": int, "float": float, "str": str}
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in fields:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = casts[fields[key]](val)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return RunConfig(**values)


def save_config_file(cfg: RunConfig, path) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.as_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoint glue


def model_tensors(model: DocModel) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters().items()}


def save_model(path, model: DocModel, cfg: RunConfig, step: int) -> None:
    save_checkpoint(path, step, cfg.as_dict(), model_tensors(model))


def load_model(path) -> tuple[DocModel, RunConfig, int]:
    ckpt = load_checkpoint(path)
    cfg = RunConfig(**ckpt.config)
    model = DocModel(cfg.model_config(), seed=cfg.seed)
    restore_model(model, ckpt.tensors)
    return model, cfg, ckpt.step


def restore_model(model: DocModel, tensors: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, p in params.items():
        if tensors[name].shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{tensors[name].shape} vs {p.data.shape}")
        p.data = np.array(tensors[name], dtype=np.float64)


# ---------------------------------------------------------------------------
# logging helpers


class _JsonlLogger:
    def __init__(self, path):
        self.fh = open(path, "w") if path else None

    def write(self, record: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(record) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _check_finite(value: float, context: str, report: dict) -> None:
    if not math.isfinite(value):
        raise RuntimeError(f"non-finite loss during {context}: {report}")


def _scale_grads(params, factor: float) -> None:
    for p in params:
        if p.grad is not None:
            p.grad *= factor


def _batches(n: int, batch_size: int, order):
    idx = list(order)
    for lo in range(0, n, batch_size):
        yield idx[lo : lo + batch_size]


# ---------------------------------------------------------------------------
# pre-training


def pretrain_run(cfg: RunConfig, docs: list[Document], vocab: Vocab,
                 model: DocModel | None = None, log_path=None,
                 checkpoint_path=None) -> tuple[DocModel, list[dict]]:
    """Adam over batches of freshly corrupted pages; returns the trained
    model and the per-batch loss history."""
    if model is None:
        model = DocModel(cfg.model_config(), seed=cfg.seed)
    ccfg = cfg.corruption_config()
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    donor_pool = donor_features(docs, model)
    orders = [layout_order(d) for d in docs]

    steps_per_epoch = math.ceil(len(docs) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    log = _JsonlLogger(log_path)
    drop_stream = RngStream(cfg.seed, "dropout")
    history: list[dict] = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order_stream = RngStream(cfg.seed, f"order/{epoch}")
            perm = order_stream.permutation(len(docs))
            for batch in _batches(len(docs), cfg.batch_size, perm):
                opt.zero_grad()
                parts = np.zeros(4)
                for i in batch:
                    ex = build_pretrain_example(
                        docs[i], vocab, model, ccfg, cfg.seed,
                        f"{epoch}/{i}", donor_pool, order=orders[i],
                    )
                    total, report = compute_losses(
                        model, ex, train=True, drop_stream=drop_stream,
                        rop_aggregation=cfg.rop_aggregation,
                    )
                    _check_finite(report.total, f"pretrain step {step}",
                                  report.as_dict())
                    backward(total)
                    parts += [report.rop, report.rrp, report.mvlm, report.tia]
                _scale_grads(params, 1.0 / len(batch))
                lr = lr_schedule(step, total_steps, cfg.lr, cfg.warmup_frac)
                opt.step(lr)
                step += 1
                parts /= len(batch)
                record = {
                    "epoch": epoch, "step": step, "lr": lr,
                    "rop": parts[0], "rrp": parts[1],
                    "mvlm": parts[2], "tia": parts[3],
                    "total": float(parts.sum()),
                }
                history.append(record)
                log.write(record)
    finally:
        log.close()
    if checkpoint_path is not None:
        save_model(checkpoint_path, model, cfg, step)
    return model, history


def eval_pretrain_losses(cfg: RunConfig, model: DocModel, docs: list[Document],
                         vocab: Vocab, tag: str = "eval") -> LossReport:
    """Mean loss parts over a corpus with corruption drawn from the given
    tag, without updating parameters."""
    ccfg = cfg.corruption_config()
    donor_pool = donor_features(docs, model)
    parts = np.zeros(4)
    for i, doc in enumerate(docs):
        ex = build_pretrain_example(doc, vocab, model, ccfg, cfg.seed,
                                    f"{tag}/{i}", donor_pool)
        with no_grad():
            _, report = compute_losses(model, ex,
                                       rop_aggregation=cfg.rop_aggregation)
        parts += [report.rop, report.rrp, report.mvlm, report.tia]
    parts /= max(len(docs), 1)
    return LossReport(rop=parts[0], rrp=parts[1], mvlm=parts[2], tia=parts[3])


def rop_accuracy(model: DocModel, docs: list[Document], vocab: Vocab) -> dict:
    """Next-token accuracy of the final-layer head-averaged scores on
    uncorrupted pages, with the uniform-chance baseline."""
    correct = 0
    total = 0
    chance_hits = 0.0
    for doc in docs:
        order = layout_order(doc)
        tok = tokenize_document(doc, order, vocab, model.cfg.max_text_len)
        patches = model.patch_encoder(doc.image)
        seq = build_sequence(tok, patches, vocab, model.cfg.dims())
        with no_grad():
            result = model.forward(seq)
        heads = result.attn_stack[-1]
        a = sum(h.data for h in heads) / len(heads)
        n = seq.n_text
        vidx = np.arange(1, n - 1)
        if vidx.size == 0:
            continue
        sub = a[np.ix_(vidx, vidx)]
        pred = sub.argmax(axis=1)
        gold = np.arange(1, vidx.size + 1)
        gold[-1] = vidx.size - 1  # the last token is its own successor
        correct += int((pred == gold).sum())
        total += vidx.size
        chance_hits += 1.0  # uniform rows expect one hit per document
    if total == 0:
        return {"accuracy": 0.0, "chance": 0.0, "ratio": 0.0}
    accuracy = correct / total
    chance = chance_hits / total
    return {"accuracy": accuracy, "chance": chance,
            "ratio": accuracy / chance if chance > 0 else 0.0}


# ---------------------------------------------------------------------------
# fine-tuning


BIO_LABELS = ("O", "B-Q", "I-Q", "B-A", "I-A")


def file_order(doc: Document) -> ReadingOrder:
    """The order words are stored in, which is the dataset's own order."""
    return ReadingOrder(tuple(range(len(doc.words))), "file")


@dataclass
class FinetuneSample:
    seq: object
    first_token: np.ndarray  # first subword position per word
    doc: Document


def _prepare_sample(doc: Document, vocab: Vocab, model: DocModel) -> FinetuneSample:
    tok = tokenize_document(doc, file_order(doc), vocab, model.cfg.max_text_len)
    patches = model.patch_encoder(doc.image)
    seq = build_sequence(tok, patches, vocab, model.cfg.dims())
    first = np.full(len(doc.words), -1, dtype=np.int64)
    for pos in range(seq.n_text):
        wid = seq.word_index[pos]
        if wid >= 0 and first[wid] < 0:
            first[wid] = pos
    if (first < 0).any():
        raise ValueError("document truncated: not every word reached the model")
    return FinetuneSample(seq=seq, first_token=first, doc=doc)


def _task_loss(model: DocModel, head: TaskHead, sample: FinetuneSample) -> Tensor:
    result = model.forward(sample.seq)
    hidden = result.final
    ann = sample.doc.annotations
    if head.kind == "bio":
        if ann is None or ann.bio_tags is None:
            raise ValueError("document lacks BIO tags")
        try:
            targets = [head.labels.index(t) for t in ann.bio_tags]
        except ValueError as exc:
            raise ValueError(f"tag not in head label set: {exc}") from exc
        return head_loss(head, hidden, sample.first_token, targets)
    if head.kind == "qa":
        if ann is None or ann.qa is None:
            raise ValueError("document lacks a QA pair")
        n = sample.seq.n_text
        logits = head_logits(head, hidden, np.arange(n, dtype=np.int64))
        start = int(sample.first_token[ann.qa["answer_start"]])
        end = int(sample.first_token[ann.qa["answer_end"]])
        onehot = np.zeros((2, n), dtype=np.float64)
        onehot[0, start] = 1.0
        onehot[1, end] = 1.0
        return cross_entropy(transpose(logits), onehot, reduction="mean")
    if head.kind == "cls":
        if ann is None or ann.class_label is None:
            raise ValueError("document lacks a class label")
        return head_loss(head, hidden, np.array([0], dtype=np.int64),
                         [ann.class_label])
    raise ValueError(f"unknown head kind {head.kind!r}")


def finetune_run(cfg: RunConfig, model: DocModel, docs: list[Document],
                 vocab: Vocab, task: str, labels, epochs: int | None = None,
                 freeze_encoder: bool = False, log_path=None,
                 eval_docs: list[Document] | None = None) -> dict:
    """Train a task head (plus the encoder unless frozen) and return the
    task metrics on ``eval_docs`` (defaults to the training documents)."""
    epochs = cfg.epochs if epochs is None else epochs
    head = make_head(task, labels, cfg.d, RngStream(cfg.seed, f"head/{task}"))
    params = head.parameters() if freeze_encoder else model.parameters() + head.parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    samples = [_prepare_sample(d, vocab, model) for d in docs]

    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size) if samples else 0
    total_steps = max(epochs * steps_per_epoch, 1)
    log = _JsonlLogger(log_path)
    step = 0
    try:
        for epoch in range(epochs):
            perm = RngStream(cfg.seed, f"ft-order/{epoch}").permutation(len(samples))
            for batch in _batches(len(samples), cfg.batch_size, perm):
                opt.zero_grad()
                loss_sum = 0.0
                for i in batch:
                    loss = _task_loss(model, head, samples[i])
                    _check_finite(loss.item(), f"finetune step {step}",
                                  {"loss": loss.item()})
                    backward(loss)
                    loss_sum += loss.item()
                _scale_grads(params, 1.0 / len(batch))
                lr = lr_schedule(step, total_steps, cfg.lr, cfg.warmup_frac)
                opt.step(lr)
                step += 1
                record = {"epoch": epoch, "step": step, "lr": lr,
                          "loss": loss_sum / len(batch)}
                log.write(record)
    finally:
        log.close()
    metrics = eval_run(model, head, eval_docs if eval_docs is not None else docs, vocab)
    return {"head": head, "metrics": metrics}


# ---------------------------------------------------------------------------
# evaluation


def eval_run(model: DocModel, head: TaskHead, docs: list[Document],
             vocab: Vocab, max_answer_len: int = 10) -> dict:
    """Task metrics over a corpus, without the gradient tape."""
    if head.kind == "bio":
        right = n_pred = n_gold = 0
        for doc in docs:
            sample = _prepare_sample(doc, vocab, model)
            with no_grad():
                hidden = model.forward(sample.seq).final
                logits = head_logits(head, hidden)
            pred = bio_decode_logits(logits.data, sample.first_token, head.labels)
            gold = bio_decode(list(doc.annotations.bio_tags))
            gold_left = list(gold)
            for span in pred:
                if span in gold_left:
                    gold_left.remove(span)
                    right += 1
            n_pred += len(pred)
            n_gold += len(gold)
        precision = right / n_pred if n_pred else 0.0
        recall = right / n_gold if n_gold else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        return {"precision": precision, "recall": recall, "f1": f1}

    if head.kind == "qa":
        scores = []
        for doc in docs:
            if doc.annotations is None or doc.annotations.qa is None:
                continue
            sample = _prepare_sample(doc, vocab, model)
            with no_grad():
                hidden = model.forward(sample.seq).final
                logits = head_logits(
                    head, hidden, np.arange(sample.seq.n_text, dtype=np.int64))
            span = qa_decode(logits.data[:, 0], logits.data[:, 1], max_answer_len)
            qa = doc.annotations.qa
            gold_text = " ".join(
                doc.words[w].text
                for w in range(qa["answer_start"], qa["answer_end"] + 1))
            if span is None:
                scores.append(0.0)
                continue
            wids = []
            for pos in range(span[0], span[1] + 1):
                wid = int(sample.seq.word_index[pos])
                if wid >= 0 and wid not in wids:
                    wids.append(wid)
            pred_text = " ".join(doc.words[w].text for w in wids)
            scores.append(anls(pred_text, [gold_text]))
        return {"anls": sum(scores) / len(scores) if scores else 0.0,
                "n": len(scores)}

    if head.kind == "cls":
        correct = 0
        total = 0
        for doc in docs:
            sample = _prepare_sample(doc, vocab, model)
            with no_grad():
                hidden = model.forward(sample.seq).final
                logits = head_logits(head, hidden,
                                     np.array([0], dtype=np.int64))
            if int(logits.data[0].argmax()) == doc.annotations.class_label:
                correct += 1
            total += 1
        return {"accuracy": correct / total if total else 0.0, "n": total}

    raise ValueError(f"unknown head kind {head.kind!r}")


# ---------------------------------------------------------------------------
# attention inspection


def inspect_attention(model: DocModel, doc: Document, vocab: Vocab, out_path,
                      layer: int = -1, head: int | None = None) -> np.ndarray:
    """Dump one pre-softmax score matrix as CSV; head None averages heads."""
    order = layout_order(doc)
    tok = tokenize_document(doc, order, vocab, model.cfg.max_text_len)
    seq = build_sequence(tok, model.patch_encoder(doc.image), vocab,
                         model.cfg.dims())
    with no_grad():
        result = model.forward(seq)
    heads = result.attn_stack[layer]
    if head is None:
        a = sum(h.data for h in heads) / len(heads)
    else:
        a = heads[head].data
    np.savetxt(out_path, a, delimiter=",")
    return a
