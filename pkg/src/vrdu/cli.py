"""Command-line interface.

Subcommands: gen-data, serialize, pretrain, finetune, eval, inspect-attn.
Run configuration comes from a flat key=value file; the only environment
variable honored is VRDU_LOG_LEVEL (a logging level name).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from vrdu.docmodel import Document, load_ocr_json, save_ocr_json
from vrdu.embedder import Vocab
from vrdu.serializer import layout_order, order_quality, raster_scan_order
from vrdu.synth import FAMILIES, SyntheticSpec, build_synthetic_vocab, gen_synthetic_corpus
from vrdu.train import (
    BIO_LABELS,
    RunConfig,
    eval_pretrain_losses,
    finetune_run,
    inspect_attention,
    load_model,
    parse_config_file,
    pretrain_run,
    rop_accuracy,
    save_model,
)

log = logging.getLogger("vrdu")


def _setup_logging() -> None:
    level = os.environ.get("VRDU_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_corpus(data_dir) -> list[Document]:
    paths = sorted(p for p in Path(data_dir).glob("*.json"))
    if not paths:
        raise SystemExit(f"no .json documents found in {data_dir}")
    return [load_ocr_json(p) for p in paths]


def _load_vocab(data_dir) -> Vocab:
    path = Path(data_dir) / "vocab.txt"
    if not path.exists():
        raise SystemExit(f"missing vocabulary file {path}")
    return Vocab.load(path)


def _config(args) -> RunConfig:
    return parse_config_file(args.config) if args.config else RunConfig()


def cmd_gen_data(args) -> None:
    spec = SyntheticSpec(family=args.family, vocab_size=args.vocab_size,
                         tokens_per_doc=args.tokens_per_doc)
    vocab = build_synthetic_vocab(spec.vocab_size)
    docs = gen_synthetic_corpus(spec, args.n, args.seed, vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    for i, doc in enumerate(docs):
        save_ocr_json(doc, out / f"doc_{i:05d}.json")
    log.info("wrote %d documents to %s", len(docs), out)


def cmd_serialize(args) -> None:
    doc = load_ocr_json(args.doc)
    order = raster_scan_order(doc) if args.method == "raster" else layout_order(doc)
    result = {"method": order.method, "permutation": list(order.permutation)}
    if doc.gold_order is not None:
        result["quality"] = order_quality(order, doc.gold_order).as_dict()
    print(json.dumps(result, indent=2))


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    docs = _load_corpus(args.data)
    vocab = _load_vocab(args.data)
    log.info("pre-training on %d documents for %d epochs", len(docs), cfg.epochs)
    model, history = pretrain_run(cfg, docs, vocab, log_path=args.log,
                                  checkpoint_path=args.out)
    summary = {"steps": len(history),
               "first_total": history[0]["total"] if history else None,
               "last_total": history[-1]["total"] if history else None}
    print(json.dumps(summary, indent=2))


def _task_labels(task: str):
    return {"bio": BIO_LABELS, "qa": ("start", "end"), "cls": FAMILIES}[task]


def cmd_finetune(args) -> None:
    cfg = _config(args)
    docs = _load_corpus(args.data)
    vocab = _load_vocab(args.data)
    if args.ckpt:
        model, ckpt_cfg, _ = load_model(args.ckpt)
        if ckpt_cfg.model_config() != cfg.model_config():
            raise SystemExit("checkpoint model dimensions disagree with the config")
    else:
        from vrdu.model import DocModel

        model = DocModel(cfg.model_config(), seed=cfg.seed)
    if args.task == "qa":
        docs = [d for d in docs if d.annotations.qa is not None]
    out = finetune_run(cfg, model, docs, vocab, args.task, _task_labels(args.task),
                       epochs=args.epochs, freeze_encoder=args.freeze_encoder,
                       log_path=args.log)
    if args.out:
        save_model(args.out, model, cfg, 0)
    print(json.dumps(out["metrics"], indent=2))


def cmd_eval(args) -> None:
    model, cfg, step = load_model(args.ckpt)
    docs = _load_corpus(args.data)
    vocab = _load_vocab(args.data)
    losses = eval_pretrain_losses(cfg, model, docs, vocab)
    result = {"step": step, "losses": losses.as_dict(),
              "rop": rop_accuracy(model, docs, vocab)}
    print(json.dumps(result, indent=2))


def cmd_inspect_attn(args) -> None:
    model, _, _ = load_model(args.ckpt)
    doc = load_ocr_json(args.doc)
    vocab = _load_vocab(Path(args.doc).parent) if args.vocab is None else Vocab.load(args.vocab)
    a = inspect_attention(model, doc, vocab, args.out, layer=args.layer,
                          head=args.head)
    log.info("wrote %dx%d score matrix to %s", a.shape[0], a.shape[1], args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vrdu", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--family", default="all", choices=FAMILIES + ("all",))
    g.add_argument("--vocab-size", type=int, default=200)
    g.add_argument("--tokens-per-doc", type=int, default=50)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("serialize", help="print a document's reading order")
    s.add_argument("--doc", required=True)
    s.add_argument("--method", default="layout", choices=("layout", "raster"))
    s.set_defaults(func=cmd_serialize)

    t = sub.add_parser("pretrain", help="run the pre-training loop")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="fine-tune a task head")
    f.add_argument("--config")
    f.add_argument("--data", required=True)
    f.add_argument("--task", required=True, choices=("bio", "qa", "cls"))
    f.add_argument("--ckpt", help="starting checkpoint; omitted = random init")
    f.add_argument("--out")
    f.add_argument("--log")
    f.add_argument("--epochs", type=int, default=None)
    f.add_argument("--freeze-encoder", action="store_true")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate pre-training objectives")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-attn", help="dump an attention score matrix")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--doc", required=True)
    i.add_argument("--vocab")
    i.add_argument("--out", required=True)
    i.add_argument("--layer", type=int, default=-1)
    i.add_argument("--head", type=int, default=None)
    i.set_defaults(func=cmd_inspect_attn)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
