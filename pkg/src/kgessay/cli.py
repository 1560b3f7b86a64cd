"""Command-line entry point.

    kgessay synth-data --out corpus.jsonl --n-essays 2000
    kgessay build-kg --triples kg.tsv --min-weight 0.5
    kgessay train --corpus corpus.jsonl --triples kg.tsv --lexicon lex.tsv --out-dir run
    kgessay generate --run-dir run --topics law,education --sentiments neu,pos,neg,neg,neu
    kgessay evaluate --run generated.jsonl --lexicon lex.tsv

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from .checkpoint import CheckpointError, load_arrays, load_module_state, save_module
from .config import FIELD_TYPES, ConfigError, RunConfig, build_config
from .corpus import (TOY_TOPICS, CorpusError, Lexicon, Vocabulary, build_vocab, label_records,
                     load_corpus, make_examples, normalize_sentiment, save_corpus,
                     split_train_valid, synthesize_toy_corpus, toy_lexicon, toy_triples,
                     topic_labels)
from .discriminator import TopicDiscriminator
from .evaluation import GenerationRun, MetricsError, evaluate_run
from .generator import Generator, ModelDims, generate_essay, strip_eos
from .knowledge_graph import KnowledgeGraphError, TripleStore, load_triples, save_triples
from .training import NonFiniteError, Trainer, train_topic_classifier

log = logging.getLogger("kgessay")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (flags win over --config)")
    for name, kind in FIELD_TYPES.items():
        flag = "--" + name.replace("_", "-")
        if kind is bool:
            g.add_argument(flag, dest=name, default=None, type=_parse_bool, metavar="BOOL")
        else:
            g.add_argument(flag, dest=name, default=None, type=kind)


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {raw!r}")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgessay", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a synthetic essay corpus")
    p.add_argument("--out", required=True, help="corpus JSONL to write")
    p.add_argument("--n-essays", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--topics", default=None,
                   help="comma-separated topic pool (default: built-in toy topics)")
    p.add_argument("--lexicon-out", default=None, help="also write the sentiment lexicon TSV")
    p.add_argument("--triples-out", default=None, help="also write a toy triple TSV")

    p = sub.add_parser("build-kg", help="validate and filter a triple TSV")
    p.add_argument("--triples", required=True)
    p.add_argument("--min-weight", type=float, default=0.0)
    p.add_argument("--out", default=None, help="write the filtered, de-duplicated triples")

    p = sub.add_parser("train", help="stage-1 and/or adversarial training")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--stage", choices=["1", "2", "both"], default="1")
    _add_config_flags(p)

    p = sub.add_parser("generate", help="generate essays from a trained run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--topics", required=True, help="comma-separated topic words")
    p.add_argument("--sentiments", required=True, help="comma-separated pos/neg/neu labels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--deterministic", action="store_true", help="use the prior mean as z")
    p.add_argument("--triples", default=None, help="triple TSV (default: the one used in training)")
    p.add_argument("--out", default=None, help="append the essay to this run JSONL")

    p = sub.add_parser("evaluate", help="compute metrics for a generation run")
    p.add_argument("--run", required=True, help="run JSONL (topics, sentiments, sentences, reference)")
    p.add_argument("--lexicon", default=None)
    p.add_argument("--corpus", default=None, help="training corpus for novelty")
    p.add_argument("--run-dir", default=None, help="trained run with a consistency classifier")
    p.add_argument("--novelty-k", type=int, default=10)
    p.add_argument("--out", default=None, help="write the JSON report here")
    return parser


# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    pool = args.topics.split(",") if args.topics else TOY_TOPICS
    lexicon = toy_lexicon()
    records = synthesize_toy_corpus(args.seed, args.n_essays, pool, lexicon)
    save_corpus(records, args.out)
    if args.lexicon_out:
        lexicon.save(args.lexicon_out)
    if args.triples_out:
        with open(args.triples_out, "w", encoding="utf-8") as f:
            for t, w in toy_triples(pool, args.seed):
                f.write(f"{t.head}\t{t.relation}\t{t.tail}\t{w}\n")
    log.info("wrote %d essays to %s", len(records), args.out)
    return 0


def cmd_build_kg(args) -> int:
    store = load_triples(args.triples, args.min_weight)
    stats = {"triples": len(store), "concepts": len(store.index),
             "relations": store.num_relations}
    print(json.dumps(stats))
    if args.out:
        save_triples(store, args.out)
    return 0


def _config_from_args(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return build_config(args.config, overrides).resolve_paths()


def _load_store(cfg: RunConfig) -> TripleStore:
    if cfg.triples is None:
        return TripleStore()
    return load_triples(cfg.triples, cfg.min_weight)


def _model_config(cfg: RunConfig, vocab: Vocabulary, store: TripleStore, stage: int) -> dict:
    dims = cfg.dims()
    return {"kind": "generator", "stage": stage, "vocab_size": len(vocab),
            "num_relations": store.num_relations, "dims": dims.__dict__,
            "triples": cfg.triples, "min_weight": cfg.min_weight, "max_len": cfg.max_len}


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if cfg.corpus is None:
        raise UsageError("train: --corpus (or corpus in --config) is required")
    out = Path(cfg.out_dir)
    stage1_ckpt = out / "generator.ckpt"
    if args.stage == "2" and not stage1_ckpt.exists():
        raise UsageError(f"train --stage 2 needs a stage-1 checkpoint at {stage1_ckpt}; "
                         "run --stage 1 first")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")

    records = load_corpus(cfg.corpus)
    lexicon = Lexicon.load(cfg.lexicon) if cfg.lexicon else None
    if any(not r.sentiments for r in records):
        if lexicon is None:
            raise UsageError("train: corpus has unlabeled essays; pass --lexicon")
        records = label_records(records, lexicon)
    train_recs, valid_recs = split_train_valid(records, cfg.valid_fraction, cfg.seed)
    store = _load_store(cfg)
    labels = topic_labels(train_recs, cfg.topic_cap)

    torch.manual_seed(cfg.seed)
    if args.stage == "2":
        model, vocab, _ = load_generator(out)
    else:
        vocab = build_vocab(train_recs, cfg.vocab_cap)
        vocab.save(out / "vocab.txt")
        (out / "labels.txt").write_text("\n".join(labels) + "\n", encoding="utf-8")
        model = Generator(len(vocab), store.num_relations, cfg.dims())

    disc = TopicDiscriminator(len(vocab), len(labels), fake_class=True)
    with open(out / "train_log.jsonl", "a", encoding="utf-8") as logf:
        trainer = Trainer(model, vocab, store, cfg.stage1(), cfg.stage2(), disc, labels, logf)
        if args.stage in ("1", "both"):
            trainer.train_stage1(make_examples(train_recs), make_examples(valid_recs))
            save_module(stage1_ckpt, model, _model_config(cfg, vocab, store, 1))
            clf = TopicDiscriminator(len(vocab), len(labels), fake_class=False)
            train_topic_classifier(clf, train_recs, vocab, labels, steps=cfg.classifier_steps,
                                   seed=cfg.seed)
            save_module(out / "classifier.ckpt", clf, {"kind": "classifier",
                                                       "vocab_size": len(vocab),
                                                       "n_topics": len(labels)})
        if args.stage in ("2", "both"):
            trainer.train_stage2(train_recs)
            save_module(out / "generator.ckpt", model, _model_config(cfg, vocab, store, 2))
            save_module(out / "discriminator.ckpt", disc, {"kind": "discriminator",
                                                           "vocab_size": len(vocab),
                                                           "n_topics": len(labels)})
    log.info("training finished; outputs in %s", out)
    return 0


def load_generator(run_dir: Path):
    run_dir = Path(run_dir)
    path = run_dir / "generator.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"no generator checkpoint at {path}")
    arrays, config = load_arrays(path)
    vocab = Vocabulary.load(run_dir / "vocab.txt")
    model = Generator(config["vocab_size"], config["num_relations"], ModelDims(**config["dims"]))
    load_module_state(model, arrays)
    model.eval()
    return model, vocab, config


def load_classifier(run_dir: Path):
    run_dir = Path(run_dir)
    arrays, config = load_arrays(run_dir / "classifier.ckpt")
    clf = TopicDiscriminator(config["vocab_size"], config["n_topics"], fake_class=False)
    load_module_state(clf, arrays)
    labels = (run_dir / "labels.txt").read_text(encoding="utf-8").split()
    return clf, labels


def cmd_generate(args) -> int:
    topics = [t.strip().lower() for t in args.topics.split(",") if t.strip()]
    if not topics:
        raise UsageError("generate: --topics is empty")
    try:
        sentiments = [normalize_sentiment(s) for s in args.sentiments.split(",") if s.strip()]
    except CorpusError as e:
        raise UsageError(f"generate: {e}") from None
    if not sentiments:
        raise UsageError("generate: --sentiments is empty")
    model, vocab, config = load_generator(Path(args.run_dir))
    triples = args.triples or config.get("triples")
    store = load_triples(triples, config.get("min_weight", 0.0)) if triples else TripleStore()
    if store.num_relations > model.num_relations:
        raise UsageError("generate: triple file has more relations than the trained model")
    max_len = args.max_len or config.get("max_len", 20)
    essay = generate_essay(topics, sentiments, store, model, vocab, max_len=max_len,
                           seed=args.seed, deterministic=args.deterministic)
    sentences = [strip_eos(s) for s in essay]
    if args.out:
        with open(args.out, "a", encoding="utf-8") as f:
            f.write(json.dumps({"topics": topics, "sentiments": sentiments,
                                "sentences": sentences, "reference": None}) + "\n")
    for label, sent in zip(sentiments, sentences):
        print(f"[{label[:3]}] {' '.join(sent)}")
    return 0


def cmd_evaluate(args) -> int:
    run = GenerationRun.load(args.run)
    lexicon = Lexicon.load(args.lexicon) if args.lexicon else None
    train = load_corpus(args.corpus) if args.corpus else ()
    clf = vocab = None
    labels: Sequence[str] = ()
    if args.run_dir:
        clf, labels = load_classifier(Path(args.run_dir))
        vocab = Vocabulary.load(Path(args.run_dir) / "vocab.txt")
    report = evaluate_run(run, lexicon, train, clf, vocab, labels, args.novelty_k)
    doc = report.to_json()
    if args.out:
        Path(args.out).write_text(doc + "\n", encoding="utf-8")
    print(doc)
    print(report.table(), file=sys.stderr)
    return 0


COMMANDS = {"synth-data": cmd_synth_data, "build-kg": cmd_build_kg, "train": cmd_train,
            "generate": cmd_generate, "evaluate": cmd_evaluate}


def run(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + " | ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, CorpusError, KnowledgeGraphError, CheckpointError, MetricsError,
            NonFiniteError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
