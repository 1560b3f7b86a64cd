"""Automatic metrics for generated essays."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.feature_extraction.text import TfidfVectorizer
from sklearn.metrics import roc_auc_score

from .corpus import (SENTIMENTS, EssayRecord, Lexicon, Vocabulary, lexicon_sentiment,
                     normalize_sentiment)
from .discriminator import TopicDiscriminator


class MetricsError(ValueError):
    pass


@dataclass
class RunItem:
    topics: List[str]
    sentiments: List[str]
    sentences: List[List[str]]
    reference: Optional[List[List[str]]] = None

    @property
    def tokens(self) -> List[str]:
        return [t for s in self.sentences for t in s]

    @property
    def reference_tokens(self) -> List[str]:
        if self.reference is None:
            raise MetricsError("item has no reference essay")
        return [t for s in self.reference for t in s]


@dataclass
class GenerationRun:
    items: List[RunItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    @classmethod
    def load(cls, path) -> "GenerationRun":
        items = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                try:
                    items.append(RunItem(list(obj["topics"]),
                                         [normalize_sentiment(s) for s in obj.get("sentiments", [])],
                                         [list(s) for s in obj["sentences"]],
                                         obj.get("reference")))
                except KeyError as e:
                    raise MetricsError(f"line {lineno}: missing key {e}") from None
        return cls(items)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for it in self.items:
                f.write(json.dumps({"topics": it.topics, "sentiments": it.sentiments,
                                    "sentences": it.sentences, "reference": it.reference},
                                   ensure_ascii=False) + "\n")


def ngrams(tokens: Sequence[str], n: int):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                max_n: int = 4) -> float:
    """Corpus BLEU with uniform weights, clipped counts, no smoothing."""
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = Counter(ngrams(hyp, n)), Counter(ngrams(ref, n))
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def bleu(run: GenerationRun) -> float:
    hyps, refs = [], []
    for n, it in enumerate(run.items):
        if it.reference is None:
            raise MetricsError(f"item {n} has no reference essay")
        hyps.append(it.tokens)
        refs.append(it.reference_tokens)
    return corpus_bleu(hyps, refs)


def distinct_n(essays: Sequence[Sequence[str]], n: int) -> float:
    if n not in (1, 2):
        raise MetricsError("n must be 1 or 2")
    grams = [g for e in essays for g in ngrams(list(e), n)]
    if not grams:
        raise MetricsError(f"no {n}-grams in the essays")
    return len(set(grams)) / len(grams)


def consistency(run: GenerationRun, classifier: TopicDiscriminator, vocab: Vocabulary,
                labels: Sequence[str]) -> float:
    """100 x mean over items of the mean classifier score on the item's topics.

    Topics outside ``labels`` are ignored; items with none left are skipped.
    """
    if not bool(classifier.trained):
        raise MetricsError("consistency classifier has not been trained")
    index = {t: i for i, t in enumerate(labels)}
    essays, topic_ids = [], []
    for it in run.items:
        ids = [index[t] for t in it.topics if t in index]
        if ids:
            essays.append(vocab.encode(it.tokens) or vocab.encode(["</s>"]))
            topic_ids.append(ids)
    if not essays:
        raise MetricsError("no item has a known topic label")
    classifier.eval()
    with torch.no_grad():
        scores = classifier.scores(essays)
    per_item = [float(scores[k, ids].mean()) for k, ids in enumerate(topic_ids)]
    return 100.0 * float(np.mean(per_item))


def consistency_from_scores(per_topic_scores: Sequence[Sequence[float]]) -> float:
    """Same aggregation as :func:`consistency` on precomputed topic scores."""
    return 100.0 * float(np.mean([np.mean(s) for s in per_topic_scores]))


def bigram_jaccard(a: Sequence[str], b: Sequence[str]) -> float:
    sa, sb = set(ngrams(list(a), 2)), set(ngrams(list(b), 2))
    union = sa | sb
    return len(sa & sb) / len(union) if union else 0.0


def novelty(run: GenerationRun, training_corpus: Sequence[EssayRecord], k: int = 10) -> float:
    """1 - mean over items of the max bigram Jaccard against the k training
    essays whose topic words are closest by TF-IDF cosine."""
    if k < 1:
        raise MetricsError("k must be >= 1")
    if not training_corpus:
        raise MetricsError("training corpus is empty")
    vec = TfidfVectorizer(analyzer=lambda toks: toks)
    train_m = vec.fit_transform([r.topics for r in training_corpus])
    query_m = vec.transform([it.topics for it in run.items])
    sims = (query_m @ train_m.T).toarray()
    train_tokens = [[t for s in r.sentences for t in s] for r in training_corpus]
    maxima = []
    for q, it in enumerate(run.items):
        top = np.argsort(-sims[q], kind="stable")[:k]
        maxima.append(max(bigram_jaccard(it.tokens, train_tokens[j]) for j in top))
    return 1.0 - float(np.mean(maxima))


def sentiment_prf(run: GenerationRun, lexicon: Lexicon) -> Tuple[float, float, float]:
    requested, predicted = [], []
    for it in run.items:
        for want, sent in zip(it.sentiments, it.sentences):
            requested.append(normalize_sentiment(want))
            predicted.append(lexicon_sentiment(sent, lexicon))
    return macro_prf(requested, predicted)


def macro_prf(requested: Sequence[str], predicted: Sequence[str]) -> Tuple[float, float, float]:
    """Macro precision/recall over the classes present in either sequence;
    F1 is the harmonic mean of the two macro averages."""
    if len(requested) != len(predicted):
        raise MetricsError("label sequences differ in length")
    classes = [c for c in SENTIMENTS if c in set(requested) | set(predicted)]
    if not classes:
        return 0.0, 0.0, 0.0
    precisions, recalls = [], []
    for c in classes:
        tp = sum(1 for r, p in zip(requested, predicted) if r == c and p == c)
        n_pred = sum(1 for p in predicted if p == c)
        n_true = sum(1 for r in requested if r == c)
        precisions.append(tp / n_pred if n_pred else 0.0)
        recalls.append(tp / n_true if n_true else 0.0)
    p = sum(precisions) / len(classes)
    r = sum(recalls) / len(classes)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def real_fake_auc(discriminator: TopicDiscriminator, real: Sequence[Sequence[int]],
                  fake: Sequence[Sequence[int]]) -> float:
    """ROC AUC of the fake-class score separating generated from real essays."""
    discriminator.eval()
    with torch.no_grad():
        s = discriminator.scores(list(real) + list(fake))[:, discriminator.fake_index]
    y = [0] * len(real) + [1] * len(fake)
    return float(roc_auc_score(y, s.numpy()))


@dataclass
class MetricsReport:
    bleu: Optional[float] = None
    dist1: Optional[float] = None
    dist2: Optional[float] = None
    consistency: Optional[float] = None
    novelty: Optional[float] = None
    senti_precision: Optional[float] = None
    senti_recall: Optional[float] = None
    senti_f1: Optional[float] = None

    def to_json(self) -> str:
        doc = {"note": "consistency = 100 x mean classifier probability on the given topics; "
                       "sentiment P/R are macro-averaged"}
        doc.update(asdict(self))
        return json.dumps(doc, indent=2)

    def table(self) -> str:
        rows = [("BLEU", self.bleu, 100), ("Dist-1", self.dist1, 100), ("Dist-2", self.dist2, 100),
                ("Consistency", self.consistency, None), ("Novelty", self.novelty, 100),
                ("Precision", self.senti_precision, None), ("Recall", self.senti_recall, None),
                ("Senti-F1", self.senti_f1, None)]
        lines = [f"{'metric':<12} {'value':>10} {'x100':>10}"]
        for name, v, scale in rows:
            if v is None:
                continue
            scaled = f"{v * scale:>10.2f}" if scale else f"{'':>10}"
            lines.append(f"{name:<12} {v:>10.4f} {scaled}")
        return "\n".join(lines)


def evaluate_run(run: GenerationRun, lexicon: Optional[Lexicon] = None,
                 training_corpus: Sequence[EssayRecord] = (), classifier=None,
                 vocab: Optional[Vocabulary] = None, labels: Sequence[str] = (),
                 novelty_k: int = 10) -> MetricsReport:
    """Every metric whose inputs are available."""
    report = MetricsReport()
    if run.items and all(it.reference is not None for it in run.items):
        report.bleu = bleu(run)
    essays = [it.tokens for it in run.items]
    for n in (1, 2):
        try:
            setattr(report, f"dist{n}", distinct_n(essays, n))
        except MetricsError:
            pass
    if classifier is not None and vocab is not None:
        report.consistency = consistency(run, classifier, vocab, labels)
    if training_corpus:
        report.novelty = novelty(run, training_corpus, novelty_k)
    if lexicon is not None and any(it.sentiments for it in run.items):
        report.senti_precision, report.senti_recall, report.senti_f1 = sentiment_prf(run, lexicon)
    return report
