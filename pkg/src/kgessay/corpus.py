"""Essay corpora, vocabulary, sentiment labels and per-sentence examples."""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Union

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

SENTIMENTS = ("positive", "negative", "neutral")
SENTIMENT_ID = {s: i for i, s in enumerate(SENTIMENTS)}
SHORT_FORMS = {"pos": "positive", "neg": "negative", "neu": "neutral"}


class CorpusError(ValueError):
    pass


def normalize_sentiment(label: str) -> str:
    """Map ``pos``/``neg``/``neu`` (or a full name) to the full label."""
    key = label.strip().lower().rstrip(".")
    key = SHORT_FORMS.get(key, key)
    if key not in SENTIMENT_ID:
        raise CorpusError(f"unknown sentiment label {label!r}")
    return key


def sentiment_index(label: str) -> int:
    return SENTIMENT_ID[normalize_sentiment(label)]


class Vocabulary:
    """Token <-> id table with PAD, UNK, BOS, EOS at ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise CorpusError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.lookup = {t: i for i, t in enumerate(self.tokens)}
        if len(self.lookup) != len(self.tokens):
            raise CorpusError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.lookup

    def id_of(self, token: str) -> int:
        return self.lookup.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.lookup.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


@dataclass
class EssayRecord:
    topics: List[str]
    sentences: List[List[str]]
    sentiments: List[str] = field(default_factory=list)

    def validate(self) -> None:
        if not self.topics:
            raise CorpusError("essay needs at least one topic")
        if not self.sentences:
            raise CorpusError("essay needs at least one sentence")
        if self.sentiments:
            if len(self.sentiments) != len(self.sentences):
                raise CorpusError(
                    f"{len(self.sentiments)} sentiment labels for {len(self.sentences)} sentences")
            for s in self.sentiments:
                if s not in SENTIMENT_ID:
                    raise CorpusError(f"unknown sentiment label {s!r}")

    def to_json(self) -> dict:
        return {"topics": self.topics, "sentences": self.sentences, "sentiments": self.sentiments}


@dataclass
class TrainingExample:
    topics: List[str]
    context: List[List[str]]
    target: List[str]
    sentiment: str


@dataclass(frozen=True)
class Lexicon:
    positive: frozenset
    negative: frozenset

    def __post_init__(self):
        overlap = self.positive & self.negative
        if overlap:
            raise CorpusError(f"lexicon polarity sets overlap: {sorted(overlap)[:5]}")

    @classmethod
    def from_words(cls, positive: Iterable[str], negative: Iterable[str]) -> "Lexicon":
        return cls(frozenset(positive), frozenset(negative))

    @classmethod
    def load(cls, path) -> "Lexicon":
        pos, neg = [], []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2 or parts[1] not in ("pos", "neg"):
                    raise CorpusError(f"{path}:{lineno}: expected 'token<TAB>pos|neg'")
                (pos if parts[1] == "pos" else neg).append(parts[0])
        return cls.from_words(pos, neg)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for w in sorted(self.positive):
                f.write(f"{w}\tpos\n")
            for w in sorted(self.negative):
                f.write(f"{w}\tneg\n")


def lexicon_sentiment(sentence: Sequence[str], lexicon: Lexicon) -> str:
    pos = sum(1 for t in sentence if t in lexicon.positive)
    neg = sum(1 for t in sentence if t in lexicon.negative)
    if pos > neg:
        return "positive"
    if neg > pos:
        return "negative"
    return "neutral"


def _check_str_list(value, lineno: int, key: str, allow_empty: bool = False) -> List[str]:
    if not isinstance(value, list) or not all(isinstance(t, str) and t for t in value):
        raise CorpusError(f"line {lineno}: key {key!r} must be a list of non-empty strings")
    if not value and not allow_empty:
        raise CorpusError(f"line {lineno}: key {key!r} must not be empty")
    return list(value)


def parse_record(obj, lineno: int = 0) -> EssayRecord:
    if not isinstance(obj, dict):
        raise CorpusError(f"line {lineno}: expected a JSON object")
    for key in ("topics", "sentences"):
        if key not in obj:
            raise CorpusError(f"line {lineno}: missing key {key!r}")
    topics = _check_str_list(obj["topics"], lineno, "topics")
    sents = obj["sentences"]
    if not isinstance(sents, list) or not sents:
        raise CorpusError(f"line {lineno}: key 'sentences' must be a non-empty list")
    sentences = [_check_str_list(s, lineno, "sentences") for s in sents]
    raw = obj.get("sentiments") or []
    if not isinstance(raw, list):
        raise CorpusError(f"line {lineno}: key 'sentiments' must be a list")
    try:
        sentiments = [normalize_sentiment(s) for s in raw]
    except (CorpusError, AttributeError):
        raise CorpusError(f"line {lineno}: key 'sentiments' has an invalid label") from None
    record = EssayRecord(topics, sentences, sentiments)
    try:
        record.validate()
    except CorpusError as e:
        raise CorpusError(f"line {lineno}: key 'sentiments': {e}") from None
    return record


def load_corpus(path) -> List[EssayRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"line {lineno}: invalid JSON ({e.msg})") from None
            records.append(parse_record(obj, lineno))
    return records


def save_corpus(records: Iterable[EssayRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def label_records(records: List[EssayRecord], lexicon: Lexicon) -> List[EssayRecord]:
    """Fill in missing sentiment labels with the lexicon oracle."""
    out = []
    for r in records:
        if r.sentiments:
            out.append(r)
        else:
            out.append(EssayRecord(r.topics, r.sentences,
                                   [lexicon_sentiment(s, lexicon) for s in r.sentences]))
    return out


def build_vocab(records: Iterable[EssayRecord], cap: int) -> Vocabulary:
    if cap < 5:
        raise ValueError("vocabulary cap must be >= 5")
    counts = Counter()
    for r in records:
        counts.update(r.topics)
        for s in r.sentences:
            counts.update(s)
    for t in RESERVED:
        counts.pop(t, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(RESERVED) + [t for t, _ in ranked[: cap - len(RESERVED)]])


def topic_labels(records: Iterable[EssayRecord], cap: int = 100) -> List[str]:
    """Most frequent topic words, the label set of the topic classifiers."""
    counts = Counter(t for r in records for t in r.topics)
    return [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]]


def make_examples(records: Iterable[EssayRecord]) -> List[TrainingExample]:
    examples = []
    for n, r in enumerate(records):
        if len(r.sentiments) != len(r.sentences):
            raise CorpusError(f"record {n} has no sentiment labels")
        for i, (target, senti) in enumerate(zip(r.sentences, r.sentiments)):
            examples.append(TrainingExample(list(r.topics), [list(s) for s in r.sentences[:i]],
                                            list(target), senti))
    return examples


def split_train_valid(records: Sequence, fraction: float = 0.1, seed: int = 0):
    """Seeded shuffle, then hold out ``fraction`` of the items."""
    order = list(range(len(records)))
    random.Random(seed).shuffle(order)
    n_valid = int(round(len(records) * fraction))
    valid = [records[i] for i in sorted(order[:n_valid])]
    train = [records[i] for i in sorted(order[n_valid:])]
    return train, valid


# ---------------------------------------------------------------------------
# toy data

TOY_TOPICS: Dict[str, List[str]] = {
    "law": ["court", "judge", "rights", "justice", "rule", "police", "crime", "lawyer"],
    "education": ["school", "student", "teacher", "class", "exam", "campus", "study", "lesson"],
    "love": ["heart", "boyfriend", "girlfriend", "kiss", "wedding", "romance", "date", "couple"],
    "experience": ["memory", "journey", "past", "lesson_learned", "trip", "story", "growth", "moment"],
    "emotion": ["feeling", "tears", "smile", "mood", "anger", "fear", "joyful_tears", "mind"],
    "family": ["mother", "father", "home", "sister", "brother", "dinner", "child", "parents"],
    "work": ["office", "boss", "salary", "colleague", "project", "meeting", "career", "deadline"],
    "health": ["doctor", "hospital", "exercise", "diet", "sleep", "medicine", "body", "smoking"],
    "travel": ["train", "city", "hotel", "ticket", "mountain", "beach", "map", "luggage"],
    "music": ["song", "guitar", "concert", "piano", "melody", "band", "singer", "rhythm"],
    "sports": ["football", "match", "team", "coach", "goal", "runner", "stadium", "training"],
    "food": ["rice", "noodle", "restaurant", "cook", "kitchen", "soup", "taste", "breakfast"],
}

TOY_POSITIVE = ["happy", "great", "wonderful", "love_it", "proud", "best", "glad", "beautiful",
                "excellent", "warm", "hopeful", "bright"]
TOY_NEGATIVE = ["sad", "terrible", "awful", "angry", "worst", "broken", "lonely", "bad",
                "painful", "bitter", "afraid", "gloomy"]
SUBJECTS = ["i", "we", "they"]
INTENSIFIERS = ["very", "really", "so"]
CLOSERS = ["today", "again", "this_year", "at_last", "every_day"]

# Sentence skeletons.  "C" is a topic content word, "S" a sentiment word,
# "I" an optional intensifier, "X" a subject.
POLAR_TEMPLATES = [
    ["X", "feel", "I", "S", "about", "the", "C"],
    ["the", "C", "was", "I", "S", "for", "our", "C"],
    ["X", "had", "a", "S", "time", "with", "the", "C"],
    ["my", "C", "and", "the", "C", "made", "me", "S", "and", "S"],
]
NEUTRAL_TEMPLATES = [
    ["X", "went", "to", "the", "C"],
    ["the", "C", "is", "near", "the", "C"],
    ["X", "talked", "about", "the", "C", "and", "the", "C"],
    ["my", "C", "and", "the", "C", "stayed", "at", "home"],
]
FILLER = SUBJECTS + INTENSIFIERS + CLOSERS + sorted(
    {w for t in POLAR_TEMPLATES + NEUTRAL_TEMPLATES for w in t if w not in ("C", "S", "I", "X")})

RELATIONS = ["related_to", "part_of", "used_for", "at_location", "has_property", "is_a"]


def toy_lexicon() -> Lexicon:
    return Lexicon.from_words(TOY_POSITIVE, TOY_NEGATIVE)


def content_words(topic: str, topic_pool: Union[Sequence[str], Mapping[str, Sequence[str]]]) -> List[str]:
    if isinstance(topic_pool, Mapping) and topic in topic_pool:
        return list(topic_pool[topic])
    if topic in TOY_TOPICS:
        return list(TOY_TOPICS[topic])
    return [f"{topic}_w{k}" for k in range(8)]


def synthesize_toy_corpus(seed: int, n_essays: int,
                          topic_pool: Union[Sequence[str], Mapping[str, Sequence[str]]],
                          sentiment_lexicon: Lexicon) -> List[EssayRecord]:
    """Template essays whose sentences carry planted topic and sentiment evidence.

    Positive (negative) sentences contain one or two positive (negative)
    lexicon words and none of the other polarity; neutral sentences contain
    none, so :func:`lexicon_sentiment` recovers every stored label.
    """
    topics_all = list(topic_pool)
    if not topics_all:
        raise ValueError("topic_pool must not be empty")
    if n_essays < 1:
        raise ValueError("n_essays must be >= 1")
    rng = random.Random(seed)
    polar = {"positive": sorted(sentiment_lexicon.positive),
             "negative": sorted(sentiment_lexicon.negative)}
    lexical = sentiment_lexicon.positive | sentiment_lexicon.negative
    records = []
    for _ in range(n_essays):
        m = rng.randint(1, min(5, len(topics_all)))
        topics = rng.sample(topics_all, m)
        pool = []
        for t in topics:
            pool.append(t)
            pool.extend(w for w in content_words(t, topic_pool) if w not in lexical)
        sentences, labels = [], []
        for _ in range(rng.randint(3, 6)):
            label = rng.choice(SENTIMENTS)
            template = rng.choice(NEUTRAL_TEMPLATES if label == "neutral" else POLAR_TEMPLATES)
            words = []
            for slot in template:
                if slot == "C":
                    words.append(rng.choice(pool))
                elif slot == "S":
                    words.append(rng.choice(polar[label]))
                elif slot == "X":
                    words.append(rng.choice(SUBJECTS))
                elif slot == "I":
                    if rng.random() < 0.5:
                        words.append(rng.choice(INTENSIFIERS))
                else:
                    words.append(slot)
            while len(words) < 5 or (len(words) < 15 and rng.random() < 0.3):
                words.append(rng.choice(CLOSERS))
            sentences.append(words)
            labels.append(label)
        records.append(EssayRecord(topics, sentences, labels))
    return records


def toy_triples(topic_pool: Union[Sequence[str], Mapping[str, Sequence[str]]], seed: int = 0):
    """A small ConceptNet-like triple list linking topics to their content words."""
    from .knowledge_graph import Triple

    rng = random.Random(seed)
    out = []
    for topic in topic_pool:
        for k, word in enumerate(content_words(topic, topic_pool)):
            rel = RELATIONS[k % len(RELATIONS)]
            if k % 2 == 0:
                out.append((Triple(topic, rel, word), round(rng.uniform(0.5, 2.0), 3)))
            else:
                out.append((Triple(word, rel, topic), round(rng.uniform(0.5, 2.0), 3)))
    if "law" in topic_pool:
        out.append((Triple("law", "antonym", "disorder"), 1.0))
        out.append((Triple("law", "part_of", "theory"), 1.0))
    return out
