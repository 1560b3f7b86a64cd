"""Commonsense triple store and per-essay topic subgraphs.

Triples are read from a 4-column TSV (``head  relation  tail  weight``).
Each topic word retrieves the triples it takes part in; the other endpoint
of every such triple becomes a *neighbor* of the topic, tagged with the slot
it occupies (head or tail) so the attention layer can score the two cases
with different projections.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Sequence

import numpy as np

from .corpus import Vocabulary


class KnowledgeGraphError(ValueError):
    pass


class Position(enum.IntEnum):
    HEAD_NEIGHBOR = 0  # neighbor fills the head slot, topic is the tail
    TAIL_NEIGHBOR = 1  # neighbor fills the tail slot, topic is the head


HEAD_NEIGHBOR = Position.HEAD_NEIGHBOR
TAIL_NEIGHBOR = Position.TAIL_NEIGHBOR


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        for name in ("head", "relation", "tail"):
            value = getattr(self, name)
            if not value or any(ch.isspace() for ch in value):
                raise KnowledgeGraphError(f"invalid triple field {name}={value!r}")


@dataclass
class TripleStore:
    triples: List[Triple] = field(default_factory=list)
    index: Dict[str, List[int]] = field(default_factory=dict)
    relation_vocab: Dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_triples(cls, triples: Iterable[Triple]) -> "TripleStore":
        store = cls()
        seen = set()
        for t in triples:
            key = (t.head, t.relation, t.tail)
            if key in seen:
                continue
            seen.add(key)
            pos = len(store.triples)
            store.triples.append(t)
            store.index.setdefault(t.head, []).append(pos)
            if t.tail != t.head:
                store.index.setdefault(t.tail, []).append(pos)
            store.relation_vocab.setdefault(t.relation, len(store.relation_vocab))
        return store

    def __len__(self) -> int:
        return len(self.triples)

    @property
    def num_relations(self) -> int:
        return len(self.relation_vocab)

    def relations(self) -> List[str]:
        return sorted(self.relation_vocab, key=self.relation_vocab.__getitem__)


def load_triples(path, min_weight: float = 0.0) -> TripleStore:
    """Read a triple TSV, keeping lines whose weight is at least ``min_weight``.

    Duplicated ``(head, relation, tail)`` lines collapse to one triple.
    Concepts are lowercased.
    """
    triples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise KnowledgeGraphError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            head, rel, tail, weight = parts
            try:
                w = float(weight)
            except ValueError:
                raise KnowledgeGraphError(
                    f"{path}:{lineno}: non-numeric weight {weight!r}") from None
            if w < min_weight:
                continue
            try:
                triples.append(Triple(head.strip().lower(), rel.strip(), tail.strip().lower()))
            except KnowledgeGraphError as e:
                raise KnowledgeGraphError(f"{path}:{lineno}: {e}") from None
    return TripleStore.from_triples(triples)


def save_triples(store: TripleStore, path, weight: float = 1.0) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in store.triples:
            f.write(f"{t.head}\t{t.relation}\t{t.tail}\t{weight}\n")


class GraphEntry(NamedTuple):
    neighbor: str
    relation_id: int
    position: Position
    source_topic: str


@dataclass(frozen=True)
class TopicKnowledgeGraph:
    topics: tuple
    entries: tuple

    def __len__(self) -> int:
        return len(self.entries)


def build_topic_graph(store: TripleStore, topics: Sequence[str],
                      max_per_topic: int) -> TopicKnowledgeGraph:
    """One-hop subgraph around each topic, truncated in store order."""
    if max_per_topic < 1:
        raise ValueError("max_per_topic must be >= 1")
    entries = []
    for topic in topics:
        taken = 0
        for pos in store.index.get(topic, ()):
            if taken == max_per_topic:
                break
            t = store.triples[pos]
            if t.head == t.tail:
                # a self-loop carries no neighbor
                continue
            rel_id = store.relation_vocab[t.relation]
            if t.head == topic:
                entries.append(GraphEntry(t.tail, rel_id, TAIL_NEIGHBOR, topic))
            else:
                entries.append(GraphEntry(t.head, rel_id, HEAD_NEIGHBOR, topic))
            taken += 1
    return TopicKnowledgeGraph(tuple(topics), tuple(entries))


@dataclass(frozen=True)
class GraphView:
    neighbor_embedding_ids: np.ndarray
    relation_ids: np.ndarray
    position_flags: np.ndarray

    def __post_init__(self):
        n = len(self.neighbor_embedding_ids)
        if len(self.relation_ids) != n or len(self.position_flags) != n:
            raise KnowledgeGraphError("graph view arrays must share one length")

    def __len__(self) -> int:
        return len(self.neighbor_embedding_ids)

    @classmethod
    def empty(cls) -> "GraphView":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy())


def graph_view(graph: TopicKnowledgeGraph, word_vocab: Vocabulary) -> GraphView:
    ids = np.array([word_vocab.id_of(e.neighbor) for e in graph.entries], dtype=np.int64)
    rels = np.array([e.relation_id for e in graph.entries], dtype=np.int64)
    flags = np.array([int(e.position) for e in graph.entries], dtype=np.int64)
    return GraphView(ids, rels, flags)
