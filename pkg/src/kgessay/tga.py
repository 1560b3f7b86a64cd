"""Topic graph attention.

Every neighbor ``o_n`` of the topic words is scored against a query ``q``::

    beta_n = (W1 q)^T tanh(W2 r_n + W3 o_n)   neighbor in the head slot
    beta_n = (W1 q)^T tanh(W2 r_n + W4 o_n)   neighbor in the tail slot

and the graph vector is ``sum_n softmax(beta)_n o_n``.  An empty graph
yields the zero vector.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .knowledge_graph import GraphView, HEAD_NEIGHBOR


class TGAResult(NamedTuple):
    graph_vector: torch.Tensor
    alphas: torch.Tensor
    betas: torch.Tensor


class TopicGraphAttention(nn.Module):
    """Holds W1..W4 and the relation embedding table."""

    def __init__(self, d_query: int, d_embed: int, num_relations: int,
                 d_attn: Optional[int] = None, d_rel: Optional[int] = None):
        super().__init__()
        d_attn = d_attn or d_embed
        d_rel = d_rel or d_embed
        self.d_query, self.d_embed = d_query, d_embed
        self.W1 = nn.Linear(d_query, d_attn, bias=False)
        self.W2 = nn.Linear(d_rel, d_attn, bias=False)
        self.W3 = nn.Linear(d_embed, d_attn, bias=False)
        self.W4 = nn.Linear(d_embed, d_attn, bias=False)
        # at least one row so an empty store still yields a valid module
        self.relation_table = nn.Embedding(max(num_relations, 1), d_rel)

    def keys(self, neighbors: torch.Tensor, relation_ids: torch.Tensor,
             flags: torch.Tensor) -> torch.Tensor:
        """``tanh(W2 r_n + W3/W4 o_n)`` for (..., N) graph entries.

        Independent of the query, so a decoder computes it once per sentence.
        """
        rel = self.W2(self.relation_table(relation_ids))
        is_head = (flags == int(HEAD_NEIGHBOR)).unsqueeze(-1)
        ent = torch.where(is_head, self.W3(neighbors), self.W4(neighbors))
        return torch.tanh(rel + ent)

    def scores(self, query: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        if query.shape[-1] != self.d_query:
            raise ValueError(f"query has dimension {query.shape[-1]}, W1 expects {self.d_query}")
        return (keys * self.W1(query).unsqueeze(-2)).sum(-1)

    def attend(self, query: torch.Tensor, keys: torch.Tensor, neighbors: torch.Tensor,
               mask: Optional[torch.Tensor] = None) -> TGAResult:
        """Batched attention.  ``mask`` (B, N) marks real entries; rows with no
        real entry produce a zero graph vector and all-zero weights."""
        betas = self.scores(query, keys)
        if mask is None:
            if betas.shape[-1] == 0:
                alphas = betas
            else:
                alphas = torch.softmax(betas, dim=-1)
        else:
            m = mask.to(betas.dtype)
            filled = betas.masked_fill(~mask, torch.finfo(betas.dtype).min)
            alphas = torch.softmax(filled, dim=-1) * m if betas.shape[-1] else betas
        g = (alphas.unsqueeze(-1) * neighbors).sum(-2)
        return TGAResult(g, alphas, betas)

    def forward(self, query, neighbors, relation_ids, flags, mask=None) -> TGAResult:
        return self.attend(query, self.keys(neighbors, relation_ids, flags), neighbors, mask)


def _view_tensors(view: GraphView, embeddings, device=None):
    table = embeddings.weight if isinstance(embeddings, nn.Embedding) else embeddings
    ids = torch.as_tensor(np.asarray(view.neighbor_embedding_ids), dtype=torch.long, device=table.device)
    rel = torch.as_tensor(np.asarray(view.relation_ids), dtype=torch.long, device=table.device)
    flags = torch.as_tensor(np.asarray(view.position_flags), dtype=torch.long, device=table.device)
    return table[ids], rel, flags


def tga_scores(query: torch.Tensor, view: GraphView, params: TopicGraphAttention,
               embeddings) -> torch.Tensor:
    """Raw correlation scores ``beta`` (length N) for one graph."""
    if query.shape[-1] != params.d_query:
        raise ValueError(f"query has dimension {query.shape[-1]}, W1 expects {params.d_query}")
    neighbors, rel, flags = _view_tensors(view, embeddings)
    return params.scores(query, params.keys(neighbors, rel, flags))


def tga_attend(query: torch.Tensor, view: GraphView, params: TopicGraphAttention,
               embeddings) -> TGAResult:
    """Attention over a single graph; ``N = 0`` gives a zero graph vector."""
    if query.shape[-1] != params.d_query:
        raise ValueError(f"query has dimension {query.shape[-1]}, W1 expects {params.d_query}")
    neighbors, rel, flags = _view_tensors(view, embeddings)
    if len(view) == 0:
        empty = query.new_zeros(0)
        return TGAResult(query.new_zeros(neighbors.shape[-1]), empty, empty)
    return params(query, neighbors, rel, flags)
