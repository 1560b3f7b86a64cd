"""CNN multi-label topic classifier.

With ``fake_class=True`` the last of the ``m + 1`` sigmoid outputs scores
"this essay was generated"; the adversarial trainer uses that variant.  With
``fake_class=False`` the same network is the topic-consistency evaluator.
"""

from __future__ import annotations

from typing import List, NamedTuple, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import PAD_ID

EPS = 1e-7


class DiscriminatorOutput(NamedTuple):
    scores: torch.Tensor  # (m + 1,) or (m,) independent sigmoids


class TopicDiscriminator(nn.Module):
    def __init__(self, vocab_size: int, n_topics: int, d_word: int = 64, n_filters: int = 32,
                 widths: Sequence[int] = (2, 3, 4), window: int = 128, fake_class: bool = True,
                 dropout: float = 0.0):
        super().__init__()
        self.n_topics = n_topics
        self.fake_class = fake_class
        self.window = window
        self.widths = tuple(widths)
        self.embedding = nn.Embedding(vocab_size, d_word, padding_idx=PAD_ID)
        self.convs = nn.ModuleList(nn.Conv1d(d_word, n_filters, w) for w in self.widths)
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(n_filters * len(self.widths), n_topics + int(fake_class))
        self.register_buffer("trained", torch.zeros(()))
        for p in self.parameters():
            nn.init.uniform_(p, -0.08, 0.08)
        with torch.no_grad():
            self.embedding.weight[PAD_ID].zero_()

    @property
    def n_outputs(self) -> int:
        return self.n_topics + int(self.fake_class)

    @property
    def fake_index(self) -> int:
        if not self.fake_class:
            raise ValueError("classifier has no fake class")
        return self.n_topics

    def pad(self, essays: Sequence[Sequence[int]]) -> torch.Tensor:
        width = max(self.window, max(self.widths))
        out = torch.full((len(essays), width), PAD_ID, dtype=torch.long)
        for i, e in enumerate(essays):
            if len(e) == 0:
                raise ValueError("cannot classify an empty token sequence")
            e = list(e)[:width]
            out[i, :len(e)] = torch.as_tensor(e, dtype=torch.long)
        return out

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """(B, W) padded ids -> (B, n_outputs) logits."""
        x = self.embedding(ids).transpose(1, 2)
        feats = [F.relu(conv(x)).max(dim=-1).values for conv in self.convs]
        return self.fc(self.dropout(torch.cat(feats, dim=-1)))

    def logits(self, essays: Sequence[Sequence[int]]) -> torch.Tensor:
        return self(self.pad(essays))

    def scores(self, essays: Sequence[Sequence[int]]) -> torch.Tensor:
        return torch.sigmoid(self.logits(essays))


def classify(tokens: Sequence[int], params: TopicDiscriminator) -> DiscriminatorOutput:
    return DiscriminatorOutput(params.scores([tokens])[0])


def bce(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities clipped to [1e-7, 1 - 1e-7]."""
    p = scores.clamp(EPS, 1 - EPS)
    return -(targets * p.log() + (1 - targets) * (1 - p).log()).mean()


def _check_targets(targets: torch.Tensor, width: int) -> None:
    if targets.shape[-1] != width:
        raise ValueError(f"target width {targets.shape[-1]} != {width} outputs")
    if not bool(((targets == 0) | (targets == 1)).all()):
        raise ValueError("targets must be 0/1 vectors")


def disc_loss(batch: Sequence[Tuple[Sequence[int], Sequence[float]]],
              params: TopicDiscriminator) -> torch.Tensor:
    """Mean BCE over every output and batch item."""
    essays = [b[0] for b in batch]
    targets = torch.as_tensor([list(b[1]) for b in batch], dtype=params.fc.weight.dtype)
    _check_targets(targets, params.n_outputs)
    logits = params.logits(essays)
    return F.binary_cross_entropy_with_logits(logits, targets)


def real_target(topic_indices: Sequence[int], params: TopicDiscriminator) -> List[float]:
    t = [0.0] * params.n_outputs
    for j in topic_indices:
        t[j] = 1.0
    return t


def fake_target(params: TopicDiscriminator) -> List[float]:
    t = [0.0] * params.n_outputs
    t[params.fake_index] = 1.0
    return t


def topic_reward(out: DiscriminatorOutput, given_topics: Sequence[int],
                 penalize_fake: bool = False) -> torch.Tensor:
    """Mean sigmoid score over the given topics; optionally minus the fake score."""
    if len(given_topics) == 0:
        raise ValueError("given_topics must not be empty")
    scores = out.scores
    idx = torch.as_tensor(list(given_topics), dtype=torch.long)
    m = scores.shape[-1] - 1  # last score is the fake class
    if int(idx.min()) < 0 or int(idx.max()) >= m:
        raise ValueError(f"topic index out of range [0, {m})")
    reward = scores[..., idx].mean(-1)
    if penalize_fake:
        reward = (reward - scores[..., -1]).clamp(min=0.0)
    return reward
