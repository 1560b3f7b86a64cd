"""Two-stage training.

Stage 1 minimizes the CVAE objective ``anneal * KL + reconstruction +
bow_weight * BOW`` with teacher forcing.  Stage 2 alternates policy-gradient
updates of the generator (reward: the discriminator's scores on the essay's
own topics) with updates of the multi-label discriminator.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import (BOS_ID, EOS_ID, SENTIMENT_ID, EssayRecord, TrainingExample, Vocabulary,
                     make_examples)
from .discriminator import TopicDiscriminator, fake_target, real_target
from .generator import Batch, Generator, make_batch, make_batch_ids, topic_view
from .knowledge_graph import GraphView, TripleStore

log = logging.getLogger(__name__)

MAX_GRAD_NORM = 10.0


class NonFiniteError(RuntimeError):
    pass


@dataclass
class Stage1Config:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    kl_anneal_steps: Optional[int] = None  # None: the first two epochs
    bow_weight: float = 1.0
    grad_clip_norm: float = MAX_GRAD_NORM
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size must be positive, epochs >= 0")
        if self.bow_weight < 0 or self.grad_clip_norm <= 0:
            raise ValueError("bow_weight must be >= 0 and grad_clip_norm > 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass
class Stage2Config:
    learning_rate: float = 1e-5
    d_learning_rate: float = 1e-3
    g_steps: int = 1
    d_steps: int = 1
    rounds: int = 3
    batch_size: int = 32
    rollout_mode: str = "sequence_reward"
    rollouts: int = 4
    baseline_decay: float = 0.95
    penalize_fake: bool = False
    stage1_mix: float = 0.0  # weight of the stage-1 loss mixed into generator updates
    max_len: int = 20
    pretrain_d_factor: int = 5

    def __post_init__(self):
        if self.g_steps < 1 or self.d_steps < 1:
            raise ValueError("g_steps and d_steps must be >= 1")
        if self.rollout_mode not in ("sequence_reward", "mc_rollout"):
            raise ValueError(f"unknown rollout_mode {self.rollout_mode!r}")
        if not 0 <= self.baseline_decay < 1:
            raise ValueError("baseline_decay must lie in [0, 1)")


@dataclass
class TrainState:
    step: int = 0
    baseline: Optional[float] = None
    rng: random.Random = field(default_factory=random.Random)
    g_optimizer: Optional[torch.optim.Optimizer] = None
    d_optimizer: Optional[torch.optim.Optimizer] = None


class LossBreakdown(NamedTuple):
    total: float
    kl: float
    reconstruction: float
    bow: float
    anneal: float = 1.0


def kl_anneal_weight(step: int, anneal_steps: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if anneal_steps < 1:
        raise ValueError("anneal_steps must be >= 1")
    return min(1.0, step / anneal_steps)


def bow_loss(z: torch.Tensor, c, target: Sequence[int], params: Generator) -> torch.Tensor:
    """Negative log-likelihood of the target's tokens under one softmax from ``[z; c]``."""
    if len(target) == 0:
        raise ValueError("bag-of-words target must not be empty")
    c = c.c if hasattr(c, "c") else c
    logp = F.log_softmax(params.bow_logits(z.unsqueeze(0), c.unsqueeze(0))[0], dim=-1)
    return -logp[torch.as_tensor(list(target), dtype=torch.long)].sum()


def stage1_objective(model: Generator, batch: Batch, anneal: float, bow_weight: float,
                     noise: Optional[torch.Tensor] = None):
    """Differentiable stage-1 loss and its (kl, reconstruction, bow) batch means."""
    out = model(batch, noise=noise)
    kl = out.kl.mean()
    rec = out.nll.mean()
    bow = out.bow.mean()
    return anneal * kl + rec + bow_weight * bow, kl, rec, bow


def global_grad_norm(params: Iterable[nn.Parameter]) -> float:
    grads = [p.grad.detach().flatten() for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.cat(grads).norm())


def first_nonfinite(model: nn.Module) -> Optional[str]:
    # a corrupt weight poisons every gradient, so look at values before gradients
    params = list(model.named_parameters())
    for name, p in params:
        if not torch.isfinite(p).all():
            return name
    for name, p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            return name
    return None


class Trainer:
    """Owns the models, optimizers and topic-graph cache of one training run."""

    def __init__(self, model: Generator, vocab: Vocabulary, store: TripleStore,
                 stage1: Stage1Config = None, stage2: Stage2Config = None,
                 discriminator: Optional[TopicDiscriminator] = None,
                 topic_labels: Sequence[str] = (), log_file=None):
        self.model = model
        self.vocab = vocab
        self.store = store
        self.stage1 = stage1 or Stage1Config()
        self.stage2 = stage2 or Stage2Config()
        self.discriminator = discriminator
        self.topic_labels = list(topic_labels)
        self.label_index = {t: i for i, t in enumerate(self.topic_labels)}
        self.log_file = log_file
        self.loss_trace: List[LossBreakdown] = []
        self._views: Dict[tuple, GraphView] = {}
        torch.manual_seed(self.stage1.seed)
        self.state = TrainState(rng=random.Random(self.stage1.seed))
        self.model.dropout.p = self.stage1.dropout_rate
        self.state.g_optimizer = torch.optim.Adam(model.parameters(), lr=self.stage1.learning_rate)
        self.sample_gen = torch.Generator().manual_seed(self.stage1.seed + 1)

    # -- helpers ----------------------------------------------------------
    def view(self, topics: Sequence[str]) -> GraphView:
        key = tuple(topics)
        if key not in self._views:
            self._views[key] = topic_view(self.store, topics, self.vocab,
                                          self.model.dims.max_per_topic)
        return self._views[key]

    def batch(self, examples: Sequence[TrainingExample]) -> Batch:
        return make_batch(examples, self.vocab, [self.view(ex.topics) for ex in examples])

    def _log(self, record: dict) -> None:
        if self.log_file is not None:
            self.log_file.write(json.dumps(record) + "\n")
            self.log_file.flush()

    def _check_finite(self, *values) -> None:
        if all(math.isfinite(v) for v in values):
            name = first_nonfinite(self.model)
            if name is None:
                return
        else:
            name = first_nonfinite(self.model) or "<loss>"
        raise NonFiniteError(f"non-finite loss or parameters; first offending group: {name}")

    def anneal_steps(self, n_examples: int) -> int:
        if self.stage1.kl_anneal_steps:
            return self.stage1.kl_anneal_steps
        return max(1, 2 * math.ceil(n_examples / self.stage1.batch_size))

    # -- stage 1 ----------------------------------------------------------
    def stage1_step(self, examples: Sequence[TrainingExample], anneal: Optional[float] = None,
                    noise: Optional[torch.Tensor] = None) -> LossBreakdown:
        if not examples:
            raise ValueError("empty batch")
        if anneal is None:
            anneal = kl_anneal_weight(self.state.step, self.stage1.kl_anneal_steps or 1)
        self.model.train()
        batch = self.batch(examples)
        opt = self.state.g_optimizer
        opt.zero_grad()
        total, kl, rec, bow = stage1_objective(self.model, batch, anneal, self.stage1.bow_weight,
                                               noise)
        total.backward()
        parts = LossBreakdown(total.item(), kl.item(), rec.item(), bow.item(), anneal)
        self._check_finite(*parts[:4])
        nn.utils.clip_grad_norm_(self.model.parameters(), self.stage1.grad_clip_norm)
        opt.step()
        self.state.step += 1
        self.loss_trace.append(parts)
        self._log({"stage": 1, "step": self.state.step, "total": parts.total, "kl": parts.kl,
                   "reconstruction": parts.reconstruction, "bow": parts.bow, "anneal": anneal})
        return parts

    def train_stage1(self, examples: Sequence[TrainingExample],
                     valid: Sequence[TrainingExample] = (), epochs: Optional[int] = None,
                     max_steps: Optional[int] = None) -> List[LossBreakdown]:
        epochs = self.stage1.epochs if epochs is None else epochs
        anneal_steps = self.anneal_steps(len(examples))
        order = list(range(len(examples)))
        bs = self.stage1.batch_size
        trace = []
        best = (math.inf, None)
        for epoch in range(epochs):
            self.state.rng.shuffle(order)
            for start in range(0, len(order), bs):
                chunk = [examples[i] for i in order[start:start + bs]]
                anneal = kl_anneal_weight(self.state.step, anneal_steps)
                trace.append(self.stage1_step(chunk, anneal))
                if max_steps is not None and self.state.step >= max_steps:
                    return trace
            if valid:
                val = self.validation_loss(valid)
                log.info("epoch %d  train %.4f  valid %.4f", epoch + 1, trace[-1].total, val)
                self._log({"stage": 1, "epoch": epoch + 1, "valid_loss": val})
                if val < best[0]:
                    best = (val, {k: v.clone() for k, v in self.model.state_dict().items()})
            else:
                log.info("epoch %d  train %.4f", epoch + 1, trace[-1].total)
        if best[1] is not None:
            self.model.load_state_dict(best[1])
        return trace

    @torch.no_grad()
    def validation_loss(self, examples: Sequence[TrainingExample], batch_size: int = 128) -> float:
        """Mean stage-1 loss (full KL weight) with posterior means, gold context."""
        self.model.eval()
        total, n = 0.0, 0
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            batch = self.batch(chunk)
            out = self.model(batch, noise=torch.zeros(len(chunk), self.model.dims.d_z,
                                                      dtype=self.model.dtype))
            total += float((out.kl + out.nll + self.stage1.bow_weight * out.bow).sum())
            n += len(chunk)
        self.model.train()
        return total / max(n, 1)

    @torch.no_grad()
    def perplexity(self, examples: Sequence[TrainingExample], batch_size: int = 128) -> float:
        """Teacher-forced reconstruction perplexity with ``z`` at the posterior mean."""
        self.model.eval()
        nll, toks = 0.0, 0
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            out = self.model(self.batch(chunk),
                             noise=torch.zeros(len(chunk), self.model.dims.d_z, dtype=self.model.dtype))
            nll += float(out.nll.sum())
            toks += int(out.n_tokens.sum())
        self.model.train()
        return math.exp(nll / toks)

    # -- stage 2 ----------------------------------------------------------
    def _topic_ids(self, records: Sequence[EssayRecord]) -> List[List[int]]:
        return [[self.label_index[t] for t in r.topics if t in self.label_index] for r in records]

    @staticmethod
    def flatten(essay: Sequence[Sequence[int]]) -> List[int]:
        flat = [t for s in essay for t in s if t != EOS_ID]
        return flat or [EOS_ID]

    def _sample(self, records: Sequence[EssayRecord], sample: bool = True):
        topic_ids = [self.vocab.encode(r.topics) for r in records]
        senti = [[SENTIMENT_ID[s] for s in r.sentiments] for r in records]
        views = [self.view(r.topics) for r in records]
        self.model.eval()
        essays, noise = self.model.generate(topic_ids, senti, views, max_len=self.stage2.max_len,
                                            sample=sample, generator=self.sample_gen,
                                            return_noise=True)
        return essays, noise, topic_ids, senti, views

    def _ensure_stage2(self) -> None:
        if self.discriminator is None:
            raise ValueError("stage 2 needs a discriminator")
        if self.state.d_optimizer is None:
            self.state.d_optimizer = torch.optim.Adam(self.discriminator.parameters(),
                                                      lr=self.stage2.d_learning_rate)
            for group in self.state.g_optimizer.param_groups:
                group["lr"] = self.stage2.learning_rate

    def rewards(self, essays, label_ids) -> torch.Tensor:
        """Per-essay topic reward in [0, 1] from the current discriminator."""
        self.discriminator.eval()
        with torch.no_grad():
            scores = self.discriminator.scores([self.flatten(e) for e in essays])
        out = []
        for b, labels in enumerate(label_ids):
            if not labels:
                out.append(float("nan"))
                continue
            r = scores[b, labels].mean()
            if self.stage2.penalize_fake:
                r = (r - scores[b, -1]).clamp(min=0.0)
            out.append(float(r))
        return torch.tensor(out, dtype=torch.float64)

    def _scored_examples(self, essays, noise, topic_ids, senti, views):
        exs, vs, closed, eps, owner, sent_pos = [], [], [], [], [], []
        for b, essay in enumerate(essays):
            content = [[t for t in s if t != EOS_ID] for s in essay]
            for i, sent in enumerate(essay):
                exs.append(TrainingExample(topic_ids[b], content[:i], content[i], senti[b][i]))
                vs.append(views[b])
                closed.append(bool(sent) and sent[-1] == EOS_ID)
                eps.append(noise[b][i])
                owner.append(b)
                sent_pos.append(i)
        return exs, vs, closed, torch.stack(eps), owner, sent_pos

    def sequence_logp(self, essays, noise, topic_ids, senti, views):
        """Token log-probabilities of sampled essays along the prior path.

        Returns the (S, T) token log-prob matrix over all sentences, the owner
        essay of every row, and each row's sentence position.
        """
        exs, vs, closed, eps, owner, pos = self._scored_examples(essays, noise, topic_ids, senti, views)
        batch = make_batch_ids(exs, vs, closed)
        h_i, c, e_dec = self.model.encode_batch(batch)
        prior = self.model.prior_net(c)
        z = prior.mu + torch.exp(0.5 * prior.log_var) * eps.to(prior.mu.dtype)
        return self.model.token_logp(batch, z, c, e_dec), owner, pos

    def generator_step(self, records: Sequence[EssayRecord],
                       stage1_examples: Sequence[TrainingExample] = ()) -> Tuple[float, float]:
        """One REINFORCE update; returns (generator loss, mean reward)."""
        self._ensure_stage2()
        essays, noise, topic_ids, senti, views = self._sample(records)
        label_ids = self._topic_ids(records)
        rewards = self.rewards(essays, label_ids)
        valid = ~torch.isnan(rewards)
        mean_reward = float(rewards[valid].mean()) if bool(valid.any()) else 0.0
        baseline = mean_reward if self.state.baseline is None else self.state.baseline
        self.model.eval()
        opt = self.state.g_optimizer
        opt.zero_grad()
        tok_logp, owner, pos = self.sequence_logp(essays, noise, topic_ids, senti, views)
        if self.stage2.rollout_mode == "mc_rollout":
            adv = self.rollout_rewards(essays, noise, topic_ids, senti, views, label_ids,
                                       tok_logp.shape[1]) - baseline
        else:
            per_essay = torch.where(valid, rewards - baseline, torch.zeros_like(rewards))
            adv = per_essay[torch.tensor(owner)].unsqueeze(-1).expand_as(tok_logp)
        adv = torch.nan_to_num(adv, nan=0.0).to(tok_logp.dtype)
        loss = -(adv * tok_logp).sum() / len(essays)
        if self.stage2.stage1_mix > 0 and stage1_examples:
            self.model.train()
            s1, *_ = stage1_objective(self.model, self.batch(stage1_examples), 1.0,
                                      self.stage1.bow_weight)
            loss = loss + self.stage2.stage1_mix * s1
        loss.backward()
        self._check_finite(loss.item())
        nn.utils.clip_grad_norm_(self.model.parameters(), self.stage1.grad_clip_norm)
        opt.step()
        decay = self.stage2.baseline_decay
        self.state.baseline = decay * baseline + (1 - decay) * mean_reward
        self.state.step += 1
        return loss.item(), mean_reward

    @torch.no_grad()
    def rollout_rewards(self, essays, noise, topic_ids, senti, views, label_ids, width):
        """Per-token rewards: mean reward of K greedy completions of every prefix.

        The current sentence continues under its own latent; later sentences
        redraw prior noise in each rollout, which is what makes the K greedy
        rollouts differ.
        """
        K = self.stage2.rollouts
        rows = []
        for b, essay in enumerate(essays):
            content = [[t for t in s if t != EOS_ID] for s in essay]
            for i, sent in enumerate(essay):
                row = torch.full((width,), float("nan"), dtype=torch.float64)
                for t in range(len(sent)):
                    total = 0.0
                    for _ in range(K):
                        done = content[:i] + [self._complete(b, i, sent[:t + 1], noise[b][i],
                                                             topic_ids, senti, views, content[:i])]
                        done += self._continue(b, i + 1, done, topic_ids, senti, views)
                        total += float(self.rewards([done], [label_ids[b]])[0])
                    row[t] = total / K
                rows.append(row)
        return torch.stack(rows)

    def _prepare(self, b, i, context, topic_ids, senti, views):
        model = self.model
        batch = make_batch_ids([TrainingExample(topic_ids[b], context, [0], senti[b][i])],
                               [views[b]])
        _, c, e_dec = model.encode_batch(batch)
        keys, neighbors = model.graph_keys(batch.kg_ids, batch.kg_rel, batch.kg_flags)
        return c, e_dec, keys, neighbors, batch.kg_mask

    def _complete(self, b, i, prefix, eps, topic_ids, senti, views, context):
        model = self.model
        c, e_dec, keys, neighbors, mask = self._prepare(b, i, context, topic_ids, senti, views)
        prior = model.prior_net(c)
        z = prior.mu + torch.exp(0.5 * prior.log_var) * eps.unsqueeze(0)
        d = model.init_state(z, c, e_dec)
        prev = torch.tensor([BOS_ID])
        out = []
        for tok in prefix:
            d, _, _ = model.step(d, prev, z, c, e_dec, keys, neighbors, mask)
            prev = torch.tensor([tok])
            out.append(tok)
        while (not out or out[-1] != EOS_ID) and len(out) < self.stage2.max_len:
            d, logits, _ = model.step(d, prev, z, c, e_dec, keys, neighbors, mask)
            prev = logits.argmax(-1)
            out.append(int(prev))
        return [t for t in out if t != EOS_ID]

    def _continue(self, b, start, context, topic_ids, senti, views):
        out = []
        ctx = list(context)
        for i in range(start, len(senti[b])):
            eps = torch.randn(self.model.dims.d_z, generator=self.sample_gen,
                              dtype=self.model.dtype)
            sent = self._complete(b, i, [], eps, topic_ids, senti, views, ctx)
            out.append(sent)
            ctx.append(sent)
        return out

    def discriminator_step(self, records: Sequence[EssayRecord]) -> float:
        self._ensure_stage2()
        essays, *_ = self._sample(records, sample=False)
        d = self.discriminator
        label_ids = self._topic_ids(records)
        real = [self.flatten([self.vocab.encode(s) for s in r.sentences]) for r in records]
        fake = [self.flatten(e) for e in essays]
        targets = [real_target(l, d) for l in label_ids] + [fake_target(d)] * len(fake)
        d.train()
        opt = self.state.d_optimizer
        opt.zero_grad()
        logits = d.logits(real + fake)
        loss = F.binary_cross_entropy_with_logits(
            logits, torch.tensor(targets, dtype=logits.dtype))
        loss.backward()
        nn.utils.clip_grad_norm_(d.parameters(), self.stage1.grad_clip_norm)
        opt.step()
        d.trained.fill_(1.0)
        return loss.item()

    def stage2_round(self, real_batch: Sequence[EssayRecord],
                     stage1_examples: Sequence[TrainingExample] = ()) -> Tuple[float, float, float]:
        """``g_steps`` generator updates then ``d_steps`` discriminator updates.

        Returns (last generator loss, last discriminator loss, mean reward).
        """
        g_loss, rewards = 0.0, []
        for _ in range(self.stage2.g_steps):
            g_loss, r = self.generator_step(real_batch, stage1_examples)
            rewards.append(r)
        d_loss = 0.0
        for _ in range(self.stage2.d_steps):
            d_loss = self.discriminator_step(real_batch)
        mean_reward = sum(rewards) / len(rewards)
        self._log({"stage": 2, "step": self.state.step, "g_loss": g_loss, "d_loss": d_loss,
                   "reward": mean_reward, "baseline": self.state.baseline})
        return g_loss, d_loss, mean_reward

    def train_stage2(self, records: Sequence[EssayRecord], rounds: Optional[int] = None):
        self._ensure_stage2()
        rounds = self.stage2.rounds if rounds is None else rounds
        bs = self.stage2.batch_size
        rng = self.state.rng
        pre = self.stage2.d_steps * self.stage2.pretrain_d_factor
        for k in range(pre):
            loss = self.discriminator_step(rng.sample(list(records), min(bs, len(records))))
            self._log({"stage": 2, "pretrain_d_step": k + 1, "d_loss": loss})
        history = []
        for r in range(rounds):
            chunk = rng.sample(list(records), min(bs, len(records)))
            mix = make_examples(chunk) if self.stage2.stage1_mix > 0 else ()
            history.append(self.stage2_round(chunk, mix))
            log.info("round %d  g %.4f  d %.4f  reward %.4f", r + 1, *history[-1])
        return history


def train_topic_classifier(classifier: TopicDiscriminator, records: Sequence[EssayRecord],
                           vocab: Vocabulary, labels: Sequence[str], steps: int = 300,
                           batch_size: int = 64, lr: float = 1e-3, seed: int = 0) -> List[float]:
    """Fit a multi-label topic classifier (no fake class) on real essays."""
    index = {t: i for i, t in enumerate(labels)}
    essays = [Trainer.flatten([vocab.encode(s) for s in r.sentences]) for r in records]
    targets = torch.zeros(len(records), classifier.n_outputs, dtype=classifier.fc.weight.dtype)
    for n, r in enumerate(records):
        for t in r.topics:
            if t in index:
                targets[n, index[t]] = 1.0
    torch.manual_seed(seed)
    rng = random.Random(seed)
    opt = torch.optim.Adam(classifier.parameters(), lr=lr)
    order = list(range(len(records)))
    losses = []
    classifier.train()
    for _ in range(steps):
        idx = rng.sample(order, min(batch_size, len(order)))
        opt.zero_grad()
        logits = classifier.logits([essays[i] for i in idx])
        loss = F.binary_cross_entropy_with_logits(logits, targets[idx])
        loss.backward()
        opt.step()
        losses.append(loss.item())
    classifier.eval()
    classifier.trained.fill_(1.0)
    return losses
