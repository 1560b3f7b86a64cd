"""Conditional VAE essay generator with a graph-attentive decoder.

Each target sentence ``L_i`` is produced from a condition vector
``c = [e(s); h^c; h^x]`` (sentiment embedding, encoding of the previous
sentences, encoding of the topic words) and a latent ``z`` drawn from the
recognition network during training and from the prior network at
inference.  The decoder is a single GRU started at
``d_0 = W_d [z; c; e(s)] + b_d`` that reads the topic knowledge graph at every
step and emits ``softmax(W_o [d_t; e(s); g_t] + b_o)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import (BOS_ID, EOS, EOS_ID, PAD_ID, SENTIMENT_ID, CorpusError, TrainingExample,
                     Vocabulary, normalize_sentiment)
from .knowledge_graph import GraphView, TripleStore, build_topic_graph, graph_view
from .tga import TopicGraphAttention

INIT_SCALE = 0.08


@dataclass
class ModelDims:
    d_word: int = 64
    d_senti: int = 16
    enc_hidden: int = 64  # per direction
    d_z: int = 32
    dec_hidden: int = 128
    d_attn: Optional[int] = None  # defaults to d_word
    d_rel: Optional[int] = None  # defaults to d_word
    mlp_hidden: Optional[int] = None  # defaults to 2 * d_z
    bow_hidden: Optional[int] = None  # defaults to d_z
    dropout: float = 0.2
    max_per_topic: int = 20
    # ablation switches
    enc_senti: bool = True
    dec_senti: bool = True
    use_tga: bool = True

    @property
    def d_enc(self) -> int:
        return 2 * self.enc_hidden

    @property
    def d_cond(self) -> int:
        return self.d_senti + 2 * self.d_enc

    @property
    def d_query(self) -> int:
        return self.dec_hidden + self.d_cond + self.d_z

    @property
    def d_model(self) -> int:
        return self.dec_hidden + self.d_senti + self.d_word


PROFILES: Dict[str, ModelDims] = {
    "desk": ModelDims(),
    "paper": ModelDims(d_word=200, d_senti=32, enc_hidden=512, d_z=300, dec_hidden=512),
}


class GaussianParams(NamedTuple):
    mu: torch.Tensor
    log_var: torch.Tensor


class ConditionVector(NamedTuple):
    c: torch.Tensor


def kl_divergence(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """Closed-form ``KL(q || p)`` for diagonal Gaussians, summed over the last axis."""
    if q.mu.shape[-1] != p.mu.shape[-1]:
        raise ValueError("latent dimensions differ")
    return 0.5 * (p.log_var - q.log_var
                  + (q.log_var.exp() + (q.mu - p.mu) ** 2) / p.log_var.exp()
                  - 1.0).sum(-1)


def reparameterize(g: GaussianParams, noise: torch.Tensor) -> torch.Tensor:
    return g.mu + torch.exp(0.5 * g.log_var) * noise


class Batch(NamedTuple):
    """Padded tensors for a list of training examples."""
    utt_ids: torch.Tensor  # (U, L) every utterance the batch needs, BOS/EOS framed
    utt_lens: torch.Tensor
    topic_idx: torch.Tensor  # (B,) rows of utt_ids
    target_idx: torch.Tensor  # (B,)
    ctx_idx: torch.Tensor  # (B, C) rows of utt_ids, padded with 0
    ctx_lens: torch.Tensor  # (B,)
    sentiment: torch.Tensor  # (B,)
    dec_in: torch.Tensor  # (B, T)  BOS w_1 .. w_L
    dec_out: torch.Tensor  # (B, T)  w_1 .. w_L EOS
    dec_mask: torch.Tensor  # (B, T)
    bow_ids: torch.Tensor  # (B, Lb) content tokens of the target
    bow_mask: torch.Tensor
    kg_ids: torch.Tensor  # (B, N)
    kg_rel: torch.Tensor
    kg_flags: torch.Tensor
    kg_mask: torch.Tensor

    @property
    def size(self) -> int:
        return self.sentiment.shape[0]


def _pad(rows: Sequence[Sequence[int]], min_len: int = 0) -> torch.Tensor:
    width = max([len(r) for r in rows] + [min_len])
    out = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    for i, r in enumerate(rows):
        if len(r):
            out[i, :len(r)] = torch.as_tensor(r, dtype=torch.long)
    return out


def pack_views(views: Sequence[GraphView]):
    n = max([len(v) for v in views] + [0])
    B = len(views)
    ids = torch.zeros(B, n, dtype=torch.long)
    rel = torch.zeros(B, n, dtype=torch.long)
    flags = torch.zeros(B, n, dtype=torch.long)
    mask = torch.zeros(B, n, dtype=torch.bool)
    for b, v in enumerate(views):
        k = len(v)
        if k:
            ids[b, :k] = torch.as_tensor(v.neighbor_embedding_ids)
            rel[b, :k] = torch.as_tensor(v.relation_ids)
            flags[b, :k] = torch.as_tensor(v.position_flags)
            mask[b, :k] = True
    return ids, rel, flags, mask


def frame(ids: Sequence[int]) -> List[int]:
    return [BOS_ID] + list(ids) + [EOS_ID]


def make_batch(examples: Sequence[TrainingExample], vocab: Vocabulary,
               views: Sequence[GraphView]) -> Batch:
    """Tensorize examples; ``views[b]`` is the topic graph of example ``b``."""
    encoded = [TrainingExample(vocab.encode(ex.topics), [vocab.encode(s) for s in ex.context],
                               vocab.encode(ex.target),
                               SENTIMENT_ID[normalize_sentiment(ex.sentiment)])
               for ex in examples]
    return make_batch_ids(encoded, views)


def make_batch_ids(examples: Sequence[TrainingExample], views: Sequence[GraphView],
                   closed: Optional[Sequence[bool]] = None) -> Batch:
    """Like :func:`make_batch` for already-encoded examples (sentiment as an id).

    ``closed[b] = False`` drops the EOS prediction of example ``b`` (a sampled
    sentence that ran out of length without emitting EOS).
    """
    utts: List[List[int]] = []
    cache: Dict[tuple, int] = {}

    def add(ids) -> int:
        key = tuple(ids)
        if key not in cache:
            cache[key] = len(utts)
            utts.append(frame(ids))
        return cache[key]

    topic_idx, target_idx, ctx_rows, senti, dec_in, dec_out, bow = [], [], [], [], [], [], []
    for ex in examples:
        topic_idx.append(add(ex.topics))
        ctx_rows.append([add(s) for s in ex.context])
        target_idx.append(add(ex.target))
        senti.append(int(ex.sentiment))
        tgt = list(ex.target)
        dec_in.append([BOS_ID] + tgt)
        dec_out.append(tgt + [EOS_ID])
        bow.append(tgt)
    utt_ids = _pad(utts)
    dec_in_t = _pad(dec_in)
    dec_out_t = _pad(dec_out)
    dec_mask = torch.zeros_like(dec_out_t, dtype=torch.bool)
    for i, r in enumerate(dec_out):
        dec_mask[i, :len(r)] = True
        if closed is not None and not closed[i]:
            dec_mask[i, len(r) - 1] = False
    bow_t = _pad(bow, 1)
    bow_mask = torch.zeros_like(bow_t, dtype=torch.bool)
    for i, r in enumerate(bow):
        bow_mask[i, :len(r)] = True
    kg = pack_views(views)
    return Batch(utt_ids, torch.tensor([len(u) for u in utts]),
                 torch.tensor(topic_idx), torch.tensor(target_idx),
                 _pad(ctx_rows, 1), torch.tensor([len(r) for r in ctx_rows]),
                 torch.tensor(senti), dec_in_t, dec_out_t, dec_mask, bow_t, bow_mask, *kg)


class ForwardOutput(NamedTuple):
    nll: torch.Tensor  # (B,) summed token negative log-likelihood
    n_tokens: torch.Tensor  # (B,)
    kl: torch.Tensor  # (B,)
    bow: torch.Tensor  # (B,)
    posterior: GaussianParams
    prior: GaussianParams
    z: torch.Tensor


class Generator(nn.Module):
    def __init__(self, vocab_size: int, num_relations: int, dims: ModelDims = None):
        super().__init__()
        dims = dims or ModelDims()
        self.dims = dims
        self.vocab_size = vocab_size
        self.num_relations = num_relations
        d = dims.d_enc
        mlp_h = dims.mlp_hidden or 2 * dims.d_z
        bow_h = dims.bow_hidden or dims.d_z
        self.word_embeddings = nn.Embedding(vocab_size, dims.d_word, padding_idx=PAD_ID)
        self.sentiment_embeddings = nn.Embedding(len(SENTIMENT_ID), dims.d_senti)
        self.utterance_birnn = nn.GRU(dims.d_word, dims.enc_hidden, batch_first=True,
                                      bidirectional=True)
        self.context_rnn = nn.GRUCell(d, d)
        self.recognition_mlp = nn.Sequential(nn.Linear(d + dims.d_cond, mlp_h), nn.Tanh(),
                                             nn.Linear(mlp_h, 2 * dims.d_z))
        self.prior_mlp = nn.Sequential(nn.Linear(dims.d_cond, mlp_h), nn.Tanh(),
                                       nn.Linear(mlp_h, 2 * dims.d_z))
        self.decoder_init = nn.Linear(dims.d_z + dims.d_cond + dims.d_senti, dims.dec_hidden)
        self.decoder_rnn = nn.GRUCell(dims.d_word, dims.dec_hidden)
        self.tga = TopicGraphAttention(dims.d_query, dims.d_word, num_relations,
                                       dims.d_attn, dims.d_rel)
        self.output = nn.Linear(dims.d_model, vocab_size)
        self.bow_mlp = nn.Sequential(nn.Linear(dims.d_z + dims.d_cond, bow_h), nn.Tanh(),
                                     nn.Linear(bow_h, vocab_size))
        self.dropout = nn.Dropout(dims.dropout)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for p in self.parameters():
            nn.init.uniform_(p, -INIT_SCALE, INIT_SCALE)
        with torch.no_grad():
            self.word_embeddings.weight[PAD_ID].zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.output.weight.dtype

    # -- encoder ----------------------------------------------------------
    def encode_utterances(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(U, L) padded ids -> (U, d) final forward/backward states."""
        emb = self.word_embeddings(ids)
        packed = nn.utils.rnn.pack_padded_sequence(emb, lengths.cpu(), batch_first=True,
                                                   enforce_sorted=False)
        _, h = self.utterance_birnn(packed)
        return torch.cat([h[0], h[1]], dim=-1)

    def context_step(self, sent_vec: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return self.context_rnn(sent_vec, h)

    def encode_contexts(self, vectors: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(B, C, d) sentence vectors, ragged by ``lengths`` -> (B, d)."""
        B, C, d = vectors.shape
        h = vectors.new_zeros(B, d)
        for t in range(C):
            new = self.context_rnn(vectors[:, t], h)
            h = torch.where((lengths > t).unsqueeze(-1), new, h)
        return h

    def sentiment_parts(self, sentiment: torch.Tensor):
        e = self.sentiment_embeddings(sentiment)
        e_enc = e if self.dims.enc_senti else torch.zeros_like(e)
        e_dec = e if self.dims.dec_senti else torch.zeros_like(e)
        return e_enc, e_dec

    def condition(self, e_enc: torch.Tensor, h_c: torch.Tensor, h_x: torch.Tensor) -> torch.Tensor:
        return torch.cat([e_enc, h_c, h_x], dim=-1)

    @staticmethod
    def _split(out: torch.Tensor) -> GaussianParams:
        mu, log_var = out.chunk(2, dim=-1)
        return GaussianParams(mu, log_var)

    def recognize(self, h_i: torch.Tensor, c: torch.Tensor) -> GaussianParams:
        return self._split(self.recognition_mlp(torch.cat([h_i, c], dim=-1)))

    def prior_net(self, c: torch.Tensor) -> GaussianParams:
        return self._split(self.prior_mlp(c))

    # -- decoder ----------------------------------------------------------
    def init_state(self, z, c, e_dec) -> torch.Tensor:
        return self.decoder_init(torch.cat([z, c, e_dec], dim=-1))

    def graph_keys(self, kg_ids, kg_rel, kg_flags):
        neighbors = self.word_embeddings(kg_ids)
        return self.tga.keys(neighbors, kg_rel, kg_flags), neighbors

    def step(self, d_prev, prev_ids, z, c, e_dec, keys, neighbors, kg_mask):
        """One decoding step; returns (d_t, logits, attention weights)."""
        if self.dims.use_tga and neighbors.shape[-2] > 0:
            q = torch.cat([d_prev, c, z], dim=-1)
            g, alphas, _ = self.tga.attend(q, keys, neighbors, kg_mask)
        else:
            g = d_prev.new_zeros(d_prev.shape[0], self.dims.d_word)
            alphas = None
        d_t = self.decoder_rnn(self.word_embeddings(prev_ids), d_prev)
        feats = self.dropout(torch.cat([d_t, e_dec, g], dim=-1))
        return d_t, self.output(feats), alphas

    def bow_logits(self, z, c):
        return self.bow_mlp(torch.cat([z, c], dim=-1))

    # -- full passes ------------------------------------------------------
    def encode_batch(self, batch: Batch):
        enc = self.encode_utterances(batch.utt_ids, batch.utt_lens)
        h_x = enc[batch.topic_idx]
        h_i = enc[batch.target_idx]
        h_c = self.encode_contexts(enc[batch.ctx_idx], batch.ctx_lens)
        e_enc, e_dec = self.sentiment_parts(batch.sentiment)
        c = self.condition(e_enc, h_c, h_x)
        return h_i, c, e_dec

    def forward(self, batch: Batch, noise: Optional[torch.Tensor] = None,
                use_prior: bool = False, generator: Optional[torch.Generator] = None) -> ForwardOutput:
        """Teacher-forced pass.  ``z`` comes from the recognition network unless
        ``use_prior``; ``noise`` (B, d_z) defaults to fresh standard normals."""
        h_i, c, e_dec = self.encode_batch(batch)
        post = self.recognize(h_i, c)
        prior = self.prior_net(c)
        if noise is None:
            noise = torch.randn(post.mu.shape, generator=generator, dtype=post.mu.dtype)
        z = reparameterize(prior if use_prior else post, noise)
        nll = self.sequence_nll(batch, z, c, e_dec)
        bow_lp = F.log_softmax(self.bow_logits(z, c), dim=-1)
        bow = -(bow_lp.gather(1, batch.bow_ids) * batch.bow_mask).sum(-1)
        return ForwardOutput(nll, batch.dec_mask.sum(-1), kl_divergence(post, prior), bow,
                             post, prior, z)

    def sequence_nll(self, batch: Batch, z, c, e_dec) -> torch.Tensor:
        return -self.token_logp(batch, z, c, e_dec).sum(-1)

    def token_logp(self, batch: Batch, z, c, e_dec) -> torch.Tensor:
        """(B, T) log-probabilities of the gold tokens, zero at padding."""
        keys, neighbors = self.graph_keys(batch.kg_ids, batch.kg_rel, batch.kg_flags)
        d = self.init_state(z, c, e_dec)
        T = batch.dec_in.shape[1]
        logits = []
        for t in range(T):
            d, lg, _ = self.step(d, batch.dec_in[:, t], z, c, e_dec, keys, neighbors, batch.kg_mask)
            logits.append(lg)
        logp = F.log_softmax(torch.stack(logits, dim=1), dim=-1)
        tok = logp.gather(2, batch.dec_out.unsqueeze(-1)).squeeze(-1)
        return tok * batch.dec_mask

    # -- inference --------------------------------------------------------
    @torch.no_grad()
    def generate(self, topic_ids: Sequence[Sequence[int]], sentiments: Sequence[Sequence[int]],
                 views: Sequence[GraphView], max_len: int = 20, seed: int = 0,
                 deterministic: bool = False, sample: bool = False,
                 generator: Optional[torch.Generator] = None,
                 return_noise: bool = False):
        """Generate essays sentence by sentence along the prior path.

        ``sentiments[b]`` is the label-id sequence of essay ``b``.  Returns,
        per essay, a list of token-id lists; a sentence keeps its closing EOS
        when one was produced within ``max_len`` tokens.  Greedy unless
        ``sample``.  With ``return_noise`` also returns the latent noise used
        for every sentence, ``noise[b][i]``.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if generator is None:
            generator = torch.Generator().manual_seed(seed)
        B = len(topic_ids)
        dtype = self.dtype
        tx = [frame(t) for t in topic_ids]
        h_x = self.encode_utterances(_pad(tx), torch.tensor([len(t) for t in tx]))
        kg_ids, kg_rel, kg_flags, kg_mask = pack_views(views)
        keys, neighbors = self.graph_keys(kg_ids, kg_rel, kg_flags)
        h_c = h_x.new_zeros(B, self.dims.d_enc)
        essays: List[List[List[int]]] = [[] for _ in range(B)]
        noises: List[List[torch.Tensor]] = [[] for _ in range(B)]
        M = max(len(s) for s in sentiments)
        for i in range(M):
            active = [b for b in range(B) if len(sentiments[b]) > i]
            idx = torch.tensor(active)
            senti = torch.tensor([sentiments[b][i] for b in active])
            e_enc, e_dec = self.sentiment_parts(senti)
            c = self.condition(e_enc, h_c[idx], h_x[idx])
            prior = self.prior_net(c)
            if deterministic:
                eps = torch.zeros_like(prior.mu)
            else:
                eps = torch.randn(prior.mu.shape, generator=generator, dtype=dtype)
            z = reparameterize(prior, eps)
            d = self.init_state(z, c, e_dec)
            prev = torch.full((len(active),), BOS_ID, dtype=torch.long)
            done = torch.zeros(len(active), dtype=torch.bool)
            out = [[] for _ in active]
            for _ in range(max_len):
                d, logits, _ = self.step(d, prev, z, c, e_dec, keys[idx], neighbors[idx], kg_mask[idx])
                if sample:
                    probs = torch.softmax(logits, dim=-1)
                    nxt = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
                else:
                    nxt = logits.argmax(-1)
                for k in range(len(active)):
                    if not done[k]:
                        out[k].append(int(nxt[k]))
                done |= nxt == EOS_ID
                prev = nxt
                if bool(done.all()):
                    break
            sent_ids = [frame([t for t in o if t != EOS_ID]) for o in out]
            vecs = self.encode_utterances(_pad(sent_ids), torch.tensor([len(s) for s in sent_ids]))
            h_c = h_c.clone()
            h_c[idx] = self.context_step(vecs, h_c[idx])
            for k, b in enumerate(active):
                essays[b].append(out[k])
                noises[b].append(eps[k])
        return (essays, noises) if return_noise else essays


# ---------------------------------------------------------------------------
# single-example operations

def _row(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 1 else x


def encode_utterance(tokens: Sequence[int], params: Generator) -> torch.Tensor:
    if len(tokens) == 0:
        raise ValueError("utterance must contain at least one token (frame with BOS/EOS)")
    ids = torch.as_tensor([list(tokens)], dtype=torch.long)
    return params.encode_utterances(ids, torch.tensor([len(tokens)]))[0]


def encode_context(sentence_vectors: Sequence[torch.Tensor], params: Generator) -> torch.Tensor:
    h = torch.zeros(1, params.context_rnn.hidden_size, dtype=params.dtype)
    for v in sentence_vectors:
        h = params.context_rnn(_row(v), h)
    return h[0]


def build_condition(h_x: torch.Tensor, h_c: torch.Tensor, sentiment: str,
                    params: Generator) -> ConditionVector:
    s = torch.tensor([SENTIMENT_ID[normalize_sentiment(sentiment)]])
    e_enc, _ = params.sentiment_parts(s)
    return ConditionVector(params.condition(e_enc, _row(h_c), _row(h_x))[0])


def _cvec(c) -> torch.Tensor:
    return c.c if isinstance(c, ConditionVector) else c


def _check_width(x: torch.Tensor, layer: nn.Linear, what: str) -> None:
    if x.shape[-1] != layer.in_features:
        raise ValueError(f"{what}: input width {x.shape[-1]} != {layer.in_features}")


def recognition(h_i: torch.Tensor, c, params: Generator) -> GaussianParams:
    x = torch.cat([h_i, _cvec(c)], dim=-1)
    _check_width(x, params.recognition_mlp[0], "recognition")
    g = params.recognize(_row(h_i), _row(_cvec(c)))
    return GaussianParams(g.mu[0], g.log_var[0])


def prior(c, params: Generator) -> GaussianParams:
    _check_width(_cvec(c), params.prior_mlp[0], "prior")
    g = params.prior_net(_row(_cvec(c)))
    return GaussianParams(g.mu[0], g.log_var[0])


def decoder_init(z: torch.Tensor, c, sentiment: str, params: Generator) -> torch.Tensor:
    s = torch.tensor([SENTIMENT_ID[normalize_sentiment(sentiment)]])
    _, e_dec = params.sentiment_parts(s)
    x = torch.cat([_row(z), _row(_cvec(c)), e_dec], dim=-1)
    _check_width(x, params.decoder_init, "decoder_init")
    return params.decoder_init(x)[0]


def decode_step(d_prev: torch.Tensor, prev_token: int, z: torch.Tensor, c, sentiment: str,
                view: GraphView, params: Generator):
    """One step; returns (d_t, P_t) with P_t a distribution over the vocabulary."""
    s = torch.tensor([SENTIMENT_ID[normalize_sentiment(sentiment)]])
    _, e_dec = params.sentiment_parts(s)
    kg_ids, kg_rel, kg_flags, kg_mask = pack_views([view])
    keys, neighbors = params.graph_keys(kg_ids, kg_rel, kg_flags)
    d_t, logits, _ = params.step(_row(d_prev), torch.tensor([prev_token]), _row(z),
                                 _row(_cvec(c)), e_dec, keys, neighbors, kg_mask)
    return d_t[0], torch.softmax(logits, dim=-1)[0]


def topic_view(store: TripleStore, topics: Sequence[str], vocab: Vocabulary,
               max_per_topic: int) -> GraphView:
    return graph_view(build_topic_graph(store, topics, max_per_topic), vocab)


def generate_essay(topics: Sequence[str], sentiments: Sequence[str], store: TripleStore,
                   params: Generator, vocab: Vocabulary, max_len: int = 20, seed: int = 0,
                   deterministic: bool = False) -> List[List[str]]:
    """Greedy essay for one topic set, one sentence per requested label."""
    if not sentiments:
        raise ValueError("at least one sentiment label is required")
    try:
        labels = [SENTIMENT_ID[normalize_sentiment(s)] for s in sentiments]
    except CorpusError as e:
        raise ValueError(str(e)) from None
    view = topic_view(store, topics, vocab, params.dims.max_per_topic)
    was_training = params.training
    params.eval()
    try:
        ids = params.generate([vocab.encode(topics)], [labels], [view], max_len=max_len,
                              seed=seed, deterministic=deterministic)[0]
    finally:
        params.train(was_training)
    return [vocab.decode(s) for s in ids]


def strip_eos(tokens: Sequence[str]) -> List[str]:
    return [t for t in tokens if t != EOS]
