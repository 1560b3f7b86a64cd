import math

import numpy as np
import pytest
import torch

from kgessay.corpus import BOS_ID, EOS, EOS_ID, SENTIMENT_ID
from kgessay.generator import (ConditionVector, GaussianParams, Generator, ModelDims,
                               build_condition, decode_step, decoder_init, encode_context,
                               encode_utterance, frame, generate_essay, kl_divergence,
                               prior, recognition, reparameterize, strip_eos)
from kgessay.knowledge_graph import GraphView

from oracles import gaussian_kl_mc, gru_cell, negative_elbo

T = torch.float64


def t(x):
    return torch.tensor(x, dtype=T)


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def one_dim_model():
    dims = ModelDims(d_word=1, d_senti=1, enc_hidden=1, d_z=1, dec_hidden=1, dropout=0.0)
    return Generator(8, 1, dims).double()


def hand_gru(x, h, wi, wh, bi, bh):
    """Scalar gated cell; each argument is a (reset, update, candidate) triple or a number."""
    sig = lambda v: 1 / (1 + math.exp(-v))
    r = sig(wi[0] * x + bi[0] + wh[0] * h + bh[0])
    u = sig(wi[1] * x + bi[1] + wh[1] * h + bh[1])
    n = math.tanh(wi[2] * x + bi[2] + r * (wh[2] * h + bh[2]))
    return (1 - u) * n + u * h


# -- encoders ----------------------------------------------------------------

def test_zero_recurrent_weights_zero_encoding(tiny):
    zero_(tiny.model.utterance_birnn)
    out = encode_utterance([BOS_ID, 4, 5, EOS_ID], tiny.model)
    assert out.shape == (6,) and torch.count_nonzero(out) == 0


def test_empty_utterance_rejected(tiny):
    with pytest.raises(ValueError):
        encode_utterance([], tiny.model)


def test_single_token_halves(tiny):
    P = tiny.params()
    out = encode_utterance([4], tiny.model).detach().numpy()
    x = P["word_embeddings.weight"][4]
    fw = gru_cell(x, np.zeros(3), P["utterance_birnn.weight_ih_l0"], P["utterance_birnn.weight_hh_l0"],
                  P["utterance_birnn.bias_ih_l0"], P["utterance_birnn.bias_hh_l0"])
    bw = gru_cell(x, np.zeros(3), P["utterance_birnn.weight_ih_l0_reverse"],
                  P["utterance_birnn.weight_hh_l0_reverse"], P["utterance_birnn.bias_ih_l0_reverse"],
                  P["utterance_birnn.bias_hh_l0_reverse"])
    assert np.allclose(out, np.concatenate([fw, bw]), atol=1e-12)


def test_two_token_hand_recurrence():
    m = one_dim_model()
    fw = dict(wi=(0.5, -0.3, 0.8), wh=(0.2, 0.4, -0.6), bi=(0.1, 0.0, -0.2), bh=(0.0, 0.3, 0.05))
    bw = dict(wi=(-0.4, 0.6, 0.9), wh=(0.7, -0.1, 0.3), bi=(0.0, 0.2, 0.1), bh=(-0.3, 0.0, 0.2))
    g = m.utterance_birnn
    with torch.no_grad():
        for suffix, w in (("", fw), ("_reverse", bw)):
            getattr(g, "weight_ih_l0" + suffix).copy_(t(w["wi"]).view(3, 1))
            getattr(g, "weight_hh_l0" + suffix).copy_(t(w["wh"]).view(3, 1))
            getattr(g, "bias_ih_l0" + suffix).copy_(t(w["bi"]))
            getattr(g, "bias_hh_l0" + suffix).copy_(t(w["bh"]))
        m.word_embeddings.weight[4, 0] = 1.5
        m.word_embeddings.weight[5, 0] = -0.7
    out = encode_utterance([4, 5], m)
    h1 = hand_gru(1.5, 0.0, **fw)
    h2 = hand_gru(-0.7, h1, **fw)
    b1 = hand_gru(-0.7, 0.0, **bw)
    b2 = hand_gru(1.5, b1, **bw)
    assert out[0].item() == pytest.approx(h2, abs=1e-10)
    assert out[1].item() == pytest.approx(b2, abs=1e-10)


def test_context_cases(tiny):
    assert encode_context([], tiny.model).tolist() == [0.0] * 6
    zero_(tiny.model.context_rnn)
    assert encode_context([torch.randn(6, dtype=T)], tiny.model).tolist() == [0.0] * 6


def test_context_hand_recurrence():
    # sentence vectors here are 1-dim, so swap in a 1 x 1 context cell
    m = one_dim_model()
    m.context_rnn = torch.nn.GRUCell(1, 1).double()
    w = dict(wi=(0.3, -0.5, 1.1), wh=(0.9, 0.2, -0.4), bi=(0.0, 0.1, 0.2), bh=(0.1, -0.2, 0.0))
    with torch.no_grad():
        m.context_rnn.weight_ih.copy_(t(w["wi"]).view(3, 1))
        m.context_rnn.weight_hh.copy_(t(w["wh"]).view(3, 1))
        m.context_rnn.bias_ih.copy_(t(w["bi"]))
        m.context_rnn.bias_hh.copy_(t(w["bh"]))
    out = encode_context([t([0.8]), t([-1.2])], m)
    expected = hand_gru(-1.2, hand_gru(0.8, 0.0, **w), **w)
    assert out.item() == pytest.approx(expected, abs=1e-10)


# -- condition and Gaussian networks -------------------------------------------

def test_condition_layout():
    m = Generator(8, 1, ModelDims(d_senti=2, enc_hidden=2)).double()
    hx, hc = t([1.0, 2.0, 3.0]), t([4.0, 5.0, 6.0])
    c = build_condition(hx, hc, "positive", m).c
    assert c.shape == (8,)
    e = m.sentiment_embeddings.weight[SENTIMENT_ID["positive"]]
    assert torch.equal(c, torch.cat([e, hc, hx]))
    zero = build_condition(torch.zeros(3, dtype=T), torch.zeros(3, dtype=T), "neg", m).c
    assert torch.equal(zero[2:], torch.zeros(6, dtype=T))
    other = build_condition(hx, hc, "neutral", m).c
    assert torch.equal(c[2:], other[2:]) and not torch.equal(c[:2], other[:2])


def test_zero_mlps_give_standard_normal(tiny):
    zero_(tiny.model.recognition_mlp)
    zero_(tiny.model.prior_mlp)
    c = torch.randn(tiny.dims.d_cond, dtype=T)
    for g in (recognition(torch.randn(6, dtype=T), c, tiny.model), prior(c, tiny.model)):
        assert g.mu.tolist() == [0.0] * 3 and g.log_var.tolist() == [0.0] * 3


def test_one_dim_mlp_by_hand():
    m = one_dim_model()
    # prior input is c = [e(s); h_c; h_x] of width 1 + 2 + 2; only the first input is live
    with torch.no_grad():
        first, last = m.prior_mlp[0], m.prior_mlp[2]
        first.weight.zero_()
        first.weight[0, 0], first.weight[1, 0] = 0.5, -1.0
        first.bias.copy_(t([0.1, 0.2]))
        last.weight.copy_(t([[2.0, 0.0], [0.0, 3.0]]))
        last.bias.copy_(t([0.0, -0.5]))
    c = torch.zeros(5, dtype=T)
    c[0] = 0.8
    g = prior(c, m)
    assert g.mu.item() == pytest.approx(2 * math.tanh(0.5 * 0.8 + 0.1), abs=1e-12)
    assert g.log_var.item() == pytest.approx(3 * math.tanh(-0.8 + 0.2) - 0.5, abs=1e-12)


def test_recognition_sensitive_to_target(tiny):
    c = torch.randn(tiny.dims.d_cond, dtype=T)
    a = recognition(torch.randn(6, dtype=T), c, tiny.model)
    b = recognition(torch.randn(6, dtype=T), c, tiny.model)
    assert not torch.allclose(a.mu, b.mu)


def test_width_mismatch_errors(tiny):
    with pytest.raises(ValueError):
        prior(torch.zeros(tiny.dims.d_cond + 1, dtype=T), tiny.model)
    with pytest.raises(ValueError):
        recognition(torch.zeros(5, dtype=T), torch.zeros(tiny.dims.d_cond, dtype=T), tiny.model)
    with pytest.raises(ValueError):
        decoder_init(torch.zeros(4, dtype=T), torch.zeros(tiny.dims.d_cond, dtype=T), "pos", tiny.model)


def test_reparameterize_cases():
    g = GaussianParams(t([1.0, -2.0]), t([0.5, -1.0]))
    assert torch.equal(reparameterize(g, torch.zeros(2, dtype=T)), g.mu)
    eps = t([0.3, -0.7])
    assert torch.equal(reparameterize(GaussianParams(torch.zeros(2, dtype=T), torch.zeros(2, dtype=T)), eps), eps)
    assert torch.allclose(reparameterize(g, eps), g.mu + torch.exp(g.log_var / 2) * eps)


def test_reparameterize_moments():
    g = GaussianParams(t([0.7, -1.5]), t([0.4, -0.9]))
    gen = torch.Generator().manual_seed(0)
    z = reparameterize(g, torch.randn(1_000_000, 2, generator=gen, dtype=T))
    assert torch.allclose(z.mean(0), g.mu, rtol=0.01)
    assert torch.allclose(z.var(0), g.log_var.exp(), rtol=0.01)


def test_kl_examples():
    p = GaussianParams(t([0.3, -0.2]), t([0.1, 0.4]))
    assert kl_divergence(p, p).item() == 0.0
    q1 = GaussianParams(t([1.0]), t([0.0]))
    std = GaussianParams(t([0.0]), t([0.0]))
    assert kl_divergence(q1, std).item() == pytest.approx(0.5, abs=1e-12)
    assert gaussian_kl_mc(np.array([1.0]), np.array([0.0]), np.array([0.0]), np.array([0.0]),
                          400_000, 1) == pytest.approx(0.5, rel=0.02)
    q2 = GaussianParams(t([0.0]), t([1.0]))  # variance e
    assert kl_divergence(q2, std).item() == pytest.approx(0.5 * (math.e - 2), abs=1e-12)
    assert round(kl_divergence(q2, std).item(), 4) == 0.3591


def test_kl_nonnegative_random():
    gen = torch.Generator().manual_seed(5)
    for _ in range(200):
        q = GaussianParams(torch.randn(4, generator=gen, dtype=T), torch.randn(4, generator=gen, dtype=T))
        p = GaussianParams(torch.randn(4, generator=gen, dtype=T), torch.randn(4, generator=gen, dtype=T))
        assert kl_divergence(q, p).item() >= -1e-9


# -- decoder -------------------------------------------------------------------

def test_decoder_init_cases():
    m = one_dim_model()  # d_z 1, d_cond 5, d_senti 1 -> W_d is 1 x 7
    z, c = t([0.4]), ConditionVector(torch.arange(5, dtype=T) / 10)
    zero_(m.decoder_init)
    assert decoder_init(z, c, "pos", m).tolist() == [0.0]
    with torch.no_grad():
        m.decoder_init.bias.fill_(0.25)
    assert decoder_init(z, c, "pos", m).tolist() == [0.25]

    m2 = Generator(8, 1, ModelDims(d_word=2, d_senti=1, enc_hidden=1, d_z=1, dec_hidden=2)).double()
    W = np.arange(14, dtype=float).reshape(2, 7) / 10 - 0.5
    b = np.array([0.1, -0.2])
    with torch.no_grad():
        m2.decoder_init.weight.copy_(torch.from_numpy(W))
        m2.decoder_init.bias.copy_(torch.from_numpy(b))
    e = m2.sentiment_embeddings.weight[SENTIMENT_ID["negative"]].detach().numpy()
    x = np.concatenate([[0.4], np.arange(5) / 10, e])
    expected = [sum(W[i, j] * x[j] for j in range(7)) + b[i] for i in range(2)]
    assert decoder_init(z, c, "neg", m2).tolist() == pytest.approx(expected, abs=1e-12)


def decode_inputs(tiny, label="positive"):
    z = torch.randn(3, dtype=T)
    c = torch.randn(tiny.dims.d_cond, dtype=T)
    d0 = decoder_init(z, c, label, tiny.model)
    return d0, z, c


def test_zero_output_layer_uniform(tiny):
    zero_(tiny.model.output)
    d0, z, c = decode_inputs(tiny)
    _, p = decode_step(d0, BOS_ID, z, c, "positive", tiny.view(["law"]), tiny.model)
    assert torch.allclose(p, torch.full((12,), 1 / 12, dtype=T), atol=1e-15)


def test_bias_spike_dominates(tiny):
    zero_(tiny.model.output)
    with torch.no_grad():
        tiny.model.output.bias[7] = 10.0
    d0, z, c = decode_inputs(tiny)
    _, p = decode_step(d0, BOS_ID, z, c, "positive", tiny.view(["law"]), tiny.model)
    assert p[7].item() > 0.99


def test_empty_view_equals_zero_graph_vector(tiny):
    d0, z, c = decode_inputs(tiny)
    d1, p1 = decode_step(d0, 4, z, c, "neutral", GraphView.empty(), tiny.model)
    tiny.model.dims.use_tga = False
    d2, p2 = decode_step(d0, 4, z, c, "neutral", tiny.view(["law"]), tiny.model)
    assert torch.equal(d1, d2) and torch.equal(p1, p2)


def test_graph_changes_distribution(tiny):
    d0, z, c = decode_inputs(tiny)
    _, p1 = decode_step(d0, 4, z, c, "neutral", GraphView.empty(), tiny.model)
    _, p2 = decode_step(d0, 4, z, c, "neutral", tiny.view(["law"]), tiny.model)
    assert not torch.allclose(p1, p2)


def test_step_is_simplex(tiny):
    d, z, c = decode_inputs(tiny)
    for tok in [BOS_ID, 4, 9, 11]:
        d, p = decode_step(d, tok, z, c, "negative", tiny.view(["law"]), tiny.model)
        assert (p >= 0).all() and abs(p.sum().item() - 1) < 1e-6


def test_sentiment_paths_are_independent(tiny):
    m = tiny.model
    ds, dc, dz = tiny.dims.d_senti, tiny.dims.d_cond, tiny.dims.d_z
    z = torch.randn(dz, dtype=T)
    c = torch.randn(dc, dtype=T)
    view = tiny.view(["law"])

    def dist(label):
        d0 = decoder_init(z, c, label, m)
        return decode_step(d0, BOS_ID, z, c, label, view, m)[1]

    # cut the e(s) columns of W_d: the output projection still carries the label
    saved = m.decoder_init.weight.detach().clone()
    with torch.no_grad():
        m.decoder_init.weight[:, dz + dc:] = 0
    assert not torch.allclose(dist("positive"), dist("negative"))
    with torch.no_grad():
        m.decoder_init.weight.copy_(saved)
        # cut the e(s) columns of W_o: the initial state still carries it
        h = tiny.dims.dec_hidden
        m.output.weight[:, h:h + ds] = 0
    assert not torch.allclose(dist("positive"), dist("negative"))


def test_ablation_flags_zero_sentiment(tiny):
    tiny.model.dims.dec_senti = False
    c = torch.randn(tiny.dims.d_cond, dtype=T)
    z = torch.randn(3, dtype=T)
    assert torch.equal(decoder_init(z, c, "pos", tiny.model), decoder_init(z, c, "neg", tiny.model))
    tiny.model.dims.enc_senti = False
    hx = torch.randn(6, dtype=T)
    assert torch.equal(build_condition(hx, hx, "pos", tiny.model).c,
                       build_condition(hx, hx, "neg", tiny.model).c)


# -- batch pass against the straight-line oracle ------------------------------

def oracle_inputs(tiny, ex):
    v = tiny.vocab
    view = tiny.view(ex.topics)
    graph = list(zip(view.neighbor_embedding_ids, view.relation_ids, view.position_flags))
    return (v.encode(ex.topics), [v.encode(s) for s in ex.context], v.encode(ex.target),
            SENTIMENT_ID[ex.sentiment], graph)


@pytest.mark.parametrize("k", [0, 1])
def test_forward_matches_oracle(tiny, k):
    ex = tiny.examples[k]
    eps = torch.randn(1, 3, dtype=T)
    out = tiny.model(tiny.batch([ex]), noise=eps)
    total, kl, nll, bow = negative_elbo(tiny.params(), *oracle_inputs(tiny, ex), eps[0].numpy())
    assert out.kl.item() == pytest.approx(kl, abs=1e-10)
    assert out.nll.item() == pytest.approx(nll, abs=1e-10)
    assert out.bow.item() == pytest.approx(bow, abs=1e-10)


def test_batching_matches_single_examples(tiny):
    eps = torch.randn(2, 3, dtype=T)
    both = tiny.model(tiny.batch(), noise=eps)
    for k, ex in enumerate(tiny.examples):
        one = tiny.model(tiny.batch([ex]), noise=eps[k:k + 1])
        assert torch.allclose(both.nll[k], one.nll[0], atol=1e-12)
        assert torch.allclose(both.kl[k], one.kl[0], atol=1e-12)
        assert torch.allclose(both.bow[k], one.bow[0], atol=1e-12)


def test_batch_layout(tiny):
    b = tiny.batch()
    assert b.dec_in[0].tolist() == [BOS_ID] + tiny.vocab.encode(["the", "court", "happy"])
    assert b.dec_out[0].tolist() == tiny.vocab.encode(["the", "court", "happy"]) + [EOS_ID]
    assert b.dec_mask.sum(1).tolist() == [4, 3]
    assert b.ctx_lens.tolist() == [0, 1]
    assert frame([7]) == [BOS_ID, 7, EOS_ID]


# -- generation ------------------------------------------------------------------

def test_forced_eos(tiny):
    zero_(tiny.model.output)
    with torch.no_grad():
        tiny.model.output.bias[EOS_ID] = 50.0
    essay = generate_essay(["law"], ["positive"], tiny.store, tiny.model, tiny.vocab)
    assert essay == [[EOS]]
    assert strip_eos(essay[0]) == []


def test_generation_deterministic_and_sized(tiny):
    args = (["law"], ["pos", "neg", "neu"], tiny.store, tiny.model, tiny.vocab)
    a = generate_essay(*args, max_len=6, seed=3)
    b = generate_essay(*args, max_len=6, seed=3)
    assert a == b and len(a) == 3
    assert all(1 <= len(s) <= 6 for s in a)
    assert all(s[-1] == EOS or len(s) == 6 for s in a)


def test_unknown_label_rejected(tiny):
    with pytest.raises(ValueError):
        generate_essay(["law"], ["happy"], tiny.store, tiny.model, tiny.vocab)
    with pytest.raises(ValueError):
        generate_essay(["law"], [], tiny.store, tiny.model, tiny.vocab)


def test_argmax_invariant_to_logit_shift(tiny):
    args = (["law"], ["pos", "neg"], tiny.store, tiny.model, tiny.vocab)
    before = generate_essay(*args, max_len=8, deterministic=True)
    with torch.no_grad():
        tiny.model.output.bias += 3.0
    assert generate_essay(*args, max_len=8, deterministic=True) == before


def test_later_sentences_read_generated_context(tiny):
    m = tiny.model
    seen = []
    hook = m.prior_mlp.register_forward_hook(lambda mod, inp, out: seen.append(inp[0].clone()))
    essay = generate_essay(["law"], ["pos", "neg", "neu"], tiny.store, m, tiny.vocab, max_len=5)
    ds, d = tiny.dims.d_senti, tiny.dims.d_enc
    # the context slice of sentence 2's condition is the context cell over sentence 1
    first = [t for t in tiny.vocab.encode(essay[0]) if t != EOS_ID]
    with torch.no_grad():
        h1 = m.context_rnn(encode_utterance(frame(first), m).unsqueeze(0),
                           torch.zeros(1, d, dtype=T))[0]
    assert torch.allclose(seen[1][0, ds:ds + d], h1, atol=1e-12)
    assert torch.count_nonzero(seen[0][0, ds:ds + d]) == 0

    # perturb the tokens the context encoder sees for sentence 1
    original = m.encode_utterances
    calls = {"n": 0}

    def perturbed(ids, lengths):
        calls["n"] += 1
        if calls["n"] == 2:  # call 1 encodes the topics, call 2 sentence 1
            ids = ids.clone()
            ids[:, 1] = 10 if ids[0, 1] != 10 else 11
        return original(ids, lengths)

    m.encode_utterances = perturbed
    seen.clear()
    generate_essay(["law"], ["pos", "neg", "neu"], tiny.store, m, tiny.vocab, max_len=5)
    hook.remove()
    m.encode_utterances = original
    assert not torch.allclose(seen[1][0, ds:ds + d], h1)


def test_batched_generation_matches_single(tiny):
    m = tiny.model.eval()
    views = [tiny.view(["law"]), GraphView.empty()]
    topics = [tiny.vocab.encode(["law"]), tiny.vocab.encode(["school"])]
    both = m.generate(topics, [[0, 1, 2], [2]], views, max_len=6, deterministic=True)
    for k in range(2):
        one = m.generate([topics[k]], [[[0, 1, 2], [2]][k]], [views[k]], max_len=6,
                         deterministic=True)
        assert one[0] == both[k]


def test_profiles():
    from kgessay.generator import PROFILES
    assert PROFILES["paper"].dec_hidden == 512 and PROFILES["paper"].d_z == 300
    assert PROFILES["paper"].d_senti == 32
    desk = PROFILES["desk"]
    m = Generator(20, 2, desk)
    assert m.output.in_features == desk.dec_hidden + desk.d_senti + desk.d_word
    assert m.output.out_features == 20
    assert all(p.abs().max() <= 0.08 for p in m.parameters())
