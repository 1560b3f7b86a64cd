import math
import random

import pytest
import torch

from kgessay.discriminator import (DiscriminatorOutput, TopicDiscriminator, bce, classify,
                                   disc_loss, fake_target, real_target, topic_reward)


def zeroed(m=2, **kw):
    d = TopicDiscriminator(10, m, **kw).double()
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
    return d


def test_zero_params_half_scores():
    out = classify([4, 5, 6], zeroed())
    assert out.scores.tolist() == [0.5, 0.5, 0.5]


def test_output_width():
    assert classify([4, 5], TopicDiscriminator(10, 2)).scores.shape == (3,)
    assert classify([4, 5], TopicDiscriminator(10, 7, fake_class=False)).scores.shape == (7,)


def test_hand_convolution():
    d = TopicDiscriminator(10, 1, d_word=1, n_filters=1, widths=(2,), window=3).double()
    with torch.no_grad():
        d.embedding.weight.zero_()
        d.embedding.weight[4, 0], d.embedding.weight[5, 0], d.embedding.weight[6, 0] = 1.0, -2.0, 3.0
        d.convs[0].weight.copy_(torch.tensor([[[0.5, 0.25]]], dtype=torch.float64))
        d.convs[0].bias.fill_(0.1)
        d.fc.weight.copy_(torch.tensor([[2.0], [-1.0]], dtype=torch.float64))
        d.fc.bias.copy_(torch.tensor([0.0, 0.3], dtype=torch.float64))
    # windows: (1,-2) -> 0.5-0.5+0.1 = 0.1, (-2,3) -> -1+0.75+0.1 = -0.15, relu -> max 0.1
    pooled = 0.1
    s = classify([4, 5, 6], d).scores
    sig = lambda x: 1 / (1 + math.exp(-x))
    assert s.tolist() == pytest.approx([sig(2 * pooled), sig(-pooled + 0.3)], abs=1e-12)


def test_scores_are_independent_sigmoids():
    d = TopicDiscriminator(10, 4)
    s = classify([4, 5, 6, 7], d).scores
    assert ((s > 0) & (s < 1)).all()
    assert abs(s.sum().item() - 1) > 1e-3


def test_bias_monotone():
    d = TopicDiscriminator(10, 3).double()
    before = classify([4, 5, 6], d).scores
    with torch.no_grad():
        d.fc.bias[1] += 0.5
    after = classify([4, 5, 6], d).scores
    assert after[1] > before[1]
    others = [0, 2, 3]
    assert torch.equal(after[others], before[others])


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        classify([], TopicDiscriminator(10, 2))


def test_long_input_truncated_to_window():
    d = TopicDiscriminator(10, 2, window=8)
    a = classify([4] * 8 + [5] * 50, d).scores
    b = classify([4] * 8, d).scores
    assert torch.equal(a, b)


def test_loss_perfect_and_chance():
    p = torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64)
    assert bce(p, p).item() == pytest.approx(0.0, abs=1e-6)
    half = torch.full((2, 3), 0.5, dtype=torch.float64)
    assert bce(half, p).item() == pytest.approx(math.log(2), abs=1e-12)
    d = zeroed()
    assert disc_loss([([4, 5], [1, 0, 0]), ([6], [0, 0, 1])], d).item() == pytest.approx(math.log(2))


def test_loss_is_item_mean():
    d = TopicDiscriminator(10, 2).double()
    real = ([4, 5, 6], real_target([0, 1], d))
    fake = ([7, 8], fake_target(d))
    both = disc_loss([real, fake], d)
    assert both.item() == pytest.approx((disc_loss([real], d) + disc_loss([fake], d)).item() / 2)
    assert real[1] == [1.0, 1.0, 0.0] and fake[1] == [0.0, 0.0, 1.0]


def test_loss_rejects_bad_targets():
    d = TopicDiscriminator(10, 2)
    with pytest.raises(ValueError):
        disc_loss([([4], [0.5, 0, 0])], d)
    with pytest.raises(ValueError):
        disc_loss([([4], [1, 0])], d)


def test_loss_decreases_after_step():
    torch.manual_seed(0)
    d = TopicDiscriminator(12, 3)
    batch = [([4, 5, 6, 7], [1, 0, 0, 0]), ([8, 9, 10], [0, 1, 1, 0]), ([11, 4], [0, 0, 0, 1])]
    opt = torch.optim.SGD(d.parameters(), lr=0.1)
    before = disc_loss(batch, d)
    before.backward()
    opt.step()
    assert disc_loss(batch, d).item() < before.item()


def test_reward_cases():
    out = DiscriminatorOutput(torch.tensor([0.8, 0.1, 0.4, 0.9]))
    assert topic_reward(out, [0, 2]).item() == pytest.approx(0.6)
    assert topic_reward(DiscriminatorOutput(torch.ones(4)), [0, 1, 2]).item() == 1.0
    assert topic_reward(DiscriminatorOutput(torch.zeros(4)), [1]).item() == 0.0
    assert topic_reward(out, [0, 2], penalize_fake=True).item() == 0.0


def test_reward_errors():
    out = DiscriminatorOutput(torch.rand(4))
    with pytest.raises(ValueError):
        topic_reward(out, [])
    with pytest.raises(ValueError):
        topic_reward(out, [3])  # the fake index is not a topic


def test_reward_permutation_invariant():
    rng = random.Random(0)
    out = DiscriminatorOutput(torch.rand(9, dtype=torch.float64))
    for _ in range(20):
        idx = rng.sample(range(8), rng.randint(1, 8))
        shuffled = idx[:]
        rng.shuffle(shuffled)
        assert topic_reward(out, idx).item() == pytest.approx(topic_reward(out, shuffled).item(), abs=1e-15)


def test_fake_index():
    assert TopicDiscriminator(10, 5).fake_index == 5
    with pytest.raises(ValueError):
        TopicDiscriminator(10, 5, fake_class=False).fake_index
