import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from matchgan import nets
from matchgan import pretext as pt

LN2 = math.log(2)


def _class_of(groups):
    return {m: c for c, members in groups.items() for m in members}


def test_exhaustive_two_by_two():
    groups = {"A": ["a1", "a2"], "B": ["b1", "b2"]}
    trips = pt.build_real_triplets(groups, np.random.default_rng(0), plan="exhaustive")
    got = sorted((t.anchor, t.positive, t.negative) for t in trips)
    want = sorted([(a, p, n) for a, p in [("a1", "a2"), ("a2", "a1")] for n in ("b1", "b2")] +
                  [(a, p, n) for a, p in [("b1", "b2"), ("b2", "b1")] for n in ("a1", "a2")])
    assert got == want and len(got) == 8


def test_singleton_groups_fall_back_to_anchor():
    trips = pt.build_real_triplets({"A": ["a1"], "B": ["b1"]}, np.random.default_rng(0))
    assert len(trips) == 2
    assert {(t.anchor, t.positive, t.negative) for t in trips} == {("a1", "a1", "b1"), ("b1", "b1", "a1")}


def test_triplet_counts_for_default_batch():
    groups = {c: list(range(4 * c, 4 * c + 4)) for c in range(4)}
    rng = np.random.default_rng(0)
    assert len(pt.build_real_triplets(groups, rng)) == 16
    assert len(pt.build_real_triplets(groups, rng, plan="per_class")) == 48
    assert len(pt.build_fake_triplets(groups, rng)) == 16


def test_degenerate_batches():
    with pytest.raises(pt.DegenerateBatch):
        pt.build_real_triplets({"A": [1, 2, 3]}, np.random.default_rng(0))
    with pytest.raises(pt.DegenerateBatch):
        pt.build_real_triplets({"A": [1], "B": []}, np.random.default_rng(0))
    with pytest.raises(pt.EmptyTripletSet):
        pt.match_loss_from_probs(torch.zeros(0), torch.zeros(0))


@settings(max_examples=60, deadline=None)
@given(sizes=st.lists(st.integers(1, 5), min_size=2, max_size=6),
       seed=st.integers(0, 2 ** 32 - 1),
       plan=st.sampled_from(["sampled", "per_class", "exhaustive"]))
def test_triplet_class_invariants(sizes, seed, plan):
    groups, start = {}, 0
    for c, n in enumerate(sizes):
        groups[c] = list(range(start, start + n))
        start += n
    cls = _class_of(groups)
    trips = pt.build_real_triplets(groups, np.random.default_rng(seed), plan=plan)
    for t in trips:
        assert cls[t.anchor] == cls[t.positive] == t.anchor_class
        assert cls[t.negative] == t.negative_class != t.anchor_class
        if len(groups[t.anchor_class]) > 1:
            assert t.anchor != t.positive
    if plan == "sampled":
        assert len(trips) == sum(sizes)


def test_sampling_deterministic_given_rng():
    groups = {c: list(range(4 * c, 4 * c + 4)) for c in range(4)}
    a = pt.build_real_triplets(groups, np.random.default_rng(5))
    b = pt.build_real_triplets(groups, np.random.default_rng(5))
    assert a == b


def test_zero_head_gives_two_ln2():
    head = nets.build_match_head(6, (2, 2), zero_init=True, dtype=torch.float64)
    emb = torch.randn(8, 6, 2, 2, dtype=torch.float64)
    trips = pt.build_real_triplets(pt.group_positions([0, 0, 1, 1, 2, 2, 3, 3]), np.random.default_rng(0))
    loss = pt.match_loss(head, emb, trips)
    assert abs(loss.item() - 2 * LN2) / (2 * LN2) <= 1e-6


def test_hand_built_probabilities():
    loss = pt.match_loss_from_probs(torch.tensor([0.8], dtype=torch.float64),
                                    torch.tensor([0.3], dtype=torch.float64))
    want = -(math.log(0.8) + math.log(0.7))
    assert abs(loss.item() - want) / want <= 1e-6
    assert abs(want - 0.5798) < 1e-4


def test_perfect_classification_limit():
    loss = pt.match_loss_from_probs(torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
    assert 0 <= loss.item() <= 2 * pt.PROB_EPS * 1.01
    assert torch.isfinite(pt.match_loss_from_probs(torch.zeros(2), torch.ones(2)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_loss_is_permutation_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    head = nets.build_match_head(4, (1, 1), seed=seed % 97, dtype=torch.float64)
    emb = torch.randn(8, 4, 1, 1, generator=g, dtype=torch.float64)
    trips = pt.build_real_triplets(pt.group_positions([0, 0, 1, 1, 2, 2, 3, 3]), np.random.default_rng(seed))
    perm = np.random.default_rng(seed + 1).permutation(len(trips))
    a = pt.match_loss(head, emb, trips)
    b = pt.match_loss(head, emb, [trips[i] for i in perm])
    assert torch.allclose(a, b, rtol=1e-12)


def test_constant_head_gives_two_ln2_for_any_triplets():
    for n in (1, 7, 30):
        half = torch.full((n,), 0.5, dtype=torch.float64)
        assert abs(pt.match_loss_from_probs(half, half).item() - 2 * LN2) < 1e-12


def test_raising_positive_logit_lowers_loss():
    z = torch.tensor([0.3, -0.2, 1.0], dtype=torch.float64, requires_grad=True)
    p_neg = torch.tensor([0.4, 0.6, 0.2], dtype=torch.float64)
    loss = pt.match_loss_from_probs(torch.sigmoid(z), p_neg)
    loss.backward()
    assert torch.all(z.grad < 0)
    with torch.no_grad():
        stepped = pt.match_loss_from_probs(torch.sigmoid(z + 0.1), p_neg)
    assert stepped < loss


def test_euclidean_examples():
    t = lambda *v: torch.tensor([v], dtype=torch.float64)
    assert pt.euclidean_triplet_loss(t(1, 1), t(1, 1), t(3, 3), margin=1.0).item() == 0
    assert pt.euclidean_triplet_loss(t(1, 2), t(1, 2), t(1, 2), margin=1.0).item() == 1.0
    assert pt.euclidean_triplet_loss(t(0, 0), t(1, 0), t(0, 2), margin=1.0).item() == 0
    # hinge active: 4 - 1 + 1 = 4
    assert pt.euclidean_triplet_loss(t(0, 0), t(0, 2), t(1, 0), margin=1.0).item() == 4.0


def test_match_losses_through_networks():
    torch.manual_seed(0)
    G = nets.build_generator(16, 2, 4, n_res=1)
    D = nets.build_discriminator(16, 2, 4)
    head = nets.build_match_head(D.emb_channels, (D.emb_spatial,) * 2)
    x = torch.randn(4, 3, 16, 16)
    y = torch.tensor([[1.0, 0], [1, 0], [0, 1], [0, 1]])
    trips = pt.build_fake_triplets(pt.group_positions([0, 0, 1, 1]), np.random.default_rng(0))
    loss = pt.match_loss_G(G, D, head, x, y, trips)
    loss.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in G.parameters())
    d_loss = pt.match_loss_D(D, head, x, trips)
    assert d_loss.item() >= 0
    assert pt.euclidean_loss_on(D.embed(x), trips).item() >= 0
