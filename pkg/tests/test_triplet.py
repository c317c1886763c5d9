import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpdesc import nn
from lpdesc.triplet import (SENTINEL, batch_hard_loss, distance_matrix, hinge_term,
                            mine_hardest_in_batch, triplet_margin_loss)


def brute_distances(fa, fb):
    k = len(fa)
    d = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            d[i, j] = SENTINEL if i == j else np.sqrt(((fa[i] - fb[j]) ** 2).sum())
    return d


def brute_mining(d):
    """Scan every candidate in row k and column k; lowest index wins ties,
    and a anchors unless the column holds a strictly smaller distance."""
    k = len(d)
    out = []
    for i in range(k):
        row = min(range(k), key=lambda j: (d[i, j], j))
        col = min(range(k), key=lambda j: (d[j, i], j))
        if d[i, row] <= d[col, i]:
            out.append((True, row, d[i, row]))
        else:
            out.append((False, col, d[col, i]))
    return out


def test_distance_matrix_basics():
    e = np.eye(3)
    d = distance_matrix(e, e[[1, 0, 2]])
    assert d[0, 1] == 0 and d[1, 0] == 0
    assert d[0, 2] == pytest.approx(np.sqrt(2))
    assert np.all(np.diag(d) == SENTINEL)
    with pytest.raises(ValueError):
        distance_matrix(np.zeros((3, 4)), np.zeros((2, 4)))


def test_distance_matrix_oracle():
    rng = np.random.default_rng(0)
    fa, fb = nn.l2_normalize(rng.standard_normal((2, 8, 128)).reshape(16, 128)).reshape(2, 8, 128)
    np.testing.assert_allclose(distance_matrix(fa, fb), brute_distances(fa, fb), atol=1e-6)


def test_mining_two_by_two():
    d = np.array([[SENTINEL, 0.3], [0.5, SENTINEL]])
    sel = mine_hardest_in_batch(d)
    assert sel.anchor_is_a[0] and sel.negative[0] == 1 and sel.neg_dist[0] == 0.3


def test_mining_ties_prefer_a():
    d = np.full((5, 5), 0.7)
    np.fill_diagonal(d, SENTINEL)
    sel = mine_hardest_in_batch(d)
    assert sel.anchor_is_a.all()


def test_mining_needs_two():
    with pytest.raises(ValueError):
        mine_hardest_in_batch(np.array([[SENTINEL]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2 ** 31), st.booleans())
def test_mining_matches_oracle(k, seed, quantize):
    rng = np.random.default_rng(seed)
    d = distance_matrix(rng.standard_normal((k, 4)), rng.standard_normal((k, 4)))
    if quantize:
        d = np.where(d == SENTINEL, SENTINEL, np.round(d, 0))  # force many ties
    sel = mine_hardest_in_batch(d)
    for i, (anchor_a, neg, dist) in enumerate(brute_mining(d)):
        assert (sel.anchor_is_a[i], sel.negative[i], sel.neg_dist[i]) == (anchor_a, neg, dist)
        assert sel.negative[i] != i


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 20), st.integers(0, 2 ** 31), st.floats(0.01, 3))
def test_mining_shift_invariance(k, seed, c):
    rng = np.random.default_rng(seed)
    d = distance_matrix(rng.standard_normal((k, 4)), rng.standard_normal((k, 4)))
    shifted = d + c
    np.fill_diagonal(shifted, SENTINEL)
    a, b = mine_hardest_in_batch(d), mine_hardest_in_batch(shifted)
    assert np.array_equal(a.anchor_is_a, b.anchor_is_a) and np.array_equal(a.negative, b.negative)


def test_hinge_examples():
    assert hinge_term(0.0, 1.2) == 0.0
    assert hinge_term(0.5, 0.5) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2 ** 31), st.sampled_from([1, 2]))
def test_loss_nonnegative_and_zero_iff_satisfied(k, seed, power):
    rng = np.random.default_rng(seed)
    fa = nn.l2_normalize(rng.standard_normal((k, 16)))
    fb = nn.l2_normalize(fa + 0.3 * rng.standard_normal((k, 16)))
    loss, _, _, sel, active = batch_hard_loss(fa, fb, 1.0, power)
    assert loss >= 0
    dpos = np.linalg.norm(fa - fb, axis=1)
    satisfied = sel.neg_dist ** power >= 1.0 + dpos ** power
    assert (loss == 0) == bool(satisfied.all())


def test_identical_pairs_bound():
    rng = np.random.default_rng(3)
    fa = nn.l2_normalize(rng.standard_normal((8, 128)))
    loss, *_ = batch_hard_loss(fa, fa.copy())
    assert loss / 8 <= 1.0


@pytest.mark.parametrize("power", [1, 2])
def test_loss_gradient(power):
    rng = np.random.default_rng(power)
    k = 8
    fa = rng.standard_normal((k, 16)) * 0.3
    fb = fa + rng.standard_normal((k, 16)) * 0.3
    sel = mine_hardest_in_batch(distance_matrix(fa, fb))
    _, ga, gb, _ = triplet_margin_loss(fa, fb, sel, 1.0, power)

    def objective():
        return triplet_margin_loss(fa, fb, mine_hardest_in_batch(distance_matrix(fa, fb)), 1.0, power)[0]

    def signature():
        s = mine_hardest_in_batch(distance_matrix(fa, fb))
        return s.anchor_is_a, s.negative, triplet_margin_loss(fa, fb, s, 1.0, power)[3]

    assert nn.finite_diff_check(objective, [fa, fb], [ga, gb], rng, signature=signature) < 1e-4
