import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isac_omp.matching import (
    MatchRelation,
    cascade_total_loss,
    greedy_match,
    joint_match,
    mae_losses,
    match_all,
)


def exhaustive_greedy(truth, est):
    """Reference: scan every remaining pair in (i, j) order, keep the strictly smaller distance."""
    left_t, left_e = list(range(len(truth))), list(range(len(est)))
    pairs = []
    while left_t:
        best = None
        for i in left_t:
            for j in left_e:
                dist = abs(truth[i] - est[j])
                if best is None or dist < best[0]:
                    best = (dist, i, j)
        pairs.append((best[1], best[2]))
        left_t.remove(best[1])
        left_e.remove(best[2])
    return tuple(pairs)


def test_worked_example():
    pairs = greedy_match([10, 20], [19, 12])
    assert pairs == ((1, 0), (0, 1))
    t = np.array([[0, 10, 0], [0, 20, 0]], float)
    e = np.array([[0, 19, 0], [0, 12, 0]], float)
    assert mae_losses(t, e)[1] == 1.5


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 5).flatmap(lambda m: st.tuples(
    st.lists(st.integers(-5, 5), min_size=m, max_size=m),
    st.lists(st.integers(-5, 5), min_size=m, max_size=m),
)))
def test_greedy_equals_exhaustive_with_ties(te):
    truth, est = te
    assert greedy_match(truth, est) == exhaustive_greedy(truth, est)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_matching_is_a_bijection(m, seed):
    rng = np.random.default_rng(seed)
    pairs = greedy_match(rng.normal(size=m), rng.normal(size=m))
    assert sorted(i for i, _ in pairs) == list(range(m))
    assert sorted(j for _, j in pairs) == list(range(m))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_loss_properties(m, seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(m, 3))
    e = rng.normal(size=(m, 3))
    lp, lr, lv, total = mae_losses(t, e)
    assert min(lp, lr, lv) >= 0
    assert total == pytest.approx(lp + lr + lv)
    assert mae_losses(t, t)[3] == 0
    # relabelling estimates does not change the loss
    perm = rng.permutation(m)
    assert mae_losses(t, e[perm])[3] == pytest.approx(total)
    # greedy never does worse than the identity pairing on the first pick
    ident = MatchRelation(*(tuple((i, i) for i in range(m)),) * 3)
    assert mae_losses(t, e, ident)[3] >= 0


def test_length_mismatch():
    with pytest.raises(ValueError):
        greedy_match([1, 2], [1])


def test_cascade_loss_reuses_pairings():
    t = np.array([[0, 10, 0], [0, 20, 0]], float)
    e1 = np.array([[0, 19, 0], [0, 12, 0]], float)
    rel = match_all(t, e1)
    s1 = mae_losses(t, e1, rel)
    e2 = np.array([[0, 20, 0], [0, 10, 0]], float)
    assert cascade_total_loss(s1, e2, t, rel) == pytest.approx(0.5 * 1.5)
    # swapped stage-2 rows are scored against the stage-1 pairs, not re-matched
    assert cascade_total_loss(s1, e2[::-1], t, rel) == pytest.approx(0.5 * (1.5 + 10.0))


def test_joint_match_pairs_whole_targets():
    t = np.array([[0, 0, 0], [1, 1, 1]], float)
    e = np.array([[1, 1, 1.1], [0, 0.1, 0]], float)
    assert set(joint_match(t, e)) == {(0, 1), (1, 0)}


def test_exhaustive_reference_on_all_small_permutations():
    vals = [0, 1, 3]
    for tr in itertools.permutations(vals):
        for es in itertools.product(vals, repeat=3):
            assert greedy_match(tr, es) == exhaustive_greedy(tr, es)
