import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from urgency_rank import autodiff as ad
from urgency_rank.losses import (
    DegenerateSlateError, neural_ndcg_loss, neural_ndcg_per_slate, neural_sort, pointwise_loss, sinkhorn,
)
from oracles import brute_ndcg, hard_rank_positions, numeric_grad, rel_err


def hard_permutation(scores) -> np.ndarray:
    pos = hard_rank_positions(scores)
    P = np.zeros((len(pos), len(pos)))
    for item, rank in enumerate(pos):
        P[rank, item] = 1.0
    return P


def random_labels(rng, m):
    y = rng.integers(0, 3, size=m)
    if not y.any():
        y[rng.integers(m)] = 1
    return y


def test_neural_sort_single_item():
    assert neural_sort(ad.Tensor([0.7]), 1.0).data.tolist() == [[1.0]]


def test_neural_sort_equal_scores_are_uniform():
    np.testing.assert_allclose(neural_sort(ad.Tensor([2.0] * 4), 0.3).data, 0.25, atol=1e-15)


def test_neural_sort_hard_limit_example():
    P = neural_sort(ad.Tensor([3.0, 1.0, 2.0]), 1e-4).data
    np.testing.assert_allclose(P, [[1, 0, 0], [0, 0, 1], [0, 1, 0]], atol=1e-6)
    assert P.argmax(axis=1).tolist() == [0, 2, 1]


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_neural_sort_rejects_nonpositive_temperature(tau):
    with pytest.raises(ValueError):
        neural_sort(ad.Tensor([1.0, 2.0]), tau)


@settings(max_examples=80, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-3, 1e2), st.floats(-1e3, 1e3))
def test_neural_sort_rows_and_shift_invariance(s, tau, c):
    P = neural_sort(ad.Tensor(s), tau).data
    assert np.all(np.abs(P.sum(axis=1) - 1.0) <= 1e-9)
    np.testing.assert_allclose(neural_sort(ad.Tensor(s + c), tau).data, P, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=7, unique=True))
def test_neural_sort_temperature_limit(values):
    s = np.array(values)
    gap = np.diff(np.sort(s)).min()
    if gap < 1e-6:
        return
    P = neural_sort(ad.Tensor(s), gap / 50).data
    assert np.abs(P - hard_permutation(s)).max() < 1e-6


def test_sinkhorn_uniform_fixed_point():
    U = np.full((5, 5), 0.2)
    np.testing.assert_allclose(sinkhorn(ad.Tensor(U), 30).data, U, atol=1e-9)


def test_sinkhorn_smoothed_permutation_fixed_point():
    eps = 1e-8
    P = hard_permutation([0.3, 2.0, -1.0, 0.9]) + eps
    P /= P.sum(axis=1, keepdims=True)
    assert np.abs(sinkhorn(ad.Tensor(P), 30).data - P).max() < eps


def test_sinkhorn_random_positive_converges():
    P = np.random.default_rng(0).uniform(0.01, 1.0, size=(4, 4))
    out = sinkhorn(ad.Tensor(P), 30).data
    assert np.abs(out.sum(axis=0) - 1).max() < 1e-6
    assert np.abs(out.sum(axis=1) - 1).max() < 1e-6


def test_sinkhorn_gradient_with_zero_rows():
    rng = np.random.default_rng(5)
    P = rng.uniform(0.05, 1.0, size=(2, 4, 4))
    P[1, 3, :] = P[1, :, 3] = 0.0  # padded slot
    x = ad.Tensor(P, requires_grad=True)
    w = rng.normal(size=P.shape)

    def f():
        return ad.sum_(sinkhorn(x, 7) * w)

    with ad.Tape() as tape:
        out = f()
    g = tape.backward(out)[x]
    live = P > 0  # nudging an exact zero switches its row off the guard, so FD is meaningless there
    assert rel_err(g[live], numeric_grad(lambda: f().data, x.data)[live]) < 1e-6
    assert np.all(sinkhorn(x, 7).data[1, 3] == 0.0)


def test_neural_ndcg_single_candidate_is_minus_one():
    assert neural_ndcg_loss(ad.Tensor([0.4]), [1], tau=1.0).data == -1.0


def test_neural_ndcg_positive_on_top():
    loss = float(neural_ndcg_loss(ad.Tensor([5.0, 1.0, 0.2, -3.0]), [1, 0, 0, 0], tau=1e-4).data)
    assert -1.0 <= loss <= -1.0 + 1e-3


def test_neural_ndcg_rejects_all_zero_labels():
    with pytest.raises(DegenerateSlateError):
        neural_ndcg_loss(ad.Tensor([1.0, 2.0]), [0, 0])


def test_neural_ndcg_matches_exact_ndcg_at_low_temperature():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(300):
        m = int(rng.integers(1, 7))
        s, y = rng.normal(scale=3.0, size=m), random_labels(rng, m)
        loss = float(neural_ndcg_loss(ad.Tensor(s), y, tau=1e-4).data)
        worst = max(worst, abs(-loss - brute_ndcg(s, list(y))))
    assert worst < 1e-3


def test_padded_batch_matches_individual_slates():
    rng = np.random.default_rng(2)
    sizes = [1, 3, 6, 4]
    M = max(sizes)
    S, Y, mask = np.zeros((4, M)), np.zeros((4, M)), np.zeros((4, M), bool)
    singles = []
    for b, m in enumerate(sizes):
        s, y = rng.normal(size=m), random_labels(rng, m)
        S[b, :m], Y[b, :m], mask[b, :m] = s, y, True
        S[b, m:] = rng.normal(size=M - m) * 1e3  # garbage in padding
        singles.append(float(neural_ndcg_loss(ad.Tensor(s), y, tau=0.5).data))
    batched = neural_ndcg_per_slate(ad.Tensor(S), Y, mask, tau=0.5).data
    np.testing.assert_allclose(batched, singles, atol=1e-12)


def test_loss_bounds_after_sinkhorn():
    rng = np.random.default_rng(3)
    for _ in range(50):
        m = int(rng.integers(2, 9))
        loss = float(neural_ndcg_loss(ad.Tensor(rng.normal(size=m)), random_labels(rng, m), tau=1.0).data)
        assert -1.0 - 1e-6 <= loss <= 0.0


@pytest.mark.parametrize("tau", [0.1, 1.0])
def test_neural_ndcg_gradient(tau):
    rng = np.random.default_rng(int(tau * 10))
    # score spread comparable to tau: saturated items have gradients below FD resolution
    s = ad.Tensor(rng.normal(scale=3 * tau, size=5), requires_grad=True)
    y = np.array([0, 1, 0, 2, 0])
    with ad.Tape() as tape:
        out = neural_ndcg_loss(s, y, tau=tau)
    g = tape.backward(out)[s]
    assert rel_err(g, numeric_grad(lambda: neural_ndcg_loss(s, y, tau=tau).data, s.data)) < 1e-4


def test_pointwise_at_half_is_ln2():
    assert float(pointwise_loss(ad.Tensor([[0.3, 0.3], [-1.0, -1.0]]), [1, 0]).data) == pytest.approx(math.log(2), abs=1e-15)


def test_pointwise_confident_and_correct_is_near_zero():
    logits = ad.Tensor([[40.0, -40.0], [-40.0, 40.0], [-40.0, 40.0]])
    assert float(pointwise_loss(logits, [1, 0, 0]).data) < 1e-30


def test_pointwise_gradient_and_padding():
    rng = np.random.default_rng(4)
    x = ad.Tensor(rng.normal(size=(2, 4, 2)), requires_grad=True)
    y = np.array([[1, 0, 0, 0], [0, 0, 1, 0]])
    mask = np.array([[True] * 4, [True, True, True, False]])

    def f():
        return pointwise_loss(x, y, mask)

    with ad.Tape() as tape:
        out = f()
    g = tape.backward(out)[x]
    assert rel_err(g, numeric_grad(lambda: f().data, x.data)) < 1e-4
    assert np.all(g[1, 3] == 0.0)
