import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from greedyprune.checks import fixed_step_rates, local_oracle, random_features
from greedyprune.features import FeatureSet
from greedyprune.local_imitation import (GreedyState, NumericalDegeneracy, StopRule,
                                         brute_force_step, init_local, run_local, score_all,
                                         step_fixed, step_linesearch)
from greedyprune.numeric import RngStream


def state_at(fs, A):
    A = np.asarray(A, dtype=np.float64)
    hA = A @ fs.h
    r = hA - fs.h_bar
    return GreedyState(A, hA, float(r @ r), 0, [])


@pytest.fixture
def two_point():
    return FeatureSet.from_array([[1.0, 0.0], [0.0, 1.0]], d=2)


@pytest.fixture
def three_point():
    return FeatureSet.from_array([[0.0], [1.0], [2.0]])


def test_init_exact_match_has_zero_loss():
    fs = FeatureSet.from_array([[0.0], [1.0], [2.0]])
    st_ = init_local(fs)
    assert st_.A.tolist() == [0, 1, 0] and st_.loss == 0.0


def test_init_tie_picks_lowest_index(two_point):
    st_ = init_local(two_point)
    assert st_.A.tolist() == [1.0, 0.0] and st_.loss == 0.5


def test_init_matches_enumeration():
    fs = random_features(RngStream(3), 30, 10, 3)
    losses = [float(np.sum((fs.h[i] - fs.h_bar) ** 2)) for i in range(fs.N)]
    assert int(np.argmax(init_local(fs).A)) == int(np.argmin(losses))


def test_three_point_scores(three_point):
    scores = score_all(three_point, state_at(three_point, [1, 0, 0]))
    s = scores[2]
    assert (s.q, s.g, s.tilde_gamma, s.score) == (2.0, 4.0, 0.5, 1.0)
    assert scores[0].g == 0.0 and scores[0].score == 0.0


def test_degenerate_direction_scores_zero(two_point):
    A = [1.0, 0.0]
    assert score_all(two_point, state_at(two_point, A))[0].score == 0.0


def grid_decrease(fs, state, i, step=1e-5):
    a = state.A[i]
    lo = -a / (1 - a) if 0 < a < 1 else 0.0
    gammas = np.arange(lo, 1.0 + step / 2, step)
    best = state.loss
    for chunk in np.array_split(gammas, max(1, gammas.size // 20000)):
        R = (1 - chunk)[:, None] * state.hA + chunk[:, None] * fs.h[i] - fs.h_bar
        best = min(best, float(np.min(np.einsum("ij,ij->i", R, R))))
    return state.loss - best


@pytest.mark.parametrize("seed", range(5))
def test_scores_match_grid_search(seed):
    rng = RngStream(seed, "grid")
    fs = random_features(rng, 6, 4, 2)
    state = init_local(fs)
    for _ in range(2):
        state = step_linesearch(fs, state)
    for i, s in enumerate(score_all(fs, state)):
        if s.g == 0 or s.tilde_gamma >= 1:
            assert s.score == 0.0
            continue
        assert abs(s.score - grid_decrease(fs, state, i)) <= 1e-8


def test_linesearch_two_point(two_point):
    nxt = step_linesearch(two_point, init_local(two_point))
    row = nxt.trace[-1]
    assert row.chosen_index == 1 and row.gamma == 0.5 and nxt.loss == 0.0


def test_linesearch_three_point(three_point):
    nxt = step_linesearch(three_point, state_at(three_point, [1, 0, 0]))
    assert nxt.trace[-1].chosen_index == 2 and nxt.trace[-1].gamma == 0.5
    assert nxt.hA.tolist() == [1.0] and nxt.loss == 0.0


def test_linesearch_matches_exhaustive_oracle():
    res = local_oracle(instances=50, steps=4, seed=7)
    assert res.passed, res.line()


def test_linesearch_can_remove_a_neuron():
    # after adding a poor neuron, removing it is the best move
    fs = FeatureSet.from_array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 5.0], [0.0, -5.0]], d=2)
    state = state_at(fs, [0.5, 0.0, 0.0, 0.5, 0.0])
    nxt = step_linesearch(fs, state)
    assert nxt.loss < state.loss
    removed = [i for i in range(fs.N) if state.A[i] > 0 and nxt.A[i] == 0]
    assert removed == [] or nxt.trace[-1].gamma < 0


def test_linesearch_degenerate_instance_raises():
    fs = FeatureSet.from_array([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]], d=2)
    state = state_at(fs, [1.0, 0.0, 0.0])
    assert state.loss == 0.0
    assert step_linesearch(fs, state) is state
    # positive loss with no usable direction
    fs2 = FeatureSet.from_array([[0.0], [0.0]])
    bad = GreedyState(np.array([1.0, 0.0]), np.array([0.0]), 1.0, 0, [])
    with pytest.raises(NumericalDegeneracy):
        step_linesearch(fs2, bad)


def test_brute_force_examples(three_point):
    assert brute_force_step(three_point, state_at(three_point, [1, 0, 0])) == (2, 0.5, 0.0)
    fs = FeatureSet.from_array([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]], d=2)
    i, _, loss = brute_force_step(fs, state_at(fs, [0, 1, 0]))
    assert 0 <= i < 3 and loss == 0.0


def test_fixed_step_k0_is_init_rule():
    fs = random_features(RngStream(8), 12, 5, 2)
    init = init_local(fs)
    st0 = GreedyState(np.zeros(fs.N), np.zeros_like(fs.h_bar), np.inf, 0, [])
    first = step_fixed(fs, st0)
    assert np.array_equal(first.A, init.A)


def test_fixed_step_invariants_uniform_target():
    h = np.eye(6)
    fs = FeatureSet.from_array(h, d=6)
    state = init_local(fs)
    for _ in range(30):
        state = step_fixed(fs, state)
        assert abs(state.A.sum() - 1) <= 1e-12 and state.A.min() >= 0
        assert np.count_nonzero(state.A) <= state.k + 1


def test_fixed_step_rate():
    res = fixed_step_rates(seeds=20)
    assert res.passed, res.line()


def test_run_local_eps_above_initial_loss(two_point):
    st_ = run_local(two_point, StopRule(loss_eps=10.0))
    assert st_.status == "eps" and st_.support_size == 1


def test_run_local_eps_zero_two_point(two_point):
    st_ = run_local(two_point, StopRule(loss_eps=0.0))
    assert st_.support_size == 2 and st_.loss == 0.0 and st_.k == 1


def test_run_local_monotone_on_large_instance():
    fs = random_features(RngStream(9), 50, 64, 1)
    seen = []
    final = run_local(fs, StopRule(max_iters=400), on_step=seen.append)
    for a, b in zip(seen, seen[1:]):
        assert b.loss <= a.loss
        if a.loss > 1e-14:
            assert b.loss < a.loss
    assert final.k == seen[-1].k


def test_run_local_support_cap_and_budget():
    fs = random_features(RngStream(10), 20, 8, 2)
    capped = run_local(fs, StopRule(max_support=4, max_iters=500))
    assert capped.status == "support" and capped.support_size <= 4
    short = run_local(fs, StopRule(max_iters=3))
    assert short.status == "budget" and short.flagged and short.k == 3


def test_trace_rows_are_consistent():
    fs = random_features(RngStream(11), 15, 6, 2)
    final = run_local(fs, StopRule(max_iters=30))
    assert [r.k for r in final.trace] == list(range(final.k + 1))
    assert final.trace[-1].support == final.support_size
    assert final.trace[-1].loss == final.loss


@settings(max_examples=60, deadline=None)
@given(N=st.integers(2, 25), m=st.integers(1, 12), d=st.integers(1, 4),
       seed=st.integers(0, 10_000), step=st.sampled_from(["linesearch", "fixed"]))
def test_property_simplex_sparsity_descent(N, m, d, seed, step):
    fs = random_features(RngStream(seed, "prop"), N, m, d)
    seen = []
    run_local(fs, StopRule(max_iters=60), step=step, on_step=seen.append)
    for s in seen:
        assert abs(s.A.sum() - 1.0) <= 1e-12 and s.A.min() >= 0
        assert np.count_nonzero(s.A) <= s.k + 1
    if step == "linesearch":
        for a, b in zip(seen, seen[1:]):
            if a.loss > 1e-14:
                assert b.loss < a.loss
