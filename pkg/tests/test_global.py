import numpy as np
import pytest

from greedyprune.checks import (_random_depth2, global_oracle, identity_tail_agreement,
                                identity_tail_problem, loglog_slope, naive_candidate_losses,
                                taylor_fd)
from greedyprune.global_imitation import (GlobalProblem, GlobalState, init_global, run_global,
                                          step_exact, step_taylor, taylor_coeffs)
from greedyprune.local_imitation import StopRule, init_local, run_local, score_all
from greedyprune.model import Layer, Network, random_network
from greedyprune.numeric import RngStream


def random_state(problem, rng, k=6, density=0.5):
    A = rng.uniform(problem.N) * (rng.uniform(problem.N) < density)
    A[0] += 0.05
    A /= A.sum()
    return GlobalState(A, problem.loss(A), k)


@pytest.fixture
def depth2():
    net, X = _random_depth2(RngStream(21), "tanh")
    return net, X, GlobalProblem.build(net, 1, X)


def test_init_identity_tail_equals_local():
    for t in range(10):
        _, _, fs, problem = identity_tail_problem(RngStream(t, "init"), 12, 6, 3)
        ls, gs = init_local(fs), init_global(problem)
        assert np.array_equal(ls.A, gs.A) and abs(ls.loss - gs.loss) <= 1e-12


def test_init_single_neuron_layer():
    net = random_network(RngStream(2), [3, 2, 1], [1, 4], "tanh")
    X = RngStream(3).gauss((5, 3))
    st = init_global(GlobalProblem.build(net, 1, X))
    assert st.A.tolist() == [1.0] and st.loss <= 1e-28


def test_init_matches_enumeration(depth2):
    net, X, problem = depth2
    losses = []
    for i in range(problem.N):
        e = np.zeros(problem.N)
        e[i] = 1.0
        losses.append(problem.loss(e))
    assert int(np.argmax(init_global(problem).A)) == int(np.argmin(losses))


def test_first_exact_step_replaces_layer(depth2):
    _, _, problem = depth2
    st0 = GlobalState(np.full(problem.N, 1.0 / problem.N), 0.0, 0)
    nxt = step_exact(problem, st0)
    assert nxt.support_size == 1
    assert nxt.loss == pytest.approx(problem.loss(nxt.A), rel=1e-12)


def test_step_exact_matches_naive_forward(depth2):
    net, X, problem = depth2
    state = random_state(problem, RngStream(4))
    gamma = 1.0 / (state.k + 1)
    naive = naive_candidate_losses(net, 1, X, problem.target, state.A, gamma)
    nxt = step_exact(problem, state)
    assert nxt.trace[-1].chosen_index == int(np.argmin(naive))
    assert nxt.loss == pytest.approx(min(naive), rel=1e-12)


def test_global_oracle_suite():
    res = global_oracle(nets=10, seed=3)
    assert res.passed, res.line()


def test_zero_residual_gives_zero_coefficients():
    net = random_network(RngStream(5), [3, 2, 2], [5, 4], "tanh")
    X = RngStream(6).gauss((7, 3))
    problem = GlobalProblem.build(net, 1, X)
    A = np.full(5, 0.2)
    c = taylor_coeffs(problem, GlobalState(A, problem.loss(A), 3))
    assert np.max(np.abs(c.r)) <= 1e-14 and np.max(np.abs(c.gr)) <= 1e-14


def test_identity_tail_gr_is_minus_two_q():
    _, _, fs, problem = identity_tail_problem(RngStream(7), 15, 8, 3)
    ls = run_local(fs, StopRule(max_iters=5), step="fixed")
    gr = taylor_coeffs(problem, GlobalState(ls.A, problem.loss(ls.A), ls.k)).gr
    q = np.array([s.q for s in score_all(fs, ls)])
    scale = np.max(np.abs(q))
    assert np.max(np.abs(gr + 2 * q)) <= 1e-10 * scale


def test_taylor_matches_finite_differences():
    res = taylor_fd(nets=10, seed=4)
    assert res.passed, res.line()


def test_gr_differences_are_exact(depth2):
    _, _, problem = depth2
    c = taylor_coeffs(problem, random_state(problem, RngStream(8)))
    i, j = 1, 5
    assert abs((c.gr[i] - c.gr[j]) - 2 * (c.r[i] - c.r[j])) <= 1e-15 * max(1.0, np.abs(c.r).max())


def test_taylor_first_order_accuracy(depth2):
    _, _, problem = depth2
    state = random_state(problem, RngStream(9))
    c = taylor_coeffs(problem, state)
    U = problem.layer_output(state.A)
    for i in range(problem.N):
        rem = []
        for gamma in (1e-2, 1e-3):
            D = problem.output_loss((1 - gamma) * U + gamma * problem.S[:, i, :], count=False)
            rem.append(abs(D - state.loss - gamma * c.gr[i]) / gamma ** 2)
        assert rem[1] <= 2 * rem[0] + 1e-6


def test_top_m_equal_to_N_matches_exact(depth2):
    _, _, problem = depth2
    a = b = random_state(problem, RngStream(10))
    for _ in range(10):
        a, b = step_exact(problem, a), step_taylor(problem, b, top_m=problem.N)
        assert a.trace[-1].chosen_index == b.trace[-1].chosen_index
        np.testing.assert_array_equal(a.A, b.A)


def test_top_m_must_be_positive(depth2):
    _, _, problem = depth2
    with pytest.raises(ValueError):
        step_taylor(problem, random_state(problem, RngStream(1)), top_m=0)


def test_identity_tail_large_k_ranking():
    _, _, _, problem = identity_tail_problem(RngStream(11), 20, 4, 2)
    state = run_global(problem, StopRule(max_iters=400), k_tilde=10_000)
    state = GlobalState(state.A, state.loss, 10_000)
    c = taylor_coeffs(problem, state)
    gamma = 1.0 / (state.k + 1)
    U = problem.layer_output(state.A)
    exact = [problem.output_loss((1 - gamma) * U + gamma * problem.S[:, i, :], count=False)
             for i in range(problem.N)]
    assert list(np.argsort(c.gr, kind="stable")[:5]) == list(np.argsort(exact, kind="stable")[:5])


def test_run_global_eps_above_initial_loss(depth2):
    _, _, problem = depth2
    st = run_global(problem, StopRule(loss_eps=1e9))
    assert st.status == "eps" and st.support_size == 1 and st.k == 0


def test_identity_tail_trace_matches_local_fixed_step():
    res = identity_tail_agreement(instances=10, steps=30, seed=2)
    assert res.passed, res.line()
    _, _, fs, problem = identity_tail_problem(RngStream(12), 18, 5, 2)
    lt = run_local(fs, StopRule(max_iters=60), step="fixed").trace
    gt = run_global(problem, StopRule(max_iters=60), k_tilde=1000).trace
    assert len(lt) == len(gt)
    for a, b in zip(lt, gt):
        assert a.chosen_index == b.chosen_index and abs(a.loss - b.loss) <= 1e-10


def test_near_linear_tail_rate():
    # small tail weights keep tanh in its linear regime
    slopes = []
    for t in range(7):
        rng = RngStream(t, "near-linear")
        head = Layer(rng.gauss((40, 4, 4)), rng.gauss(40), "tanh")
        tail = Layer(0.1 * rng.gauss((6, 4, 2)), rng.gauss(6), "tanh")
        net = Network((head, tail))
        problem = GlobalProblem.build(net, 1, rng.gauss((1, 4)))
        seen = []
        run_global(problem, StopRule(max_iters=100), k_tilde=1000, on_step=seen.append)
        slopes.append(loglog_slope(*zip(*[(s.k, s.loss) for s in seen if s.k >= 10])))
    assert float(np.median(slopes)) <= -1.5


def test_pass_accounting(depth2):
    _, _, problem = depth2
    N = problem.N
    final = run_global(problem, StopRule(max_iters=12), k_tilde=4, top_m=3)
    passes = [row.tail_pass_count for row in final.trace]
    assert passes[0] == N
    deltas = np.diff(passes)
    for row, delta in zip(final.trace[1:], deltas):
        assert delta == (N if row.mode == "exact" else 2 + 3)
    assert [r.mode for r in final.trace[1:]] == ["exact"] * 5 + ["taylor"] * 7


def test_simplex_and_sparsity_invariants(depth2):
    _, _, problem = depth2
    seen = []
    run_global(problem, StopRule(max_iters=40), k_tilde=5, top_m=2, on_step=seen.append)
    for s in seen:
        assert abs(s.A.sum() - 1) <= 1e-12 and s.A.min() >= 0
        assert s.support_size <= s.k + 1
