"""Greedy fixed-step descent on the end-to-end discrepancy.

The layer being pruned sits between a head ``H1`` and a tail ``H2``. Neuron
outputs on the pushed data are computed once; every candidate evaluation
then only runs the tail (one "tail pass"). Steps use ``gamma_k = 1/(k+1)``.

The Taylor fast path ranks candidates by the directional derivative

    gr_i = dD/dgamma at 0 = 2 (r_i - sum_j a_j r_j),
    r_i  = E[ (H2(u) - F(x))^T J_H2(u) sigma_i(z) ],   u = f_A(z),

obtained from one forward and one reverse sweep of the tail, and evaluates
only the ``top_m`` most promising candidates exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .local_imitation import StopRule
from .model import Network, forward, mix, split_at, tail_pullback


@dataclass(eq=False)
class GlobalProblem:
    """Cached quantities for pruning layer ``index`` of ``net``.

    ``target`` holds the reference outputs ``F(x)``; by default the network
    itself, which during a layer-wise sweep is the partially pruned model.
    """
    tail: Network
    S: np.ndarray       # (m, N, d) neuron outputs on the pushed points
    Z: np.ndarray       # pushed points (input of the pruned layer)
    target: np.ndarray  # (m, out_dim)
    index: int
    passes: int = 0

    @classmethod
    def build(cls, net: Network, index: int, X, reference: Network | None = None) -> "GlobalProblem":
        X = np.asarray(X, dtype=np.float64)
        head, layer, tail = split_at(net, index)
        Z = forward(head, X)
        target = forward(reference if reference is not None else net, X)
        return cls(tail, layer.neuron_outputs(Z), Z, target, index)

    @property
    def N(self) -> int:
        return self.S.shape[1]

    @property
    def m(self) -> int:
        return self.S.shape[0]

    def layer_output(self, A) -> np.ndarray:
        return mix(np.asarray(A, dtype=np.float64), self.S)

    def output_loss(self, U: np.ndarray, count: bool = True) -> float:
        if count:
            self.passes += 1
        diff = forward(self.tail, U) - self.target
        return float(np.mean(np.sum(diff * diff, axis=1)))

    def loss(self, A, count: bool = False) -> float:
        return self.output_loss(self.layer_output(A), count)


@dataclass(frozen=True)
class GlobalTraceRow:
    k: int
    loss: float
    support: int
    chosen_index: int
    mode: str
    tail_pass_count: int


@dataclass
class GlobalState:
    A: np.ndarray
    loss: float
    k: int = 0
    trace: list = field(default_factory=list)
    mode: str = "exact"
    status: str = "running"

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.A))

    @property
    def flagged(self) -> bool:
        return self.status in ("budget", "stalled")


@dataclass(frozen=True)
class TaylorCoeffs:
    r: np.ndarray
    gr: np.ndarray


def _argmin_first(values) -> int:
    return int(np.argmin(np.asarray(values)))


def init_global(problem: GlobalProblem) -> GlobalState:
    """Best single neuron measured through the whole tail."""
    losses = [problem.output_loss(problem.S[:, i, :]) for i in range(problem.N)]
    i = _argmin_first(losses)
    A = np.zeros(problem.N)
    A[i] = 1.0
    row = GlobalTraceRow(0, losses[i], 1, i, "exact", problem.passes)
    return GlobalState(A, losses[i], 0, [row], "exact")


def _candidate_losses(problem: GlobalProblem, state: GlobalState, candidates) -> list[float]:
    gamma = 1.0 / (state.k + 1)
    U = problem.layer_output(state.A)
    return [problem.output_loss((1.0 - gamma) * U + gamma * problem.S[:, i, :])
            for i in candidates]


def _apply(problem: GlobalProblem, state: GlobalState, i: int, loss: float, mode: str) -> GlobalState:
    gamma = 1.0 / (state.k + 1)
    A = (1.0 - gamma) * state.A
    A[i] += gamma
    A /= A.sum()
    k = state.k + 1
    row = GlobalTraceRow(k, loss, int(np.count_nonzero(A)), i, mode, problem.passes)
    return GlobalState(A, loss, k, state.trace + [row], mode, state.status)


def step_exact(problem: GlobalProblem, state: GlobalState) -> GlobalState:
    """Evaluate every candidate blend exactly (``N`` tail passes)."""
    losses = _candidate_losses(problem, state, range(problem.N))
    i = _argmin_first(losses)
    return _apply(problem, state, i, losses[i], "exact")


def _tail_residual_pullback(problem: GlobalProblem, U: np.ndarray):
    problem.passes += 1
    R = forward(problem.tail, U) - problem.target
    problem.passes += 1
    return R, tail_pullback(problem.tail, U, R)


def taylor_coeffs(problem: GlobalProblem, state: GlobalState) -> TaylorCoeffs:
    U = problem.layer_output(state.A)
    _, P = _tail_residual_pullback(problem, U)
    r = np.einsum("md,mnd->n", P, problem.S) / problem.m
    gr = 2.0 * (r - state.A @ r)
    return TaylorCoeffs(r, gr)


def step_taylor(problem: GlobalProblem, state: GlobalState, top_m: int = 5) -> GlobalState:
    """Shortlist the ``top_m`` steepest candidates by ``gr`` and pick the best exactly."""
    if top_m < 1:
        raise ValueError("top_m must be at least 1")
    coeffs = taylor_coeffs(problem, state)
    shortlist = np.sort(np.argsort(coeffs.gr, kind="stable")[:top_m])
    losses = _candidate_losses(problem, state, shortlist)
    j = _argmin_first(losses)
    return _apply(problem, state, int(shortlist[j]), losses[j], "taylor")


def run_global(problem: GlobalProblem, stop: StopRule | None = None, k_tilde: int = 25,
               top_m: int = 5, on_step=None) -> GlobalState:
    """Exact steps while ``k <= k_tilde``, Taylor-shortlisted steps afterwards."""
    stop = stop or StopRule.default()
    state = init_global(problem)
    if on_step:
        on_step(state)
    threshold = stop.threshold(state.loss)
    while True:
        if threshold is not None and state.loss <= threshold:
            status = "eps"
            break
        if state.loss <= 0:
            status = "exact"
            break
        if state.k >= stop.max_iters:
            status = "budget"
            break
        if state.k <= k_tilde or top_m >= problem.N:
            nxt = step_exact(problem, state)
        else:
            nxt = step_taylor(problem, state, top_m)
        if stop.max_support is not None and nxt.support_size > stop.max_support:
            status = "support"
            break
        state = nxt
        if on_step:
            on_step(state)
    return replace(state, status=status)
