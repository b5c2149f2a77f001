"""Layer-wise pruning: run both imitation methods on each layer and keep the better.

Layers are pruned input to output. Layer ``l`` is pruned inside the network
whose first ``l - 1`` layers are already replaced, and its discrepancy is
measured against that partially pruned network, so the stage losses chain
into a bound on the total discrepancy by the triangle inequality.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import build_features, global_loss, local_loss, push_dataset
from .global_imitation import GlobalProblem, GlobalState, run_global
from .local_imitation import DEFAULT_REL_EPS, GreedyState, StopRule, init_local, run_local
from .model import Network, PrunedLayer

log = logging.getLogger(__name__)

TRIANGLE_SLACK = 1e-8


class LayerPruneError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"pruning layer {index} failed: {cause}")
        self.index = index
        self.cause = cause


@dataclass
class LayerPruneResult:
    index: int
    method: str
    A: np.ndarray
    support: int
    final_global_loss: float
    local_loss: float
    eps: float
    local: GreedyState
    global_: GlobalState
    local_global_loss: float
    global_global_loss: float

    @property
    def converged(self) -> bool:
        return self.final_global_loss <= self.eps


def choose_method(local_support: int, local_loss_: float, global_support: int,
                  global_loss_: float) -> str:
    """Fewer neurons wins; then smaller discrepancy; then local."""
    if local_support != global_support:
        return "local" if local_support < global_support else "global"
    if global_loss_ < local_loss_:
        return "global"
    return "local"


def prune_layer(net: Network, index: int, X, eps: float | None = None, *,
                max_iters: int | None = None, k_tilde: int = 25, top_m: int = 5,
                max_support: int | None = None) -> LayerPruneResult:
    """Prune one layer with local and global imitation under the same criterion.

    Both runs stop once the end-to-end discrepancy to ``net`` drops to ``eps``
    (or before their support would exceed ``max_support``). ``eps=None`` uses
    ``1e-3`` times the discrepancy of the single best neuron chosen by local
    initialization.
    """
    layer = net.layers[index - 1]
    if isinstance(layer, PrunedLayer):
        raise ValueError(f"layer {index} is already pruned")
    X = np.asarray(X, dtype=np.float64)
    fs = build_features(layer, push_dataset(net, index, X))
    problem = GlobalProblem.build(net, index, X)
    if eps is None:
        eps = DEFAULT_REL_EPS * problem.loss(init_local(fs).A)
    budget = max_iters if max_iters is not None else 10 * layer.N
    stop = StopRule(loss_eps=eps, max_support=max_support, max_iters=budget)

    local_state = run_local(fs, stop, monitor=lambda st: problem.loss(st.A))
    local_g = problem.loss(local_state.A)
    global_state = run_global(problem, stop, k_tilde=k_tilde, top_m=top_m)
    global_g = problem.loss(global_state.A)

    method = choose_method(local_state.support_size, local_g, global_state.support_size, global_g)
    A = local_state.A if method == "local" else global_state.A
    final = local_g if method == "local" else global_g
    return LayerPruneResult(index, method, A.copy(), int(np.count_nonzero(A)), final,
                            local_loss(fs, A), eps, local_state, global_state, local_g, global_g)


@dataclass
class PruneReport:
    layers: list = field(default_factory=list)   # LayerPruneResult per layer
    stage_losses: list = field(default_factory=list)  # D[f_[l], f_[l-1]]
    total_loss: float = 0.0                       # D[f_[L], F]

    @property
    def triangle_rhs(self) -> float:
        return float(sum(np.sqrt(d) for d in self.stage_losses))

    @property
    def triangle_ok(self) -> bool:
        return np.sqrt(self.total_loss) <= self.triangle_rhs + TRIANGLE_SLACK

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.layers)

    def rows(self):
        for r, stage in zip(self.layers, self.stage_losses):
            yield {"layer": r.index, "method": r.method, "support": r.support,
                   "local_loss": r.local_loss, "global_loss": stage,
                   "converged": int(r.converged)}


def prune_network(net: Network, X, eps: float | Sequence[float | None] | None = None, *,
                  max_iters: int | None = None, k_tilde: int = 25, top_m: int = 5,
                  max_support: int | None = None):
    """Sweep layers ``1..L``; returns ``(pruned_network, PruneReport)``."""
    X = np.asarray(X, dtype=np.float64)
    if eps is None or np.isscalar(eps):
        eps_list = [eps] * net.depth
    else:
        eps_list = list(eps)
        if len(eps_list) != net.depth:
            raise ValueError(f"need one eps per layer ({net.depth}), got {len(eps_list)}")
    report = PruneReport()
    current = net
    for index in range(1, net.depth + 1):
        try:
            result = prune_layer(current, index, X, eps_list[index - 1], max_iters=max_iters,
                                 k_tilde=k_tilde, top_m=top_m, max_support=max_support)
        except Exception as exc:  # surfaced with the layer index attached
            raise LayerPruneError(index, exc) from exc
        pruned = current.replace(index, PrunedLayer(current.layers[index - 1], result.A))
        report.stage_losses.append(global_loss(pruned, current, X))
        report.layers.append(result)
        log.info("layer %d: %s, support %d, D=%.3e%s", index, result.method, result.support,
                 result.final_global_loss, "" if result.converged else " (not converged)")
        current = pruned
    report.total_loss = global_loss(current, net, X)
    if not report.triangle_ok:
        raise AssertionError(f"triangle bookkeeping violated: sqrt({report.total_loss}) > "
                             f"{report.triangle_rhs}")
    return current, report
