"""Oracle suites: brute-force and finite-difference cross-checks of the solvers.

Each suite returns a :class:`CheckResult` with the worst observed error, the
tolerance it was held to, and how many cases were examined. The suites are
seeded and deterministic; ``run_suites`` backs the ``oracle-check`` command.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .features import FeatureSet, build_features, local_loss, push_dataset
from .global_imitation import (GlobalProblem, GlobalState, init_global, run_global, step_exact,
                               taylor_coeffs)
from .local_imitation import (NumericalDegeneracy, StopRule, brute_force_step, init_local,
                              run_local, step_fixed, step_linesearch, _score_arrays)
from .model import Network, PrunedLayer, forward, loss_and_grad, random_network
from .numeric import RngStream

SIMPLEX_TOL = 1e-12
DESCENT_FLOOR = 1e-14


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    cases: int
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}  {self.name:<22} worst={self.worst:.3e} tol={self.tolerance:.1e} "
                f"cases={self.cases} ({self.seconds:.1f}s){'  ' + self.detail if self.detail else ''}")


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        return CheckResult(res.name, res.passed, res.worst, res.tolerance, res.cases,
                           time.perf_counter() - t0, res.detail)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def random_features(rng: RngStream, N: int, m: int, d: int) -> FeatureSet:
    h = rng.gauss((N, m * d)) / np.sqrt(m)
    return FeatureSet.from_array(h, d)


def _instance_dims(rng: RngStream, max_N=50, max_m=64, max_d=8):
    N, m, d = (int(v) for v in rng.integers([2, 1, 1], [max_N + 1, max_m + 1, max_d + 1]))
    return N, m, d


@_timed
def local_oracle(instances: int = 200, steps: int = 6, seed: int = 0, tol: float = 1e-8):
    """Line-search step vs exhaustive per-neuron search, several steps per instance."""
    root = RngStream(seed, "local-oracle")
    worst, cases, bad = 0.0, 0, []
    for t in range(instances):
        rng = root.child(t)
        fs = random_features(rng, *_instance_dims(rng))
        state = init_local(fs)
        for _ in range(steps):
            if state.loss <= DESCENT_FLOOR:
                break
            _, _, ref = brute_force_step(fs, state)
            try:
                nxt = step_linesearch(fs, state)
                got = nxt.loss
            except NumericalDegeneracy:
                nxt, got = None, state.loss
            err = abs(got - min(ref, state.loss))
            cases += 1
            worst = max(worst, err)
            if err > tol:
                bad.append(t)
            if nxt is None:
                break
            state = nxt
    detail = f"mismatching instances {sorted(set(bad))[:5]}" if bad else ""
    return CheckResult("local_oracle", worst <= tol, worst, tol, cases, detail=detail)


def naive_candidate_losses(net: Network, index: int, X, target, A, gamma):
    """Full forward pass of the whole network for every blended candidate."""
    layer = net.layers[index - 1]
    out = []
    for i in range(layer.N):
        B = (1.0 - gamma) * np.asarray(A, dtype=np.float64)
        B[i] += gamma
        B /= B.sum()
        diff = forward(net.replace(index, PrunedLayer(layer, B)), X) - target
        out.append(float(np.mean(np.sum(diff * diff, axis=1))))
    return out


def _random_depth2(rng: RngStream, activation: str):
    dims = [int(v) for v in rng.integers([2, 2, 1], [9, 7, 4])]
    widths = [int(v) for v in rng.integers([3, 2], [21, 9])]
    net = random_network(rng.child("net"), dims, widths, activation)
    X = rng.gauss((int(rng.integers(5, 33)), dims[0]))
    return net, X


@_timed
def global_oracle(nets: int = 50, steps: int = 4, seed: int = 0, rel_tol: float = 1e-12):
    """``step_exact`` against whole-network forward passes of every candidate."""
    root = RngStream(seed, "global-oracle")
    worst, cases, bad = 0.0, 0, []
    for t in range(nets):
        rng = root.child(t)
        net, X = _random_depth2(rng, ("relu", "tanh")[t % 2])
        problem = GlobalProblem.build(net, 1, X)
        state = init_global(problem)
        # losses can hit roundoff (~1e-33) at the uniform mix; floor by the output scale
        scale = max(float(np.mean(np.sum(problem.target ** 2, axis=1))), 1e-300)
        for _ in range(steps):
            naive = naive_candidate_losses(net, 1, X, problem.target, state.A, 1.0 / (state.k + 1))
            i_ref = int(np.argmin(naive))
            nxt = step_exact(problem, state)
            i_got = nxt.trace[-1].chosen_index
            err = abs(nxt.loss - naive[i_ref]) / max(abs(naive[i_ref]), scale)
            cases += 1
            if i_got != i_ref and abs(naive[i_got] - naive[i_ref]) > rel_tol * max(abs(naive[i_ref]), scale):
                err = np.inf
            worst = max(worst, err)
            if err > rel_tol:
                bad.append(t)
            state = nxt
    detail = f"mismatching nets {sorted(set(bad))[:5]}" if bad else ""
    return CheckResult("global_oracle", worst <= rel_tol, worst, rel_tol, cases, detail=detail)


@_timed
def taylor_fd(nets: int = 50, seed: int = 0, tol: float = 1e-4, h: float = 1e-5):
    """``gr_i`` against central differences of ``D((1-g)A + g e_i)`` at ``g = 0``.

    ``A`` is a random sparse simplex point rather than a greedy iterate, since
    on tiny layers the greedy run can land on the exact optimum where every
    coefficient vanishes. Smooth (tanh) networks avoid kinks inside the
    difference stencil. The error of each coefficient is relative to
    ``max(|gr_i|, 1e-3 max_j |gr_j|)`` so that coefficients near zero are not
    judged by a vanishing denominator.
    """
    root = RngStream(seed, "taylor-fd")
    worst, cases = 0.0, 0
    for t in range(nets):
        rng = root.child(t)
        net, X = _random_depth2(rng, "tanh")
        problem = GlobalProblem.build(net, 1, X)
        w = rng.uniform(problem.N) * (rng.uniform(problem.N) < 0.6)
        w[int(rng.integers(0, problem.N))] += 0.1
        state = GlobalState(w / w.sum(), 0.0)
        gr = taylor_coeffs(problem, state).gr
        fd = np.empty_like(gr)
        for i in range(problem.N):
            e = np.zeros(problem.N)
            e[i] = 1.0
            plus = problem.loss((1 - h) * state.A + h * e)
            minus = problem.loss((1 + h) * state.A - h * e)
            fd[i] = (plus - minus) / (2 * h)
        scale = np.maximum(np.abs(gr), 1e-3 * np.max(np.abs(gr)))
        if np.max(np.abs(gr)) == 0:
            scale = np.ones_like(gr)
        worst = max(worst, float(np.max(np.abs(fd - gr) / scale)))
        cases += problem.N
    return CheckResult("taylor_fd", worst <= tol, worst, tol, cases)


@_timed
def model_gradient_fd(seeds: int = 50, seed: int = 0, tol: float = 1e-5, h: float = 1e-5):
    """Backprop gradients against central differences of the training loss."""
    root = RngStream(seed, "model-fd")
    worst, cases = 0.0, 0
    for t in range(seeds):
        rng = root.child(t)
        net, X = _random_depth2(rng, "tanh")
        Y = rng.gauss((X.shape[0], net.output_dim))
        _, grads = loss_and_grad(net, X, Y)
        k = int(rng.integers(0, net.depth))
        layer = net.layers[k]
        for which in ("inner", "outer"):
            arr = getattr(layer, which)
            flat = int(rng.integers(0, arr.size))
            idx = np.unravel_index(flat, arr.shape)
            vals = []
            for sign in (1, -1):
                pert = arr.copy()
                pert[idx] += sign * h
                new = type(layer)(pert, layer.outer, layer.activation) if which == "inner" \
                    else type(layer)(layer.inner, pert, layer.activation)
                out = forward(net.replace(k + 1, new), X)
                vals.append(float(np.mean(np.sum((out - Y) ** 2, axis=1))))
            fd = (vals[0] - vals[1]) / (2 * h)
            g = grads[k][0 if which == "inner" else 1][idx]
            worst = max(worst, abs(fd - g) / max(abs(g), 1e-4))
            cases += 1
    return CheckResult("model_gradient_fd", worst <= tol, worst, tol, cases)


def _simplex_violation(A) -> float:
    A = np.asarray(A)
    return max(abs(float(A.sum()) - 1.0), float(max(0.0, -A.min())))


@_timed
def invariant_suite(runs: int = 100, seed: int = 0):
    """Simplex, sparsity ``||A(k)||_0 <= k+1`` and strict line-search descent.

    Counts violations over full local line-search, local fixed-step and global
    runs on random instances; the worst value reported is the violation count.
    """
    root = RngStream(seed, "invariants")
    violations, cases = 0, 0

    def audit(states):
        nonlocal violations, cases
        for st in states:
            cases += 1
            if _simplex_violation(st.A) > SIMPLEX_TOL:
                violations += 1
            if np.count_nonzero(st.A) > st.k + 1:
                violations += 1

    for t in range(runs):
        rng = root.child(t)
        fs = random_features(rng, *_instance_dims(rng, max_N=30, max_m=16, max_d=4))
        for step in ("linesearch", "fixed"):
            seen = []
            run_local(fs, StopRule(max_iters=200), step=step, on_step=seen.append)
            audit(seen)
            if step == "linesearch":
                for a, b in zip(seen, seen[1:]):
                    if a.loss > DESCENT_FLOOR and not b.loss < a.loss:
                        violations += 1
        if t % 4 == 0:
            net, X = _random_depth2(rng, ("relu", "tanh")[t % 8 == 0])
            seen = []
            run_global(GlobalProblem.build(net, 1, X), StopRule(max_iters=40), k_tilde=10,
                       top_m=2, on_step=seen.append)
            audit(seen)
    return CheckResult("invariants", violations == 0, float(violations), 0.0, cases)


def well_conditioned_features(rng: RngStream, N: int = 40, dim: int = 4) -> FeatureSet:
    """Gaussian cloud in a low dimension: the mean sits deep inside the hull."""
    return FeatureSet.from_array(rng.gauss((N, dim)), dim)


def loglog_slope(ks, losses) -> float:
    ks = np.asarray(ks, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    keep = losses > 0
    slope, _ = np.polyfit(np.log(ks[keep]), np.log(losses[keep]), 1)
    return float(slope)


def identity_tail_problem(fs_rng: RngStream, N: int, m: int, d: int, in_dim: int = 3,
                          activation: str = "tanh"):
    """One-layer network; pruning its only layer leaves an identity tail."""
    net = random_network(fs_rng.child("net"), [in_dim, d], [N], activation)
    X = fs_rng.gauss((m, in_dim))
    fs = build_features(net.layers[0], push_dataset(net, 1, X))
    return net, X, fs, GlobalProblem.build(net, 1, X)


@_timed
def fixed_step_rates(seeds: int = 20, seed: int = 0, k_range=(10, 100), limit: float = -1.5):
    """Median log-log slope of loss vs ``k`` for fixed-step local and identity-tail global."""
    root = RngStream(seed, "fixed-rates")
    lo, hi = k_range
    local_slopes, global_slopes = [], []
    for t in range(seeds):
        rng = root.child(t)
        fs = well_conditioned_features(rng.child("local"))
        seen = []
        run_local(fs, StopRule(max_iters=hi), step="fixed", on_step=seen.append)
        pts = [(s.k, s.loss) for s in seen if lo <= s.k <= hi]
        local_slopes.append(loglog_slope(*zip(*pts)))

        _, _, _, problem = identity_tail_problem(rng.child("global"), N=40, m=1, d=4,
                                                 in_dim=4, activation="tanh")
        seen = []
        run_global(problem, StopRule(max_iters=hi), k_tilde=hi + 1, on_step=seen.append)
        pts = [(s.k, s.loss) for s in seen if lo <= s.k <= hi]
        global_slopes.append(loglog_slope(*zip(*pts)))
    worst = max(float(np.median(local_slopes)), float(np.median(global_slopes)))
    detail = (f"median slope local={np.median(local_slopes):.2f} "
              f"global={np.median(global_slopes):.2f}")
    return CheckResult("fixed_step_rates", worst <= limit, worst, limit, 2 * seeds, detail=detail)


@_timed
def identity_tail_agreement(instances: int = 30, steps: int = 40, seed: int = 0,
                            tol: float = 1e-10):
    """With an identity tail every global operation must equal its local counterpart.

    Compared: initial neuron and loss, each fixed-step choice and loss, the
    end-to-end loss of arbitrary weights, and ``gr = -2 q``.
    """
    root = RngStream(seed, "identity-tail")
    worst, cases = 0.0, 0
    for t in range(instances):
        rng = root.child(t)
        N, m, d = _instance_dims(rng, max_N=30, max_m=16, max_d=4)
        _, _, fs, problem = identity_tail_problem(rng, N, m, d)
        ls, gs = init_local(fs), init_global(problem)
        for _ in range(steps):
            same = ls.trace[-1].chosen_index == gs.trace[-1].chosen_index
            err = abs(ls.loss - gs.loss) if same else np.inf
            q = _score_arrays(fs, ls)[0]
            gr = taylor_coeffs(problem, gs).gr
            err = max(err, float(np.max(np.abs(gr + 2.0 * q))))
            W = rng.uniform(N)
            W /= W.sum()
            err = max(err, abs(local_loss(fs, W) - problem.loss(W)))
            worst = max(worst, err)
            cases += 1
            ls, gs = step_fixed(fs, ls), step_exact(problem, gs)
    return CheckResult("identity_tail", worst <= tol, worst, tol, cases)


SUITES = {
    "local_oracle": local_oracle,
    "global_oracle": global_oracle,
    "taylor_fd": taylor_fd,
    "model_gradient_fd": model_gradient_fd,
    "invariants": invariant_suite,
    "fixed_step_rates": fixed_step_rates,
    "identity_tail": identity_tail_agreement,
}


def run_suites(seed: int = 0, names=None) -> list[CheckResult]:
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown oracle suite(s): {', '.join(unknown)}")
    return [SUITES[n](seed=seed) for n in names]
