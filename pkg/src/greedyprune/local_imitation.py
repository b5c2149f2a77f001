"""Greedy bi-directional simplex descent on the local discrepancy.

Each step moves the combination ``h_A`` toward one neuron feature ``h_i``:
``A <- (1 - gamma) A + gamma e_i``. For a given neuron the loss is the
quadratic ``V(gamma) = g gamma^2 - 2 q gamma + loss`` with

    q = <h_bar - h_A, h_i - h_A>,   g = ||h_i - h_A||^2,

so the best step is ``q / g`` clamped to the allowed interval: ``[0, 1]`` for
a neuron outside the support and ``[-a_i / (1 - a_i), 1]`` for one inside it
(the lower end removes the neuron). Everything is computed from the cached
feature matrix; no network evaluation happens here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .features import FeatureSet

log = logging.getLogger(__name__)

G_MIN = 1e-18
REMOVAL_SNAP = 1e-12
RESYNC_EVERY = 64
DESCENT_FLOOR = 1e-14
DEFAULT_REL_EPS = 1e-3


class NumericalDegeneracy(RuntimeError):
    """No step decreases the loss although it is still above the floor."""


class ScoringInvariantError(AssertionError):
    """A candidate discarded by the fast scoring rule would have won."""


@dataclass(frozen=True)
class TraceRow:
    k: int
    loss: float
    support: int
    chosen_index: int
    gamma: float


@dataclass
class GreedyState:
    A: np.ndarray
    hA: np.ndarray
    loss: float
    k: int = 0
    trace: list = field(default_factory=list)
    status: str = "running"

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.A))

    @property
    def flagged(self) -> bool:
        """True when the run stopped without meeting its criterion."""
        return self.status in ("budget", "stalled")


@dataclass(frozen=True)
class NeuronScore:
    q: float
    g: float
    tilde_gamma: float
    clamped_gamma: float
    score: float


@dataclass(frozen=True)
class StopRule:
    """When to end a greedy run.

    ``loss_eps`` is absolute, ``rel_eps`` is relative to the initial loss;
    ``max_support`` ends the run before a step that would grow the support
    past it. ``max_iters`` always applies.
    """
    loss_eps: float | None = None
    rel_eps: float | None = None
    max_support: int | None = None
    max_iters: int = 1000

    @classmethod
    def default(cls) -> "StopRule":
        return cls(rel_eps=DEFAULT_REL_EPS)

    def threshold(self, initial: float) -> float | None:
        ts = [t for t in (self.loss_eps,
                          None if self.rel_eps is None else self.rel_eps * initial) if t is not None]
        return max(ts) if ts else None


def init_local(fs: FeatureSet) -> GreedyState:
    """Start from the single neuron closest to the target (lowest index on ties)."""
    dist = np.einsum("ij,ij->i", fs.h - fs.h_bar, fs.h - fs.h_bar)
    i = int(np.argmin(dist))
    A = np.zeros(fs.N)
    A[i] = 1.0
    hA = fs.h[i].copy()
    r = hA - fs.h_bar
    loss = float(r @ r)
    return GreedyState(A, hA, loss, 0, [TraceRow(0, loss, 1, i, 1.0)])


def _score_arrays(fs: FeatureSet, state: GreedyState):
    D = fs.h - state.hA
    q = D @ (fs.h_bar - state.hA)
    g = np.einsum("ij,ij->i", D, D)
    valid = g > G_MIN
    tg = np.divide(q, g, out=np.zeros_like(q), where=valid)

    a = state.A
    selected = a > 0
    lower = np.zeros_like(a)
    inner = selected & (a < 1)
    lower[inner] = -a[inner] / (1.0 - a[inner])
    lower[selected & (a >= 1)] = -np.inf

    clamped = np.clip(tg, lower, 1.0)
    interior = valid & (tg < 1) & (tg >= lower) & (selected | (tg > 0))
    removal = valid & selected & (tg < lower)
    score = np.zeros_like(q)
    score[interior] = q[interior] ** 2 / g[interior]
    lo = lower[removal]
    # loss decrease at the removal endpoint: loss - V(lo)
    score[removal] = 2.0 * lo * q[removal] - lo * lo * g[removal]
    # gamma~ >= 1 is never optimal; score 0 (checked in step_linesearch)
    skipped = valid & (tg >= 1)
    return q, g, tg, clamped, score, skipped, lower


def score_all(fs: FeatureSet, state: GreedyState) -> list[NeuronScore]:
    q, g, tg, clamped, score, _, _ = _score_arrays(fs, state)
    return [NeuronScore(float(q[i]), float(g[i]), float(tg[i]), float(clamped[i]), float(score[i]))
            for i in range(fs.N)]


def _advance(fs: FeatureSet, state: GreedyState, A: np.ndarray, hA: np.ndarray,
             i: int, gamma: float) -> GreedyState:
    A = np.where(A < 0, 0.0, A)
    A = A / A.sum()
    k = state.k + 1
    if k % RESYNC_EVERY == 0:
        hA = A @ fs.h
    r = hA - fs.h_bar
    loss = float(r @ r)
    row = TraceRow(k, loss, int(np.count_nonzero(A)), i, float(gamma))
    return GreedyState(A, hA, loss, k, state.trace + [row], state.status)


def step_linesearch(fs: FeatureSet, state: GreedyState) -> GreedyState:
    """One line-searched step on the best-scoring neuron.

    Raises :class:`NumericalDegeneracy` when no neuron has a positive score or
    the loss fails to decrease while above the floor, and
    :class:`ScoringInvariantError` if a neuron skipped for ``q/g >= 1`` would
    have decreased the loss more than the chosen one.
    """
    if state.loss <= 0:
        return state
    q, g, tg, clamped, score, skipped, lower = _score_arrays(fs, state)
    i = int(np.argmax(score))
    best = float(score[i])
    if not best > 0:
        raise NumericalDegeneracy(f"no positive score at k={state.k}, loss={state.loss!r}")
    if np.any(skipped):
        at_one = 2.0 * q[skipped] - g[skipped]
        if at_one.max() > best + 1e-12 * max(state.loss, 1e-300) + 1e-300:
            raise ScoringInvariantError(
                f"k={state.k}: a full step to a q/g>=1 neuron beats the chosen step "
                f"({at_one.max()!r} > {best!r})")

    gamma = float(clamped[i])
    removal = state.A[i] > 0 and gamma <= lower[i] + REMOVAL_SNAP
    A = (1.0 - gamma) * state.A
    A[i] += gamma
    if removal:
        A[i] = 0.0
    hA = (1.0 - gamma) * state.hA + gamma * fs.h[i]
    new = _advance(fs, state, A, hA, i, gamma)
    if state.loss > DESCENT_FLOOR and not new.loss < state.loss:
        raise NumericalDegeneracy(
            f"loss did not decrease at k={state.k}: {state.loss!r} -> {new.loss!r}")
    return new


def step_fixed(fs: FeatureSet, state: GreedyState) -> GreedyState:
    """Herding-style step ``A <- (k A + e_i) / (k + 1)`` on the best neuron."""
    k = state.k
    cand = (k * state.hA + fs.h) / (k + 1)
    diff = cand - fs.h_bar
    i = int(np.argmin(np.einsum("ij,ij->i", diff, diff)))
    A = k * state.A
    A[i] += 1.0
    A /= k + 1
    return _advance(fs, state, A, cand[i].copy(), i, 1.0 / (k + 1))


STEPS = {"linesearch": step_linesearch, "fixed": step_fixed}


def run_local(fs: FeatureSet, stop: StopRule | None = None, step: str = "linesearch",
              monitor: Callable[[GreedyState], float] | None = None,
              on_step: Callable[[GreedyState], None] | None = None) -> GreedyState:
    """Iterate from :func:`init_local` until ``stop`` is met.

    ``monitor`` replaces the local loss as the quantity compared with the
    loss threshold (the layer-wise pruner passes the end-to-end discrepancy).
    ``on_step`` sees the initial state and every accepted state.
    The returned state's ``status`` is one of ``eps``, ``support``, ``exact``,
    ``budget`` or ``stalled``; the last two mark a partial result.
    """
    stop = stop or StopRule.default()
    advance = STEPS[step]
    state = init_local(fs)
    if on_step:
        on_step(state)
    value = monitor(state) if monitor else state.loss
    threshold = stop.threshold(value)
    while True:
        if threshold is not None and value <= threshold:
            status = "eps"
            break
        if state.loss <= 0:
            status = "exact"
            break
        if state.k >= stop.max_iters:
            status = "budget"
            break
        try:
            nxt = advance(fs, state)
        except NumericalDegeneracy as exc:
            log.debug("local run stalled: %s", exc)
            status = "stalled"
            break
        if stop.max_support is not None and nxt.support_size > stop.max_support:
            status = "support"
            break
        state = nxt
        if on_step:
            on_step(state)
        value = monitor(state) if monitor else state.loss
    return replace(state, status=status)


def brute_force_step(fs: FeatureSet, state: GreedyState):
    """Exhaustive reference for one line-search step: ``(index, gamma, loss)``.

    For every neuron the loss along the step is sampled directly at
    ``gamma in {-1, 0, 1}``, the interpolating parabola gives the unconstrained
    minimizer, which is clamped to the neuron's interval; the clamped point and
    both interval ends are then evaluated directly. As in the scoring rule, a
    full step (``gamma = 1``) only wins when strictly better than every
    partial step; ties go to the lowest index.
    """
    def loss_at(i, gamma):
        r = (1.0 - gamma) * state.hA + gamma * fs.h[i] - fs.h_bar
        return float(r @ r)

    best = (None, 0.0, np.inf)
    best_full = (None, 1.0, np.inf)
    for i in range(fs.N):
        a = state.A[i]
        if a >= 1:
            lo = 0.0  # moving toward itself changes nothing
        elif a > 0:
            lo = -a / (1.0 - a)
        else:
            lo = 0.0
        v_m, v_0, v_p = loss_at(i, -1.0), loss_at(i, 0.0), loss_at(i, 1.0)
        curv = 0.5 * (v_p + v_m) - v_0
        slope = 0.5 * (v_p - v_m)
        candidates = [lo, 1.0]
        if curv > 0:
            candidates.append(min(max(-slope / (2.0 * curv), lo), 1.0))
        for gamma in candidates:
            val = loss_at(i, gamma)
            if gamma == 1.0:
                if val < best_full[2]:
                    best_full = (i, gamma, val)
            elif val < best[2]:
                best = (i, gamma, val)
    if best_full[2] < best[2] - 1e-12 * max(best[2], 1e-300):
        return best_full
    return best
