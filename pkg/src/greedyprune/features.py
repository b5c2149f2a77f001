"""Per-neuron feature vectors and the discrepancy losses built on them.

Feature vectors are scaled by ``1/sqrt(m)`` so that squared Euclidean norms
in feature space are exactly dataset averages: ``||h_A - h_bar||^2`` is the
local discrepancy of the pruned layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .model import Network, check_simplex, forward, split_at


@dataclass(frozen=True, eq=False)
class PushedDataset:
    points: np.ndarray  # (m, input_dim of layer `index`)
    index: int

    @property
    def m(self) -> int:
        return self.points.shape[0]


def push_dataset(net: Network, index: int, X) -> PushedDataset:
    """Data pushed through the first ``index - 1`` layers."""
    head, _, _ = split_at(net, index)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("need a non-empty (m, dim) batch of points")
    return PushedDataset(forward(head, X), index)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    h: np.ndarray  # (N, m*d)
    h_bar: np.ndarray
    d: int
    m: int

    @classmethod
    def from_array(cls, h, d: int = 1) -> "FeatureSet":
        """Wrap raw feature rows; ``m`` is inferred from the row length."""
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        return cls(h, h.mean(axis=0), d, h.shape[1] // d)

    @property
    def N(self) -> int:
        return self.h.shape[0]

    def combine(self, A) -> np.ndarray:
        return np.asarray(A, dtype=np.float64) @ self.h


def build_features(layer, pushed: PushedDataset) -> FeatureSet:
    S = layer.neuron_outputs(pushed.points)  # (m, N, d)
    m, N, d = S.shape
    h = S.transpose(1, 0, 2).reshape(N, m * d) / np.sqrt(m)
    return FeatureSet(np.ascontiguousarray(h), h.mean(axis=0), d, m)


def local_loss(fs: FeatureSet, A) -> float:
    A = check_simplex(A, fs.N, tol=1e-9)
    r = A @ fs.h - fs.h_bar
    return float(r @ r)


def global_loss(pruned: Network, reference: Network, X) -> float:
    """``E_x ||f(x) - F(x)||^2`` over the rows of ``X``."""
    diff = forward(pruned, X) - forward(reference, X)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def hull_diameter(fs: FeatureSet) -> float:
    if fs.N < 2:
        return 0.0
    return float(pdist(fs.h).max())
