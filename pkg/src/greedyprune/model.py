"""Mean-field networks, their pruned counterparts, and training.

A layer holds ``N`` vector-valued neurons ``sigma(theta_i, z) = a_i * act(W_i^T z)``
with ``W_i`` of shape ``(input_dim, feature_dim)``. A full layer averages its
neurons with weight ``1/N``; a :class:`PrunedLayer` replaces the average by a
convex combination ``A`` on the probability simplex.

All evaluation is batched: points are rows of an ``(m, dim)`` array.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .numeric import ACTIVATIONS, RngStream, activate, activate_grad

FORMAT_NAME = "greedyprune-model"
FORMAT_VERSION = 1
SIMPLEX_TOL = 1e-12


class ShapeError(ValueError):
    pass


class SimplexError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Gradient descent left the finite range or collapsed to a dead network."""

    def __init__(self, step: int, loss: float, reason: str = "non-finite loss"):
        super().__init__(f"training failed at step {step}: {reason} (loss={loss!r})")
        self.step = step
        self.loss = loss
        self.reason = reason


class ModelFormatError(ValueError):
    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


class ModelVersionError(ModelFormatError):
    pass


@dataclass(frozen=True)
class Neuron:
    inner: np.ndarray  # (input_dim, feature_dim)
    outer: float
    activation: str = "relu"


def neuron_apply(neuron: Neuron, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != neuron.inner.shape[0]:
        raise ShapeError(f"neuron expects input dim {neuron.inner.shape[0]}, got {z.shape[-1]}")
    return neuron.outer * activate(neuron.activation, z @ neuron.inner)


def check_simplex(weights, n: int | None = None, tol: float = SIMPLEX_TOL) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or (n is not None and w.size != n):
        raise SimplexError(f"simplex weights must be a vector of length {n}, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise SimplexError("simplex weights contain non-finite values")
    if np.any(w < 0):
        raise SimplexError(f"negative simplex weight {w.min()!r}")
    total = float(np.sum(w))
    if abs(total - 1.0) > tol:
        raise SimplexError(f"simplex weights sum to {total!r}, not 1")
    return w


@dataclass(frozen=True, eq=False)
class Layer:
    inner: np.ndarray  # (N, input_dim, feature_dim)
    outer: np.ndarray  # (N,)
    activation: str = "relu"

    def __post_init__(self):
        inner = np.asarray(self.inner, dtype=np.float64)
        outer = np.asarray(self.outer, dtype=np.float64).reshape(-1)
        if inner.ndim != 3 or inner.shape[0] != outer.size or outer.size < 1:
            raise ShapeError(f"inner {inner.shape} and outer {outer.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(inner)) and np.all(np.isfinite(outer))):
            raise ValueError("layer weights must be finite")
        object.__setattr__(self, "inner", inner)
        object.__setattr__(self, "outer", outer)

    @classmethod
    def random(cls, rng: RngStream, width: int, input_dim: int, feature_dim: int,
               activation: str = "relu") -> "Layer":
        """N(0, 1) initialization of every parameter."""
        inner = rng.gauss((width, input_dim, feature_dim))
        outer = rng.gauss(width)
        return cls(inner, outer, activation)

    @property
    def N(self) -> int:
        return self.outer.size

    @property
    def input_dim(self) -> int:
        return self.inner.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.inner.shape[2]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.N, 1.0 / self.N)

    @property
    def base(self) -> "Layer":
        return self

    @cached_property
    def _flat_inner(self) -> np.ndarray:
        # (input_dim, N*feature_dim): all pre-activations in one product
        return np.ascontiguousarray(self.inner.transpose(1, 0, 2).reshape(self.input_dim, -1))

    def neuron(self, i: int) -> Neuron:
        return Neuron(self.inner[i], float(self.outer[i]), self.activation)

    def preactivations(self, Z: np.ndarray) -> np.ndarray:
        Z = _as_batch(Z, self.input_dim)
        return (Z @ self._flat_inner).reshape(Z.shape[0], self.N, self.feature_dim)

    def neuron_outputs(self, Z: np.ndarray) -> np.ndarray:
        """``(m, N, feature_dim)`` array of every neuron on every point."""
        return self.outer[None, :, None] * activate(self.activation, self.preactivations(Z))

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        return mix(self.weights, self.neuron_outputs(Z))


@dataclass(frozen=True, eq=False)
class PrunedLayer:
    layer: Layer
    weights: np.ndarray

    def __post_init__(self):
        w = check_simplex(self.weights, self.layer.N)
        object.__setattr__(self, "weights", w.copy())

    N = property(lambda self: self.layer.N)
    input_dim = property(lambda self: self.layer.input_dim)
    feature_dim = property(lambda self: self.layer.feature_dim)
    activation = property(lambda self: self.layer.activation)
    base = property(lambda self: self.layer)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)

    def neuron(self, i: int) -> Neuron:
        return self.layer.neuron(i)

    def neuron_outputs(self, Z: np.ndarray) -> np.ndarray:
        return self.layer.neuron_outputs(Z)

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        return mix(self.weights, self.neuron_outputs(Z))

    def compact(self) -> "PrunedLayer":
        """Same function, storing only the neurons in the support."""
        idx = self.support
        small = Layer(self.layer.inner[idx], self.layer.outer[idx], self.layer.activation)
        return PrunedLayer(small, self.weights[idx] / self.weights[idx].sum())


def mix(weights: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    """Weighted combination over the neuron axis of an ``(m, N, f)`` array."""
    return np.einsum("n,mnf->mf", weights, outputs)


def _as_batch(Z, dim: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.ndim != 2 or Z.shape[1] != dim:
        raise ShapeError(f"expected points of dimension {dim}, got array of shape {Z.shape}")
    return Z


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple = ()

    def __post_init__(self):
        layers = tuple(self.layers)
        for k in range(1, len(layers)):
            if layers[k].input_dim != layers[k - 1].feature_dim:
                raise ShapeError(
                    f"layer {k + 1} expects input dim {layers[k].input_dim}, "
                    f"layer {k} produces {layers[k - 1].feature_dim}")
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int | None:
        return self.layers[0].input_dim if self.layers else None

    @property
    def output_dim(self) -> int | None:
        return self.layers[-1].feature_dim if self.layers else None

    def replace(self, index: int, layer) -> "Network":
        """Copy with the 1-based layer ``index`` swapped out."""
        layers = list(self.layers)
        layers[index - 1] = layer
        return Network(tuple(layers))

    def __call__(self, X):
        return forward(self, X)


def forward(net: Network, x, capture: bool = False):
    """Evaluate ``F_L o ... o F_1``.

    ``x`` is a single point or an ``(m, dim)`` batch; the result has the same
    rank. With ``capture`` the activations at every layer boundary are also
    returned (index 0 is the input itself).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    Z = x[None, :] if single else x
    if net.layers and Z.shape[1] != net.input_dim:
        raise ShapeError(f"network expects input dim {net.input_dim}, got {Z.shape[1]}")
    boundaries = [Z]
    for layer in net.layers:
        Z = layer(Z)
        boundaries.append(Z)
    out = Z[0] if single else Z
    if capture:
        if single:
            boundaries = [b[0] for b in boundaries]
        return out, boundaries
    return out


def split_at(net: Network, index: int):
    """``(H1, F_index, H2)`` with ``H1``/``H2`` possibly empty (identity)."""
    if not 1 <= index <= net.depth:
        raise IndexError(f"layer index {index} outside 1..{net.depth}")
    return (Network(net.layers[:index - 1]), net.layers[index - 1],
            Network(net.layers[index:]))


def _layer_backward(layer, Z: np.ndarray, G: np.ndarray, params: bool):
    """Backprop ``G = dLoss/d(layer output)`` to the layer input (and parameters)."""
    base = layer.base
    P = base.preactivations(Z)
    w = layer.weights
    GP = activate_grad(base.activation, P) * ((w * base.outer)[:, None] * G[:, None, :])
    m = Z.shape[0]
    gZ = GP.reshape(m, -1) @ base._flat_inner.T
    if not params:
        return gZ, None, None
    g_inner = (Z.T @ GP.reshape(m, -1)).reshape(base.input_dim, base.N, base.feature_dim)
    g_outer = w * np.einsum("mf,mnf->n", G, activate(base.activation, P))
    return gZ, g_inner.transpose(1, 0, 2), g_outer


def tail_pullback(tail: Network, u, residual) -> np.ndarray:
    """Row vector ``residual^T J_tail(u)`` by reverse-mode differentiation.

    Works on single points or ``(m, dim)`` batches (one product per row).
    An empty tail is the identity and returns ``residual`` unchanged.
    """
    u = np.asarray(u, dtype=np.float64)
    r = np.asarray(residual, dtype=np.float64)
    single = u.ndim == 1
    U = u[None, :] if single else u
    R = r[None, :] if single else r
    if tail.layers:
        if U.shape[1] != tail.input_dim or R.shape[1] != tail.output_dim or R.shape[0] != U.shape[0]:
            raise ShapeError(f"pullback shapes u{U.shape} residual{R.shape} do not fit the tail")
    elif U.shape != R.shape:
        raise ShapeError(f"identity tail needs equal shapes, got {U.shape} and {R.shape}")
    _, inputs = forward(tail, U, capture=True)
    G = R
    for layer, Z in zip(reversed(tail.layers), reversed(inputs[:-1])):
        G, _, _ = _layer_backward(layer, Z, G, params=False)
    return G[0] if single else G


def mse(net: Network, X, Y) -> float:
    out = forward(net, X)
    return float(np.mean(np.sum((out - np.asarray(Y)) ** 2, axis=1)))


def loss_and_grad(net: Network, X, Y):
    """Mean squared loss and its gradient w.r.t. every ``(inner, outer)`` pair."""
    out, inputs = forward(net, X, capture=True)
    diff = out - Y
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    G = 2.0 * diff / X.shape[0]
    grads = [None] * net.depth
    for k in range(net.depth - 1, -1, -1):
        G, g_inner, g_outer = _layer_backward(net.layers[k], inputs[k], G, params=True)
        grads[k] = (g_inner, g_outer)
    return loss, grads


@dataclass
class TrainResult:
    net: Network
    loss: float
    steps: int
    history: list = field(default_factory=list)
    dead: bool = False


def _flat_loss_and_grad(Ws, outs, acts, dims, X, Y):
    """Loss and gradients on flat ``(in, N*f)`` weights; no network objects built.

    Same arithmetic as :func:`loss_and_grad`, minus the input gradient of the
    first layer, which training never needs.
    """
    m = X.shape[0]
    Zs, Ps, Ss = [X], [], []
    Z = X
    for W, a, act, (N, f) in zip(Ws, outs, acts, dims):
        P = (Z @ W).reshape(m, N, f)
        S = activate(act, P)
        Ps.append(P)
        Ss.append(S)
        Z = np.einsum("n,mnf->mf", a / N, S)
        Zs.append(Z)
    diff = Z - Y
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    G = 2.0 * diff / m
    grads = [None] * len(Ws)
    for k in range(len(Ws) - 1, -1, -1):
        N, f = dims[k]
        P, act, a = Ps[k], acts[k], outs[k]
        g_outer = np.einsum("mf,mnf->n", G, Ss[k]) / N
        GP = G[:, None, :] * (a / N)[:, None]
        if act == "relu":
            # a 0/1 mask multiplies exactly; cheaper than a float derivative array
            np.multiply(GP, P > 0, out=GP)
        else:
            GP *= activate_grad(act, P)
        GP = GP.reshape(m, -1)
        g_W = Zs[k].T @ GP
        if k:
            G = GP @ Ws[k].T
        grads[k] = (g_W, g_outer)
    return loss, grads


def train_gd(net: Network, X, Y, lr: float, steps: int, *, mean_field: bool = True,
             window: int = 500, rel_tol: float | None = None, record_every: int = 0,
             allow_dead: bool = False, warmup: int = 0) -> TrainResult:
    """Full-batch gradient descent on ``E ||F(x) - y||^2``.

    The step size ramps linearly from ``lr / warmup`` to ``lr`` over the first
    ``warmup`` steps, then stays constant.

    With ``mean_field`` the gradient of each layer is multiplied by its width,
    the time scaling under which 1/N-averaged layers train at a width-independent
    speed. ``rel_tol`` enables early stopping once the relative improvement over
    ``window`` steps drops below it.

    Raises :class:`TrainingDiverged` on a non-finite loss or when every
    gradient vanishes while the loss is still positive (all units dead); with
    ``allow_dead`` the latter instead ends training with ``dead=True``.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if any(isinstance(layer, PrunedLayer) for layer in net.layers):
        raise TypeError("train_gd trains full layers only")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    Ws = [layer._flat_inner.copy() for layer in net.layers]
    outs = [layer.outer.copy() for layer in net.layers]
    acts = [layer.activation for layer in net.layers]
    dims = [(layer.N, layer.feature_dim) for layer in net.layers]
    scale = [float(layer.N) if mean_field else 1.0 for layer in net.layers]

    def build():
        return Network(tuple(
            Layer(W.reshape(W.shape[0], N, f).transpose(1, 0, 2), a, act)
            for W, a, act, (N, f) in zip(Ws, outs, acts, dims)))

    past = deque()
    history = []
    step = 0
    for step in range(steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = _flat_loss_and_grad(Ws, outs, acts, dims, X, Y)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        if step == steps:
            break
        if loss > 0 and not any(np.any(go) for _, go in grads) \
                and not any(np.any(gw) for gw, _ in grads):
            if allow_dead:
                return TrainResult(build(), loss, step, history, dead=True)
            raise TrainingDiverged(step, loss, "all gradients vanished (dead network)")
        if record_every and step % record_every == 0:
            history.append((step, loss))
        if rel_tol is not None:
            past.append(loss)
            if len(past) > window:
                old = past.popleft()
                if old - loss < rel_tol * old:
                    break
        rate = lr * min(1.0, (step + 1) / warmup) if warmup else lr
        for k, (gw, go) in enumerate(grads):
            Ws[k] -= rate * scale[k] * gw
            outs[k] -= rate * scale[k] * go
    try:
        return TrainResult(build(), loss, step, history)
    except ValueError:
        raise TrainingDiverged(step, loss, "parameters became non-finite") from None


# --- model file -----------------------------------------------------------------

def to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        base = layer.base
        entry = {
            "activation": base.activation,
            "input_dim": base.input_dim,
            "feature_dim": base.feature_dim,
            "neurons": [{"outer_scale": float(base.outer[i]),
                         "inner_weights": base.inner[i].tolist()} for i in range(base.N)],
        }
        if isinstance(layer, PrunedLayer):
            entry["simplex_weights"] = layer.weights.tolist()
        layers.append(entry)
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "layers": layers}


def serialize(net: Network) -> str:
    # float repr is the shortest string that round-trips exactly (<= 17 digits)
    return json.dumps(to_dict(net), separators=(",", ":")) + "\n"


def from_dict(doc) -> Network:
    if not isinstance(doc, dict):
        raise ModelFormatError("$", "top level must be an object")
    if doc.get("format") != FORMAT_NAME:
        raise ModelFormatError("$.format", f"expected {FORMAT_NAME!r}, got {doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelVersionError("$.version", f"unsupported version {doc.get('version')!r} "
                                f"(this build reads version {FORMAT_VERSION})")
    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ModelFormatError("$.layers", "must be a non-empty list")
    layers = []
    for li, entry in enumerate(raw_layers):
        where = f"$.layers[{li}]"
        try:
            activation = entry["activation"]
            in_dim = int(entry["input_dim"])
            f_dim = int(entry["feature_dim"])
            neurons = entry["neurons"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(where, f"missing or malformed field {exc}") from None
        if activation not in ACTIVATIONS:
            raise ModelFormatError(f"{where}.activation", f"unknown activation {activation!r}")
        if not isinstance(neurons, list) or not neurons:
            raise ModelFormatError(f"{where}.neurons", "must be a non-empty list")
        inner = np.empty((len(neurons), in_dim, f_dim))
        outer = np.empty(len(neurons))
        for ni, neuron in enumerate(neurons):
            nwhere = f"{where}.neurons[{ni}]"
            try:
                outer[ni] = float(neuron["outer_scale"])
                w = np.asarray(neuron["inner_weights"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelFormatError(nwhere, f"malformed neuron ({exc})") from None
            if w.shape != (in_dim, f_dim):
                raise ModelFormatError(f"{nwhere}.inner_weights",
                                       f"shape {w.shape}, expected {(in_dim, f_dim)}")
            inner[ni] = w
        if not (np.all(np.isfinite(inner)) and np.all(np.isfinite(outer))):
            raise ModelFormatError(where, "non-finite weight")
        layer = Layer(inner, outer, activation)
        if "simplex_weights" in entry:
            try:
                layer = PrunedLayer(layer, np.asarray(entry["simplex_weights"], dtype=np.float64))
            except (SimplexError, TypeError, ValueError) as exc:
                raise ModelFormatError(f"{where}.simplex_weights", str(exc)) from None
        layers.append(layer)
    try:
        return Network(tuple(layers))
    except ShapeError as exc:
        raise ModelFormatError("$.layers", str(exc)) from None


def deserialize(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    return from_dict(doc)


def save(net: Network, path) -> None:
    """Write atomically (temp file + rename), creating parent directories."""
    from .reports import atomic_write_text
    atomic_write_text(path, serialize(net))


def load(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return deserialize(fh.read())


def random_network(rng: RngStream, dims: Sequence[int], widths: Sequence[int],
                   activation: str = "relu") -> Network:
    """``dims`` lists boundary dimensions (input first); ``widths`` the N of each layer."""
    if len(dims) != len(widths) + 1:
        raise ValueError("need one more boundary dimension than layers")
    layers = tuple(Layer.random(rng.child("layer", k), widths[k], dims[k], dims[k + 1], activation)
                   for k in range(len(widths)))
    return Network(layers)
