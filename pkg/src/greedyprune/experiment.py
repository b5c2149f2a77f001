"""Rate study: pruning a trained toy network versus training small networks directly.

Data come from a fixed random teacher ``F_gen``; a two-hidden-layer mean-field
network with ``N`` first-layer neurons is trained on them, its first layer is
pruned to every size ``n`` of a grid (local and global imitation, no
finetuning), and a network with ``n`` first-layer neurons is trained from
scratch with the same schedule. All discrepancies are measured against the
trained full network on the training points.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .features import PushedDataset, build_features, global_loss
from .global_imitation import GlobalProblem, run_global
from .local_imitation import StopRule, run_local
from .model import Layer, Network, PrunedLayer, TrainingDiverged, train_gd
from .numeric import RngStream
from .reports import csv_text

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(range(1, 11)) + (12, 14, 16, 18, 20, 25, 30, 35, 40, 45, 50)
LOSS_FLOOR = 1e-13


@dataclass(frozen=True)
class ToyConfig:
    input_dim: int = 100
    feature_dim: int = 50
    layer2_width: int = 50
    full_width: int = 50
    m: int = 200
    teacher_width: int = 1000
    seeds: tuple = (0, 1, 2, 3, 4)
    grid: tuple = DEFAULT_GRID
    train_lr: float = 0.4
    train_steps: int = 2000
    train_window: int = 500
    train_rel_tol: float = 1e-7
    train_warmup: int = 400
    lr_retries: int = 3
    local_max_iters: int = 500
    global_max_iters: int = 200
    k_tilde: int = 25
    top_m: int = 5
    workers: int = 1

    def __post_init__(self):
        if any(n < 1 or n > self.full_width for n in self.grid):
            raise ValueError(f"grid sizes must lie in 1..{self.full_width}")
        if not self.seeds:
            raise ValueError("need at least one seed")


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray

    @property
    def m(self) -> int:
        return self.X.shape[0]


def gen_target(rng: RngStream, input_dim: int = 100, hidden: int = 1000):
    """Random teacher ``x -> (exp(w2/10) - 0.5) . tanh(sin(2 pi w1) x / 5) / 1000``."""
    w1 = rng.uniform((hidden, input_dim))
    w2 = rng.uniform(hidden)
    proj = np.sin(2.0 * np.pi * w1)
    head = np.exp(w2 / 10.0) - 0.5

    def teacher(X):
        X = np.asarray(X, dtype=np.float64)
        return np.tanh(X @ proj.T / 5.0) @ head / hidden

    teacher.bound = float(np.max(np.abs(head)))
    return teacher


def make_dataset(rng: RngStream, teacher, m: int = 200, input_dim: int = 100) -> Dataset:
    if m < 1:
        raise ValueError("need at least one data point")
    X = rng.uniform((m, input_dim))
    return Dataset(X, np.asarray(teacher(X)).reshape(m, 1))


def toy_network(rng: RngStream, width: int, cfg: ToyConfig) -> Network:
    l1 = Layer.random(rng.child("layer1"), width, cfg.input_dim, cfg.feature_dim, "relu")
    l2 = Layer.random(rng.child("layer2"), cfg.layer2_width, cfg.feature_dim, 1, "relu")
    return Network((l1, l2))


def train_with_retries(net: Network, X, Y, *, lr: float, steps: int, retries: int = 3,
                       window: int = 500, rel_tol: float | None = None, warmup: int = 0):
    """Train with gradient descent, halving the rate after a failure.

    A network that is still dead (all ReLUs off) after the last retry is kept
    as the outcome of gradient descent; a non-finite loss is re-raised.
    Returns ``(TrainResult, lr_used)``.
    """
    for attempt in range(retries + 1):
        last = attempt == retries
        try:
            res = train_gd(net, X, Y, lr, steps, window=window, rel_tol=rel_tol,
                           allow_dead=last, warmup=warmup)
            if res.dead:
                log.warning("network stayed dead at lr=%g after %d retries", lr, attempt)
            return res, lr
        except TrainingDiverged as exc:
            if last:
                raise
            log.info("training failed at lr=%g (%s); retrying at %g", lr, exc.reason, lr / 2)
            lr /= 2
    raise AssertionError("unreachable")


def train_toy(net: Network, data: Dataset, cfg: ToyConfig):
    return train_with_retries(net, data.X, data.Y, lr=cfg.train_lr, steps=cfg.train_steps,
                              retries=cfg.lr_retries, window=cfg.train_window,
                              rel_tol=cfg.train_rel_tol, warmup=cfg.train_warmup)


@dataclass(frozen=True)
class RateRow:
    seed: int
    n: int
    method: str
    loss: float
    support: int


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r2: float
    points: int

    @property
    def flagged(self) -> bool:
        return self.points < 3


@dataclass(frozen=True)
class FitRow:
    seed: object  # int, or "median" for the aggregate
    method: str
    x_scale: str
    slope: float
    intercept: float
    r2: float
    points: int


def fit_loglinear(xs, ys, floor: float = LOSS_FLOOR, log_x: bool = False) -> FitResult:
    """Least squares of ``log y`` on ``x`` (or ``log x``) over points with ``y > floor``.

    Fewer than three usable points gives a flagged result with NaN fields.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    keep = np.isfinite(ys) & (ys > floor)
    x, y = xs[keep], np.log(ys[keep])
    if log_x:
        x = np.log(x)
    if x.size < 3:
        return FitResult(float("nan"), float("nan"), float("nan"), int(x.size))
    design = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return FitResult(float(slope), float(intercept), float(r2), int(x.size))


def support_prefixes(path, sizes) -> dict:
    """Index into a greedy path where a run capped at support ``n`` would stop.

    A capped run halts just before the first step whose support exceeds ``n``,
    so one uncapped path answers every cap.
    """
    support = [int(np.count_nonzero(A)) for A in path]
    out = {}
    for n in sizes:
        k = 0
        while k + 1 < len(path) and support[k + 1] <= n:
            k += 1
        out[n] = k
    return out


@dataclass
class SeedResult:
    seed: int
    rows: list
    local_bar: dict          # n -> local discrepancy of the local-imitation layer
    train_loss: float
    train_lr: float
    direct_lr: dict = field(default_factory=dict)


def run_seed(cfg: ToyConfig, seed: int) -> SeedResult:
    root = RngStream(seed)
    teacher = gen_target(root.child("teacher"), cfg.input_dim, cfg.teacher_width)
    data = make_dataset(root.child("data"), teacher, cfg.m, cfg.input_dim)

    full_res, full_lr = train_toy(toy_network(root.child("full"), cfg.full_width, cfg), data, cfg)
    full = full_res.net
    log.info("seed %d: full network trained to loss %.3e (lr %g, %d steps)",
             seed, full_res.loss, full_lr, full_res.steps)

    layer = full.layers[0]
    fs = build_features(layer, PushedDataset(data.X, 1))
    problem = GlobalProblem.build(full, 1, data.X)
    sizes = sorted(set(cfg.grid))
    local_path, global_path = [], []
    run_local(fs, StopRule(max_iters=cfg.local_max_iters),
              on_step=lambda st: local_path.append((st.A.copy(), st.loss)))
    run_global(problem, StopRule(max_iters=cfg.global_max_iters), k_tilde=cfg.k_tilde,
               top_m=cfg.top_m, on_step=lambda st: global_path.append(st.A.copy()))
    local_at = support_prefixes([a for a, _ in local_path], sizes)
    global_at = support_prefixes(global_path, sizes)

    rows, local_bar, direct_lr = [], {}, {}
    for n in cfg.grid:
        A_loc, bar = local_path[local_at[n]]
        net_loc = full.replace(1, PrunedLayer(layer, A_loc))
        rows.append(RateRow(seed, n, "local", global_loss(net_loc, full, data.X),
                            int(np.count_nonzero(A_loc))))
        local_bar[n] = bar

        A_glob = global_path[global_at[n]]
        net_glob = full.replace(1, PrunedLayer(layer, A_glob))
        rows.append(RateRow(seed, n, "global", global_loss(net_glob, full, data.X),
                            int(np.count_nonzero(A_glob))))

        direct_res, lr = train_toy(toy_network(root.child("direct", n), n, cfg), data, cfg)
        direct_lr[n] = lr
        rows.append(RateRow(seed, n, "direct", global_loss(direct_res.net, full, data.X), n))
        log.debug("seed %d n %d: local %.3e global %.3e direct %.3e", seed, n,
                  rows[-3].loss, rows[-2].loss, rows[-1].loss)
    return SeedResult(seed, rows, local_bar, full_res.loss, full_lr, direct_lr)


@dataclass
class RateReport:
    config: ToyConfig
    seeds: list  # SeedResult, ordered by seed

    @property
    def rows(self) -> list:
        return [row for s in self.seeds for row in s.rows]

    def losses(self, seed: int, method: str):
        pts = [(r.n, r.loss) for r in self.rows if r.seed == seed and r.method == method]
        ns, ls = zip(*pts)
        return np.array(ns), np.array(ls)

    def fit(self, seed: int, method: str) -> FitResult:
        ns, ls = self.losses(seed, method)
        return fit_loglinear(ns, ls, log_x=(method == "direct"))

    @property
    def fits(self) -> list:
        out = []
        for method in ("local", "global", "direct"):
            scale = "log_n" if method == "direct" else "n"
            per_seed = []
            for s in self.seeds:
                f = self.fit(s.seed, method)
                per_seed.append(f)
                out.append(FitRow(s.seed, method, scale, f.slope, f.intercept, f.r2, f.points))
            out.append(FitRow("median", method, scale,
                              float(np.median([f.slope for f in per_seed])),
                              float(np.median([f.intercept for f in per_seed])),
                              float(np.median([f.r2 for f in per_seed])),
                              int(np.median([f.points for f in per_seed]))))
        return out

    def crossover(self, seed: int) -> int | None:
        """Smallest grid size from which local pruning beats direct training for good."""
        ns, local = self.losses(seed, "local")
        _, direct = self.losses(seed, "direct")
        n0 = None
        for n, a, b in zip(ns[::-1], local[::-1], direct[::-1]):
            if not a < b:
                break
            n0 = int(n)
        return n0

    def rates_csv(self) -> str:
        return csv_text(("seed", "n", "method", "loss", "support"),
                        ([r.seed, r.n, r.method, r.loss, r.support] for r in self.rows))

    def fits_csv(self) -> str:
        return csv_text(("seed", "method", "x_scale", "slope", "intercept", "r2", "points"),
                        (list(asdict(f).values()) for f in self.fits))


def run_rate_experiment(cfg: ToyConfig) -> RateReport:
    seeds = sorted(cfg.seeds)
    if cfg.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run_seed, [cfg] * len(seeds), seeds))
    else:
        results = [run_seed(cfg, s) for s in seeds]
    return RateReport(cfg, results)
