"""Command-line entry point: ``greedyprune {train,prune,rate-verify,oracle-check}``.

Configuration comes from an optional ``key=value`` file (``#`` starts a
comment) and per-key flags, which override the file. The resolved config is
echoed to the log, saved as ``config.txt`` and embedded in ``manifest.json``
next to the outputs; ``--manifest`` replays a previous run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checks import SUITES, run_suites
from .experiment import (DEFAULT_GRID, ToyConfig, gen_target, make_dataset, run_rate_experiment,
                         train_with_retries)
from .local_imitation import NumericalDegeneracy, ScoringInvariantError
from .model import (ModelFormatError, TrainingDiverged, load, random_network, save)
from .numeric import ACTIVATIONS, RngStream
from .pruner import LayerPruneError, prune_network
from .reports import atomic_write_text, write_csv, write_json, write_trace

log = logging.getLogger("greedyprune")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BUDGET = 0, 2, 3, 4
COMMANDS = ("train", "prune", "rate-verify", "oracle-check")
REQUIRED = {"train": ("out",), "prune": ("model", "data", "out"), "rate-verify": ("out",),
            "oracle-check": ()}


class ConfigError(ValueError):
    def __init__(self, source: str, line, message: str):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.source = source
        self.line = line


# --- value kinds ------------------------------------------------------------------

def _int(text):
    return int(text.strip())


def _float(text):
    value = float(text.strip())
    if not np.isfinite(value):
        raise ValueError("must be finite")
    return value


def _optional(parse):
    def inner(text):
        return None if text.strip() in ("", "none") else parse(text)
    return inner


def _tuple(parse):
    def inner(text):
        items = [t for t in (p.strip() for p in text.split(",")) if t]
        return tuple(parse(t) for t in items)
    return inner


def _str(text):
    return text.strip()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _opt(kind, default, help_, check=None):
    return field(default=default, metadata={"kind": kind, "help": help_, "check": check})


def _at_least(lo):
    def check(value):
        vals = value if isinstance(value, tuple) else (value,)
        if any(v is not None and v < lo for v in vals):
            raise ValueError(f"must be >= {lo}")
    return check


def _positive(value):
    vals = value if isinstance(value, tuple) else (value,)
    if any(v is not None and not v > 0 for v in vals):
        raise ValueError("must be > 0")


def _nonnegative(value):
    vals = value if isinstance(value, tuple) else (value,)
    if any(v is not None and v < 0 for v in vals):
        raise ValueError("must be >= 0")


def _activation(value):
    if value not in ACTIVATIONS:
        raise ValueError(f"must be one of {', '.join(ACTIVATIONS)}")


def _suites(value):
    unknown = [v for v in value if v not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {', '.join(unknown)}; known: {', '.join(SUITES)}")


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int = _opt(_int, 0, "random seed", _nonnegative)
    out: str | None = _opt(_optional(_str), None, "output directory")
    model: str | None = _opt(_optional(_str), None, "model JSON to prune")
    data: str | None = _opt(_optional(_str), None, "data CSV (columns x0.., y0..)")
    eps: tuple = _opt(_tuple(_float), (), "per-layer discrepancy target (one value or one per layer)",
                      _nonnegative)
    support: int | None = _opt(_optional(_int), None, "support cap per pruned layer", _at_least(1))
    max_iters: int | None = _opt(_optional(_int), None, "greedy step budget per layer (default 10 N)",
                                 _at_least(1))
    k_tilde: int = _opt(_int, 25, "exact global steps before the Taylor shortlist", _nonnegative)
    top_m: int = _opt(_int, 5, "Taylor shortlist size", _at_least(1))
    widths: tuple = _opt(_tuple(_int), (50, 50), "neurons per layer (train)", _at_least(1))
    feature_dims: tuple = _opt(_tuple(_int), (50,), "output dims of hidden layers (train)",
                               _at_least(1))
    activation: str = _opt(_str, "relu", "activation (train)", _activation)
    m: int = _opt(_int, 200, "toy data points when no data file is given", _at_least(1))
    train_lr: float = _opt(_float, ToyConfig.train_lr, "gradient descent step size", _positive)
    train_steps: int = _opt(_int, ToyConfig.train_steps, "gradient descent step cap", _nonnegative)
    train_warmup: int = _opt(_int, ToyConfig.train_warmup, "linear step-size warmup", _nonnegative)
    train_window: int = _opt(_int, ToyConfig.train_window, "early-stop window", _at_least(1))
    train_rel_tol: float = _opt(_float, ToyConfig.train_rel_tol, "early-stop relative gain",
                                _nonnegative)
    lr_retries: int = _opt(_int, ToyConfig.lr_retries, "step-size halvings after failure",
                           _nonnegative)
    seeds: tuple = _opt(_tuple(_int), ToyConfig.seeds, "seeds (rate-verify)", _nonnegative)
    grid: tuple = _opt(_tuple(_int), DEFAULT_GRID, "pruned sizes (rate-verify)", _at_least(1))
    local_max_iters: int = _opt(_int, ToyConfig.local_max_iters, "local budget (rate-verify)",
                                _at_least(1))
    global_max_iters: int = _opt(_int, ToyConfig.global_max_iters, "global budget (rate-verify)",
                                 _at_least(1))
    workers: int = _opt(_int, 1, "worker processes (rate-verify)", _at_least(1))
    suites: tuple = _opt(_tuple(_str), tuple(SUITES), "oracle suites (oracle-check)", _suites)


KEYS = {f.name: f for f in fields(RunConfig) if f.name != "command"}


def _parse_value(key: str, text: str, source: str, line):
    f = KEYS[key]
    try:
        value = f.metadata["kind"](text)
        if f.metadata["check"]:
            f.metadata["check"](value)
    except ValueError as exc:
        raise ConfigError(source, line, f"bad value for {key!r}: {text.strip()!r} ({exc})") from None
    return value


def parse_config_text(text: str, source: str = "<config>") -> tuple[dict, dict]:
    """Parse ``key=value`` lines; returns ``(values, line_numbers)``."""
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(source, lineno, f"expected key=value, got {content!r}")
        key, value = (p.strip() for p in content.split("=", 1))
        if key == "command":
            if value not in COMMANDS:
                raise ConfigError(source, lineno, f"unknown command {value!r}")
            values[key], lines[key] = value, lineno
            continue
        if key not in KEYS:
            raise ConfigError(source, lineno, f"unknown key {key!r}")
        if key in values:
            raise ConfigError(source, lineno, f"duplicate key {key!r} (first on line {lines[key]})")
        values[key] = _parse_value(key, value, source, lineno)
        lines[key] = lineno
    return values, lines


def resolve_config(command: str, file_text: str | None = None, source: str = "<config>",
                   overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then flag overrides; validates the result."""
    values, lines = parse_config_text(file_text or "", source)
    if "command" in values and values.pop("command") != command:
        raise ConfigError(source, lines["command"], f"config is for another command, not {command!r}")
    for key, text in (overrides or {}).items():
        if key not in KEYS:
            raise ConfigError(f"--{key.replace('_', '-')}", None, f"unknown key {key!r}")
        values[key] = _parse_value(key, text, f"--{key.replace('_', '-')}", None)
        lines[key] = None
    cfg = RunConfig(command=command, **values)
    eof = len((file_text or "").splitlines()) + 1
    for key in REQUIRED[command]:
        if getattr(cfg, key) is None:
            raise ConfigError(source, eof if file_text else None, f"missing required key {key!r}")
    if command == "train" and len(cfg.widths) != len(cfg.feature_dims) + 1:
        raise ConfigError(source, lines.get("widths"),
                          "widths needs one entry more than feature_dims")
    if command == "rate-verify":
        try:
            toy_config(cfg)
        except ValueError as exc:
            raise ConfigError(source, lines.get("grid"), str(exc)) from None
    return cfg


def format_config(cfg: RunConfig) -> str:
    """Canonical ``key=value`` text; parses back to an equal config."""
    out = [f"command={cfg.command}"]
    out += [f"{name}={_fmt(getattr(cfg, name))}" for name in KEYS]
    return "\n".join(out) + "\n"


def toy_config(cfg: RunConfig) -> ToyConfig:
    return ToyConfig(seeds=cfg.seeds, grid=cfg.grid, m=cfg.m, train_lr=cfg.train_lr,
                     train_steps=cfg.train_steps, train_warmup=cfg.train_warmup,
                     train_window=cfg.train_window, train_rel_tol=cfg.train_rel_tol,
                     lr_retries=cfg.lr_retries, local_max_iters=cfg.local_max_iters,
                     global_max_iters=cfg.global_max_iters, k_tilde=cfg.k_tilde,
                     top_m=cfg.top_m, workers=cfg.workers)


# --- data files -------------------------------------------------------------------

def write_data(path, X, Y) -> None:
    header = [f"x{j}" for j in range(X.shape[1])] + [f"y{j}" for j in range(Y.shape[1])]
    write_csv(path, header, (list(map(float, x)) + list(map(float, y)) for x, y in zip(X, Y)))


def read_data(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(str(path), 1, "empty data file")
    header = rows[0]
    nx = sum(1 for h in header if h.startswith("x"))
    expected = [f"x{j}" for j in range(nx)] + [f"y{j}" for j in range(len(header) - nx)]
    if header != expected or nx == 0 or nx == len(header):
        raise ConfigError(str(path), 1, "header must be x0..x{d-1}, y0..y{k-1}")
    try:
        arr = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(str(path), None, f"non-numeric entry ({exc})") from None
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] != len(header):
        raise ConfigError(str(path), None, "rows must match the header width and be non-empty")
    return arr[:, :nx], arr[:, nx:]


# --- commands ---------------------------------------------------------------------

def _manifest(cfg: RunConfig, outputs) -> dict:
    return {"command": cfg.command, "seed": cfg.seed, "version": __version__,
            "config": format_config(cfg), "outputs": sorted(outputs),
            "python": platform.python_version(), "numpy": np.__version__}


def _finish(cfg: RunConfig, out: Path, outputs) -> None:
    atomic_write_text(out / "config.txt", format_config(cfg))
    write_json(out / "manifest.json", _manifest(cfg, list(outputs) + ["config.txt"]))


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    outputs = ["model.json", "train.csv"]
    if cfg.data:
        X, Y = read_data(cfg.data)
    else:
        rng = RngStream(cfg.seed)
        teacher = gen_target(rng.child("teacher"))
        data = make_dataset(rng.child("data"), teacher, cfg.m)
        X, Y = data.X, data.Y
        write_data(out / "data.csv", X, Y)
        outputs.append("data.csv")
    dims = [X.shape[1], *cfg.feature_dims, Y.shape[1]]
    net = random_network(RngStream(cfg.seed).child("init"), dims, cfg.widths, cfg.activation)
    res, lr = train_with_retries(net, X, Y, lr=cfg.train_lr, steps=cfg.train_steps,
                                 retries=cfg.lr_retries, window=cfg.train_window,
                                 rel_tol=cfg.train_rel_tol, warmup=cfg.train_warmup)
    save(res.net, out / "model.json")
    write_csv(out / "train.csv", ("steps", "loss", "lr", "dead"),
              [[res.steps, res.loss, lr, int(res.dead)]])
    _finish(cfg, out, outputs)
    log.info("trained to loss %.6e in %d steps (lr %g)", res.loss, res.steps, lr)
    return EXIT_OK


def cmd_prune(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    net = load(cfg.model)
    X, Y = read_data(cfg.data)
    if X.shape[1] != net.input_dim:
        raise ConfigError(cfg.data, 1, f"data has {X.shape[1]} inputs, model expects {net.input_dim}")
    eps = None if not cfg.eps else (cfg.eps[0] if len(cfg.eps) == 1 else list(cfg.eps))
    if isinstance(eps, list) and len(eps) != net.depth:
        raise ConfigError("eps", None, f"need 1 or {net.depth} values, got {len(eps)}")
    pruned, report = prune_network(net, X, eps, max_iters=cfg.max_iters, k_tilde=cfg.k_tilde,
                                   top_m=cfg.top_m, max_support=cfg.support)
    save(pruned, out / "pruned_model.json")
    header = ("layer", "method", "support", "local_loss", "global_loss", "converged")
    write_csv(out / "prune_report.csv", header, list(report.rows()))
    outputs = ["pruned_model.json", "prune_report.csv"]
    for r in report.layers:
        for tag, state in (("local", r.local), ("global", r.global_)):
            name = f"trace_layer{r.index}_{tag}.csv"
            write_trace(out / name, state.trace)
            outputs.append(name)
    _finish(cfg, out, outputs)
    log.info("total discrepancy %.6e (triangle bound %.6e)", report.total_loss,
             report.triangle_rhs ** 2)
    statuses = [(r.local if r.method == "local" else r.global_).status for r in report.layers]
    if "stalled" in statuses:
        log.error("a winning greedy run stalled numerically")
        return EXIT_NUMERIC
    if "budget" in statuses:
        log.error("step budget exhausted before the stop criterion on some layer")
        return EXIT_BUDGET
    return EXIT_OK


def cmd_rate_verify(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    report = run_rate_experiment(toy_config(cfg))
    atomic_write_text(out / "rates.csv", report.rates_csv())
    atomic_write_text(out / "fits.csv", report.fits_csv())
    _finish(cfg, out, ["rates.csv", "fits.csv"])
    return EXIT_OK


def cmd_oracle_check(cfg: RunConfig) -> int:
    results = run_suites(cfg.seed, cfg.suites)
    for r in results:
        print(r.line())
    if cfg.out:
        out = Path(cfg.out)
        write_csv(out / "oracle_check.csv", ("suite", "passed", "worst", "tolerance", "cases"),
                  [[r.name, int(r.passed), r.worst, r.tolerance, r.cases] for r in results])
        _finish(cfg, out, ["oracle_check.csv"])
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("failed suites: %s", ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


HANDLERS = {"train": cmd_train, "prune": cmd_prune, "rate-verify": cmd_rate_verify,
            "oracle-check": cmd_oracle_check}


def execute(cfg: RunConfig) -> int:
    for key in ("model", "data"):
        path = getattr(cfg, key)
        if path is not None and not Path(path).is_file():
            raise ConfigError(key, None, f"file not found: {path}")
    return HANDLERS[cfg.command](cfg)


# --- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="greedyprune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--manifest", help="replay the config stored in a manifest.json")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, f in KEYS.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}", metavar="VALUE",
                           help=f.metadata["help"])
    return parser


def load_run_config(args) -> RunConfig:
    text, source = None, "<config>"
    if args.config and args.manifest:
        raise ConfigError("--manifest", None, "use either --config or --manifest")
    if args.config:
        source = args.config
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(source, None, f"cannot read config: {exc.strerror}") from None
    elif args.manifest:
        source = args.manifest
        try:
            text = json.loads(Path(args.manifest).read_text(encoding="utf-8"))["config"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(source, None, f"not a readable manifest ({exc})") from None
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("opt_") and v is not None}
    return resolve_config(args.command, text, source, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(args)
        log.info("resolved config:\n%s", format_config(cfg).rstrip())
        return execute(cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ModelFormatError as exc:
        log.error("model file error: %s", exc)
        return EXIT_CONFIG
    except (TrainingDiverged, NumericalDegeneracy, ScoringInvariantError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except LayerPruneError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
