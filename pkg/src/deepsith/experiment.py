"""Experiment configs, per-task training loops, run records and result files.

A config is a nested dict-like dataclass that round-trips through JSON.
``run_experiment`` trains one network per seed and returns a
:class:`RunRecord` for each. ``aggregate`` turns several records into
mean/95%-CI rows, and ``export_csv`` writes either kind to a flat CSV.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
from scipy import stats

from .filterbank import geometric_taus, select_k
from .nn import (
    AdamState,
    DivergenceError,
    LayerConfig,
    accuracy,
    apply_update,
    build_network,
    count_parameters,
    loss_cross_entropy,
    loss_mse,
    metric_nrmse,
    net_backward,
    net_forward,
)
from .tasks.adding import gen_adding_batch
from .tasks.data import SequenceDataset, split_and_batch
from .tasks.hateful8 import make_hateful8_dataset
from .tasks.mackey_glass import MGParams, gen_mackey_glass_batch
from .tasks.mnist import load_mnist_sequences

__all__ = [
    "TASKS",
    "ExperimentConfig",
    "TrainingConfig",
    "TABLE_K",
    "RunRecord",
    "SummaryRow",
    "preset",
    "resolve_layers",
    "derive_seed",
    "build_task",
    "build_net_for",
    "lr_at",
    "run_seed",
    "run_experiment",
    "aggregate",
    "export_csv",
    "read_csv",
    "save_records",
    "load_records",
    "apply_overrides",
    "CSV_COLUMNS",
]

log = logging.getLogger(__name__)

TASKS = ("adding", "mackey_glass", "hateful8", "smnist", "psmnist")
CSV_COLUMNS = ("task", "seed", "step", "metric", "value", "ci_low", "ci_high")


# --- configuration ----------------------------------------------------------------


@dataclass
class TrainingConfig:
    batch_size: int = 32
    steps: int | None = None  # stream tasks (adding)
    epochs: int | None = None  # dataset tasks
    lr: float | list[float] = 1e-3  # a list is spread evenly over the run
    dropout: float = 0.2
    readout_mode: str = "final"
    dtype: str = "float64"
    conv: str = "auto"
    eval_every: int = 1  # steps for stream tasks, epochs otherwise
    eval_batch: int = 256
    running_window: int = 100
    k_max: int = 300
    stop_metric: str | None = None  # stop early once this metric crosses stop_value
    stop_value: float | None = None


@dataclass
class ExperimentConfig:
    task: str
    task_params: dict[str, Any]
    layers: list[LayerConfig]
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seeds: list[int] | None = None
    master_seed: int = 0
    n_seeds: int = 5
    output: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        self.layers = [lc if isinstance(lc, LayerConfig) else LayerConfig(**lc) for lc in self.layers]
        if not self.layers:
            raise ValueError("layer list must not be empty")
        if isinstance(self.training, dict):
            self.training = TrainingConfig(**self.training)

    def run_seeds(self) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return list(range(self.master_seed, self.master_seed + self.n_seeds))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _layers(taus, n_taus, hidden, batch_norm, k):
    ks = k if isinstance(k, (list, tuple)) else [k] * len(taus)
    return [LayerConfig(t, n_taus, hidden, kk, batch_norm) for t, kk in zip(taus, ks)]


# Published k values for each preset, used when ``k="table"``.
TABLE_K = {
    "smnist": [125, 61, 35],
    "psmnist": [125, 61, 35],
    "adding": [75, 27, 14, 8],
    "mackey_glass": [15, 8, 4],
    "hateful8": [35, 16, 9, 6],
}


def preset(task: str, k: str = "auto") -> ExperimentConfig:
    """Architecture and training defaults for each benchmark.

    ``k`` is ``"auto"`` (choose by the std-ratio scan) or ``"table"``
    (use the published values).
    """
    ks = TABLE_K[task] if k == "table" else "auto"
    if task in ("smnist", "psmnist"):
        return ExperimentConfig(
            task,
            {"data_dir": None, "perm_seed": 0, "limit": None, "validation_fraction": None, "split_seed": 0},
            _layers([30, 150, 750], 20, 60, True, ks),
            TrainingConfig(batch_size=64, epochs=30, lr=[2e-3, 2e-4, 2e-5], dtype="float32"),
        )
    if task == "adding":
        return ExperimentConfig(
            task,
            {"T": 100, "test_size": 1000},
            _layers([20, 120, 720, 4320], 13, 25, False, ks),
            TrainingConfig(batch_size=50, steps=2500, lr=1e-3, eval_every=500),
        )
    if task == "mackey_glass":
        return ExperimentConfig(
            task,
            {"tau": 17, "distance": 15, "n_signals": 128, "length": 500, "burn_in": 50, "standardize": True},
            _layers([25, 50, 150], 8, 25, False, ks),
            TrainingConfig(batch_size=32, epochs=200, lr=1e-3, readout_mode="every", eval_every=10),
        )
    if task == "hateful8":
        return ExperimentConfig(
            task,
            {"noise_len": 300, "train_per_class": 32, "test_per_class": 10},
            _layers([25, 100, 400, 1200], 10, 35, True, ks),
            TrainingConfig(batch_size=32, epochs=60, lr=3e-3),
        )
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: Iterable[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible.

    List elements are addressed by index, e.g. ``layers.0.k=40``.
    """
    config = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = config
        for p in parts[:-1]:
            node = node[int(p)] if isinstance(node, list) else node.setdefault(p, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = _parse_value(raw)
        else:
            node[last] = _parse_value(raw)
    return config


# --- records ------------------------------------------------------------------------


@dataclass
class RunRecord:
    task: str
    seed: int
    config: dict
    resolved_k: list[int]
    parameter_count: int
    metrics: list[tuple[int, str, float]] = field(default_factory=list)
    wall_clock: float = 0.0
    failed: bool = False
    error: str | None = None

    def log(self, step: int, metric: str, value: float) -> None:
        self.metrics.append((int(step), metric, float(value)))

    def series(self, metric: str) -> tuple[np.ndarray, np.ndarray]:
        rows = [(s, v) for s, m, v in self.metrics if m == metric]
        if not rows:
            return np.zeros(0, dtype=int), np.zeros(0)
        steps, values = zip(*rows)
        return np.array(steps), np.array(values)

    def last(self, metric: str) -> float:
        _, v = self.series(metric)
        return float(v[-1]) if v.size else math.nan

    def trajectory(self) -> tuple:
        """Everything except wall-clock time, for determinism checks."""
        return (self.task, self.seed, json.dumps(self.config, sort_keys=True), tuple(self.resolved_k),
                self.parameter_count, tuple(self.metrics), self.failed, self.error)


@dataclass
class SummaryRow:
    task: str
    step: int
    metric: str
    n: int
    mean: float
    ci_low: float
    ci_high: float


def save_records(records: list[RunRecord], path: str | Path) -> None:
    Path(path).write_text(json.dumps([dataclasses.asdict(r) for r in records], indent=1))


def load_records(path: str | Path) -> list[RunRecord]:
    out = []
    for d in json.loads(Path(path).read_text()):
        d["metrics"] = [tuple(m) for m in d["metrics"]]
        out.append(RunRecord(**d))
    return out


# --- helpers ------------------------------------------------------------------------


def derive_seed(seed: int, *keys: int) -> int:
    """A 32-bit integer seed for an independent stream keyed by ``(seed, *keys)``."""
    return int(np.random.SeedSequence((seed, *keys)).generate_state(1)[0])


@lru_cache(maxsize=None)
def _auto_k(tau_min: float, tau_max: float, n_taus: int, k_max: int) -> int:
    return select_k(geometric_taus(tau_min, tau_max, n_taus), k_max).chosen_k


def resolve_layers(config: ExperimentConfig) -> list[LayerConfig]:
    out = []
    for lc in config.layers:
        k = _auto_k(lc.tau_min, lc.tau_max, lc.n_taus, config.training.k_max) if lc.k == "auto" else int(lc.k)
        out.append(dataclasses.replace(lc, k=k))
    return out


def lr_at(lr: float | list[float], index: int, total: int) -> float:
    """Piecewise-constant schedule: a list of ``m`` rates splits ``total`` into ``m`` equal parts."""
    if not isinstance(lr, (list, tuple)):
        return float(lr)
    part = min(index * len(lr) // max(total, 1), len(lr) - 1)
    return float(lr[part])


def _predict(net, X: np.ndarray, batch: int) -> np.ndarray:
    outs = [net_forward(net, X[i : i + batch], "eval")[0] for i in range(0, len(X), batch)]
    return np.concatenate(outs)


# --- tasks ----------------------------------------------------------------------------


@dataclass(eq=False)
class Task:
    """Wires one benchmark to the training loop."""

    name: str
    n_in: int
    n_out: int
    readout_mode: str
    loss: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]
    evaluate: Callable[[Any, int], dict[str, float]]
    train: SequenceDataset | None = None  # None for stream tasks
    stream: Callable[[int], tuple[np.ndarray, np.ndarray]] | None = None


def _mse_scalar(out, y):
    loss, g = loss_mse(out[:, 0], y)
    return loss, g[:, None]


def _adding_task(cfg: ExperimentConfig, seed: int, dtype) -> Task:
    p = cfg.task_params
    T, B = int(p["T"]), cfg.training.batch_size
    Xt, yt = gen_adding_batch(T, int(p.get("test_size", 1000)), derive_seed(seed, 3), dtype)

    def evaluate(net, batch):
        pred = _predict(net, Xt, batch)[:, 0]
        return {"test_mse": float(np.mean((pred - yt) ** 2))}

    return Task("adding", 2, 1, "final", _mse_scalar, evaluate,
                stream=lambda step: gen_adding_batch(T, B, (derive_seed(seed, 2), step), dtype))


def _mg_task(cfg: ExperimentConfig, seed: int, dtype) -> Task:
    p = cfg.task_params
    tau, d = int(p["tau"]), int(p["distance"])
    n, length = int(p.get("n_signals", 128)), int(p.get("length", 500))
    burn = int(p.get("burn_in", 0))
    params = MGParams(**p.get("mg", {}))
    series = gen_mackey_glass_batch(tau, length + d, n, derive_seed(seed, 3), params)
    n_train = n // 2
    if p.get("standardize", True):
        mu, sd = series[:n_train].mean(), series[:n_train].std()
        series = (series - mu) / sd
    X = series[:, :length, None].astype(dtype)
    Y = series[:, d : d + length].astype(dtype)
    train = SequenceDataset(X[:n_train], Y[:n_train])
    Xt, Yt = X[n_train:], Y[n_train:]

    def loss(out, y):
        l, g = loss_mse(out[:, burn:, 0], y[:, burn:])
        full = np.zeros_like(out)
        full[:, burn:, 0] = g
        return l, full

    def evaluate(net, batch):
        pred = _predict(net, Xt, batch)[:, burn:, 0]
        tgt = Yt[:, burn:]
        return {"test_nrmse": metric_nrmse(pred, tgt), "test_mse": float(np.mean((pred - tgt) ** 2))}

    return Task("mackey_glass", 1, 1, "every", loss, evaluate, train=train)


def _classification_task(name, train: SequenceDataset, test: SequenceDataset, n_classes: int) -> Task:
    def evaluate(net, batch):
        logits = _predict(net, test.inputs, batch)
        loss, _ = loss_cross_entropy(logits, test.targets)
        return {"test_accuracy": accuracy(logits, test.targets), "test_loss": loss}

    return Task(name, train.inputs.shape[2], n_classes, "final", loss_cross_entropy, evaluate, train=train)


def _hateful8_task(cfg: ExperimentConfig, seed: int, dtype) -> Task:
    p = cfg.task_params
    L = int(p["noise_len"])
    Xtr, ytr = make_hateful8_dataset(L, int(p.get("train_per_class", 32)), derive_seed(seed, 3), dtype)
    Xte, yte = make_hateful8_dataset(L, int(p.get("test_per_class", 10)), derive_seed(seed, 4), dtype)
    return _classification_task("hateful8", SequenceDataset(Xtr, ytr), SequenceDataset(Xte, yte), 8)


@lru_cache(maxsize=4)
def _mnist_cached(data_dir, permuted, perm_seed, limit, vfrac, split_seed, dtype):
    return load_mnist_sequences(data_dir, permuted, perm_seed, vfrac, split_seed, limit, np.dtype(dtype))


def _mnist_task(cfg: ExperimentConfig, seed: int, dtype) -> Task:
    p = cfg.task_params
    data = _mnist_cached(p.get("data_dir"), cfg.task == "psmnist", int(p.get("perm_seed", 0)),
                         p.get("limit"), p.get("validation_fraction"), int(p.get("split_seed", 0)),
                         np.dtype(dtype).name)
    held_out = data.validation if data.validation is not None else data.test
    if held_out is None:
        raise FileNotFoundError("no held-out MNIST data: add test files or set validation_fraction")
    return _classification_task(cfg.task, data.train, held_out, 10)


_BUILDERS = {
    "adding": _adding_task,
    "mackey_glass": _mg_task,
    "hateful8": _hateful8_task,
    "smnist": _mnist_task,
    "psmnist": _mnist_task,
}


def build_task(cfg: ExperimentConfig, seed: int) -> Task:
    return _BUILDERS[cfg.task](cfg, seed, np.dtype(cfg.training.dtype))


def build_net_for(cfg: ExperimentConfig, task: Task, layers: list[LayerConfig], seed: int):
    tr = cfg.training
    return build_network(task.n_in, task.n_out, layers, tr.readout_mode, tr.dropout,
                         np.random.default_rng(derive_seed(seed, 0)), np.dtype(tr.dtype), tr.conv)


# --- training -------------------------------------------------------------------------


def _crossed(metric: str, value: float, target: float) -> bool:
    return value >= target if "accuracy" in metric else value <= target


def _train_step(net, state, task, X, y, rng) -> float:
    out, trace = net_forward(net, X, "train", rng)
    loss, g = task.loss(out, y)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    apply_update(net, net_backward(net, trace, g), state)
    return loss


def run_seed(cfg: ExperimentConfig, seed: int, return_net: bool = False):
    """Train one network; returns its RunRecord (and the net if requested)."""
    tr = cfg.training
    layers = resolve_layers(cfg)
    echo = cfg.to_dict()
    echo["layers"] = [dataclasses.asdict(lc) for lc in layers]
    echo["seeds"] = [seed]
    t0 = time.perf_counter()
    task = build_task(cfg, seed)
    if tr.readout_mode != task.readout_mode:
        log.warning("%s usually reads out at %s steps; config asks for %s", task.name, task.readout_mode, tr.readout_mode)
    net = build_net_for(cfg, task, layers, seed)
    record = RunRecord(cfg.task, seed, echo, [int(lc.k) for lc in layers], count_parameters(net))
    state = AdamState(lr=lr_at(tr.lr, 0, 1))
    drop_rng = np.random.default_rng(derive_seed(seed, 1))
    stop = tr.stop_metric
    try:
        if task.stream is not None:
            if not tr.steps:
                raise ValueError("stream tasks need training.steps")
            window: list[float] = []
            for step in range(1, tr.steps + 1):
                state.lr = lr_at(tr.lr, step - 1, tr.steps)
                X, y = task.stream(step)
                loss = _train_step(net, state, task, X, y, drop_rng)
                window.append(loss)
                if len(window) > tr.running_window:
                    window.pop(0)
                running = float(np.mean(window))
                record.log(step, "mse", loss)
                record.log(step, "running_mse", running)
                metrics = {"running_mse": running}
                if step % tr.eval_every == 0 or step == tr.steps:
                    for name, v in task.evaluate(net, tr.eval_batch).items():
                        record.log(step, name, v)
                        metrics[name] = v
                if stop and stop in metrics and _crossed(stop, metrics[stop], tr.stop_value):
                    break
        else:
            if not tr.epochs:
                raise ValueError("dataset tasks need training.epochs")
            batches = split_and_batch(task.train, tr.batch_size, derive_seed(seed, 2))
            for epoch in range(1, tr.epochs + 1):
                state.lr = lr_at(tr.lr, epoch - 1, tr.epochs)
                losses = [_train_step(net, state, task, X, y, drop_rng) for X, y in batches.epoch(epoch)]
                record.log(epoch, "train_loss", float(np.mean(losses)))
                record.log(epoch, "lr", state.lr)
                metrics = {}
                if epoch % tr.eval_every == 0 or epoch == tr.epochs:
                    metrics = task.evaluate(net, tr.eval_batch)
                    for name, v in metrics.items():
                        record.log(epoch, name, v)
                log.info("%s seed %d epoch %d loss %.4g %s", cfg.task, seed, epoch, np.mean(losses), metrics)
                if stop and stop in metrics and _crossed(stop, metrics[stop], tr.stop_value):
                    break
    except (DivergenceError, FloatingPointError) as exc:
        record.failed = True
        record.error = f"{type(exc).__name__}: {exc}"
        log.error("%s seed %d diverged: %s", cfg.task, seed, exc)
    record.wall_clock = time.perf_counter() - t0
    return (record, net) if return_net else record


def run_experiment(cfg: ExperimentConfig) -> list[RunRecord]:
    return [run_seed(cfg, s) for s in cfg.run_seeds()]


# --- aggregation and CSV ---------------------------------------------------------------


def aggregate(records: list[RunRecord], confidence: float = 0.95) -> list[SummaryRow]:
    """Mean and Student-t interval across seeds for every (task, step, metric).

    Points logged by only one seed (e.g. after others stopped early) get a
    NaN interval.
    """
    if len(records) < 2:
        raise ValueError("aggregate needs at least two records")
    groups: dict[tuple[str, int, str], list[float]] = {}
    for r in sorted(records, key=lambda r: (r.task, r.seed)):
        for step, metric, value in r.metrics:
            groups.setdefault((r.task, step, metric), []).append(value)
    rows = []
    for (task, step, metric), vals in sorted(groups.items()):
        v = np.sort(np.array(vals))  # order-free sum
        mean = float(np.mean(v))
        if len(v) < 2:
            lo = hi = math.nan
        else:
            half = stats.t.ppf(0.5 + confidence / 2, len(v) - 1) * np.std(v, ddof=1) / math.sqrt(len(v))
            lo, hi = mean - half, mean + half
        rows.append(SummaryRow(task, step, metric, len(v), mean, float(lo), float(hi)))
    return rows


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def export_csv(items: list[RunRecord] | list[SummaryRow], path: str | Path, configs: list[dict] | None = None) -> None:
    """Write records or summary rows as ``task,seed,step,metric,value,ci_low,ci_high``.

    Lines starting with ``#`` carry the resolved config of each run as JSON.
    Summary rows use ``seed=mean``. Empty ``ci_*`` fields mean "not applicable".
    """
    with open(path, "w", newline="") as fh:
        embedded = configs if configs is not None else [r.config | {"resolved_k": r.resolved_k, "parameter_count": r.parameter_count, "seed": r.seed, "failed": r.failed}
                                                        for r in items if isinstance(r, RunRecord)]
        for c in embedded:
            fh.write("# config " + json.dumps(c, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for it in items:
            if isinstance(it, RunRecord):
                for step, metric, value in it.metrics:
                    w.writerow([it.task, it.seed, step, metric, _fmt(value), "", ""])
            else:
                w.writerow([it.task, "mean", it.step, it.metric, _fmt(it.mean), _fmt(it.ci_low), _fmt(it.ci_high)])


def read_csv(path: str | Path) -> tuple[list[dict], list[dict]]:
    """Parse a file from :func:`export_csv`; returns ``(rows, configs)``."""
    configs, lines = [], []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# config "):
                configs.append(json.loads(line[len("# config "):]))
            elif not line.startswith("#"):
                lines.append(line)
    rows = []
    for row in csv.DictReader(lines):
        row["step"] = int(row["step"])
        for key in ("value", "ci_low", "ci_high"):
            row[key] = float(row[key]) if row[key] else math.nan
        rows.append(row)
    return rows, configs
