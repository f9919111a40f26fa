"""Non-uniform error-feedback distributed SGD at desk scale.

Workers hold disjoint shards, compute analytic minibatch gradients, push
them through error-feedback compression, and the server applies the
weight-averaged sparse updates. Everything is driven by one master seed and
is bit-reproducible.
"""

from __future__ import annotations

import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import alloc as alloc_mod
from . import compress as comp
from . import data as data_mod
from .alloc import WeightVector
from .compress import AccordionState, SparseUpdate, accordion_select
from .errors import ConfigError

__all__ = [
    "Model",
    "TrainConfig",
    "WorkerState",
    "RunMetrics",
    "init_model",
    "local_gradient",
    "batch_loss",
    "evaluate",
    "run_dsgd",
    "run_simulation",
    "resolve_weights",
    "resolve_allocation",
    "traffic_report",
]

RELATIVE_STRATEGIES = {"dagc_r", "uniform_topk", "accordion_r", "manual"}
ABSOLUTE_STRATEGIES = {"dagc_a", "uniform_ht", "accordion_a"}
STRATEGIES = RELATIVE_STRATEGIES | ABSOLUTE_STRATEGIES


# ---------------------------------------------------------------------------
# Models with analytic gradients


@dataclass
class Model:
    """Flat-parameter classifier: softmax regression or one-hidden-layer MLP."""

    arch: str  # "softmax_regression" | "mlp1"
    num_features: int
    num_classes: int
    hidden: int
    params: np.ndarray  # flattened float64

    @property
    def dim(self) -> int:
        return self.params.size


def _param_count(arch: str, features: int, classes: int, hidden: int) -> int:
    if arch == "softmax_regression":
        return (features + 1) * classes
    if arch == "mlp1":
        return (features + 1) * hidden + (hidden + 1) * classes
    raise ValueError(f"unknown architecture {arch!r}")


def init_model(
    arch: str,
    num_features: int,
    num_classes: int,
    hidden: int = 32,
    rng: Optional[np.random.Generator] = None,
) -> Model:
    """Softmax regression starts at zero; the MLP needs random symmetry breaking."""
    d = _param_count(arch, num_features, num_classes, hidden)
    if arch == "softmax_regression":
        params = np.zeros(d)
    else:
        if rng is None:
            raise ValueError("mlp1 initialization requires an rng")
        params = rng.normal(0.0, 0.1, size=d)
    return Model(arch, num_features, num_classes, hidden, params)


def _unpack(m: Model):
    f, c, h = m.num_features, m.num_classes, m.hidden
    p = m.params
    if m.arch == "softmax_regression":
        w = p[: f * c].reshape(f, c)
        b = p[f * c :]
        return w, b
    w1 = p[: f * h].reshape(f, h)
    b1 = p[f * h : f * h + h]
    off = f * h + h
    w2 = p[off : off + h * c].reshape(h, c)
    b2 = p[off + h * c :]
    return w1, b1, w2, b2


def _logits(m: Model, x: np.ndarray) -> np.ndarray:
    if m.arch == "softmax_regression":
        w, b = _unpack(m)
        return x @ w + b
    w1, b1, w2, b2 = _unpack(m)
    return np.tanh(x @ w1 + b1) @ w2 + b2


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def batch_loss(m: Model, ds: data_mod.LabeledDataset, indices=None) -> float:
    """Mean cross-entropy over the given sample indices (default: all)."""
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices)
    z = _logits(m, ds.features[idx])
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(idx.size), ds.labels[idx]].mean())


def local_gradient(m: Model, ds: data_mod.LabeledDataset, indices) -> np.ndarray:
    """Analytic mean cross-entropy gradient over a minibatch, flattened."""
    idx = np.asarray(indices)
    if idx.size == 0:
        raise ValueError("batch must be non-empty")
    x = ds.features[idx]
    y = ds.labels[idx]
    if m.arch == "softmax_regression":
        probs = _softmax(_logits(m, x))
        probs[np.arange(idx.size), y] -= 1.0
        probs /= idx.size
        gw = x.T @ probs
        gb = probs.sum(axis=0)
        return np.concatenate([gw.ravel(), gb])
    w1, b1, w2, b2 = _unpack(m)
    hid = np.tanh(x @ w1 + b1)
    probs = _softmax(hid @ w2 + b2)
    probs[np.arange(idx.size), y] -= 1.0
    probs /= idx.size
    gw2 = hid.T @ probs
    gb2 = probs.sum(axis=0)
    dhid = (probs @ w2.T) * (1.0 - hid * hid)
    gw1 = x.T @ dhid
    gb1 = dhid.sum(axis=0)
    return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def evaluate(m: Model, test: data_mod.LabeledDataset) -> float:
    """Top-1 accuracy on the test set, as a fraction."""
    if len(test) == 0:
        raise ValueError("test set must be non-empty")
    if test.num_features != m.num_features:
        raise ValueError(
            f"dimension mismatch: model expects {m.num_features} features, "
            f"test set has {test.num_features}"
        )
    preds = _logits(m, test.features).argmax(axis=1)
    return float((preds == test.labels).mean())


# ---------------------------------------------------------------------------
# Run configuration


@dataclass
class TrainConfig:
    """Fully specified experiment; validated before anything runs."""

    # dataset
    dataset: str = "synthetic"           # "synthetic" | "idx"
    num_samples: int = 5000
    num_features: int = 50
    num_classes: int = 10
    centroid_scale: float = 3.0
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    test_fraction: float = 0.2
    # workers and weights (exactly one source)
    workers: int = 10
    skew_ratio: Optional[float] = None
    p_large: Optional[float] = None
    weights: Optional[list] = None
    alpha: float = 0.5
    # strategy (exactly one parameterization)
    strategy: str = "uniform_topk"
    mean_ratio: Optional[float] = None
    mean_threshold: Optional[float] = None
    manual_ratios: Optional[list] = None
    # model and optimizer
    model: str = "softmax_regression"
    hidden: int = 32
    learning_rate: float = 0.1
    batch_size: int = 32
    iterations: int = 1000
    eval_interval: int = 50
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigError(f"dataset must be synthetic or idx, got {self.dataset!r}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("dataset=idx requires idx_images and idx_labels paths")
        if self.workers < 2:
            raise ConfigError(f"workers must be >= 2, got {self.workers}")
        sources = [
            self.skew_ratio is not None,
            self.p_large is not None,
            self.weights is not None,
        ]
        if sum(sources) != 1:
            raise ConfigError(
                "exactly one of skew_ratio, p_large, weights must be set"
            )
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"strategy must be one of {sorted(STRATEGIES)}, got {self.strategy!r}"
            )
        if self.strategy == "manual":
            if not self.manual_ratios:
                raise ConfigError("strategy=manual requires manual_ratios")
            if len(self.manual_ratios) != self.workers:
                raise ConfigError("manual_ratios length must equal workers")
            if any(not 0.0 < r <= 1.0 for r in self.manual_ratios):
                raise ConfigError("manual_ratios entries must lie in (0, 1]")
        elif self.strategy in RELATIVE_STRATEGIES:
            if self.mean_ratio is None:
                raise ConfigError(f"strategy={self.strategy} requires mean_ratio")
            if not 0.0 < self.mean_ratio < 1.0:
                raise ConfigError(
                    f"mean_ratio must lie in (0, 1), got {self.mean_ratio!r}"
                )
        else:
            if self.mean_threshold is None:
                raise ConfigError(f"strategy={self.strategy} requires mean_threshold")
            if self.mean_threshold <= 0.0:
                raise ConfigError(
                    f"mean_threshold must be positive, got {self.mean_threshold!r}"
                )
        if self.model not in ("softmax_regression", "mlp1"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.learning_rate < 0.0:
            raise ConfigError("learning_rate must be non-negative")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        return self


# ---------------------------------------------------------------------------
# Worker-side state


class _ShardBatcher:
    """Sequential minibatches from a seeded per-epoch shuffle of one shard."""

    def __init__(self, shard: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.shard = shard
        self.batch_size = min(batch_size, shard.size)
        self.rng = rng
        self._order = rng.permutation(shard)
        self._pos = 0

    @property
    def epoch_len(self) -> int:
        return -(-self.shard.size // self.batch_size)

    def next_batch(self) -> np.ndarray:
        if self._pos >= self._order.size:
            self._order = self.rng.permutation(self.shard)
            self._pos = 0
        batch = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


@dataclass
class WorkerState:
    """One worker: its shard, feedback residual, and compression setting."""

    shard: np.ndarray
    weight: float
    error: np.ndarray
    kind: str                     # "topk" | "ht"
    param: float                  # current ratio or threshold
    batcher: _ShardBatcher
    rng: np.random.Generator
    accordion: Optional[AccordionState] = None
    accordion_params: Optional[tuple] = None   # (aggressive, conservative)
    epoch_norms: list = field(default_factory=list)

    def compressor(self):
        if self.kind == "topk":
            p = self.param
            return lambda v: comp.top_k(v, p)
        p = self.param
        return lambda v: comp.hard_threshold(v, p)


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class RunMetrics:
    """Evaluation rows plus full per-iteration traffic accounting."""

    iterations: list
    losses: list
    accuracies: list
    worker_elements: np.ndarray          # (evals, n) cumulative per worker
    elements_per_iteration: np.ndarray   # (T, n) realized nnz per iteration

    @property
    def num_workers(self) -> int:
        return self.elements_per_iteration.shape[1]

    def cumulative_totals(self) -> np.ndarray:
        return self.worker_elements.sum(axis=1)

    def to_csv(self) -> str:
        n = self.num_workers
        buf = io.StringIO()
        cols = ",".join(f"elements_w{i + 1}" for i in range(n))
        buf.write(f"iter,loss,acc,elements_total,{cols}\n")
        totals = self.cumulative_totals()
        for row, it in enumerate(self.iterations):
            per_worker = ",".join(str(int(v)) for v in self.worker_elements[row])
            buf.write(
                f"{it},{self.losses[row]:.12g},{self.accuracies[row]:.12g},"
                f"{int(totals[row])},{per_worker}\n"
            )
        return buf.getvalue()


def traffic_report(runs) -> dict:
    """Transmitted-element totals, per strategy and per worker.

    ``runs`` is either one :class:`RunMetrics` or a name -> RunMetrics
    mapping. When several relative-compressor runs share a budget, their
    per-iteration totals can be checked with :func:`assert_budget_parity`.
    """
    if isinstance(runs, RunMetrics):
        runs = {"run": runs}
    if not runs:
        raise ValueError("no metrics given")
    report = {}
    for name, m in runs.items():
        per_worker = m.elements_per_iteration.sum(axis=0)
        report[name] = {
            "total_elements": int(per_worker.sum()),
            "per_worker_elements": [int(v) for v in per_worker],
            "per_iteration_totals": m.elements_per_iteration.sum(axis=1),
        }
    return report


def assert_budget_parity(a: RunMetrics, b: RunMetrics) -> None:
    """Relative strategies under one budget may differ only by ceil rounding."""
    ta = a.elements_per_iteration.sum(axis=1)
    tb = b.elements_per_iteration.sum(axis=1)
    n = max(a.num_workers, b.num_workers)
    gap = np.abs(ta - tb).max()
    if gap > n:
        raise AssertionError(
            f"per-iteration totals diverge by {gap} elements (> {n})"
        )


# ---------------------------------------------------------------------------
# Setup helpers shared with the command-line layer


def resolve_weights(config: TrainConfig) -> WeightVector:
    """The worker weights implied by the config, from the master seed."""
    rng = _component_rng(config.seed, "weights")
    if config.skew_ratio is not None:
        return data_mod.skewed_weights(config.workers, config.skew_ratio, rng)
    if config.p_large is not None:
        return data_mod.dichotomous_weights(config.workers, config.p_large)
    return WeightVector(config.weights)


def resolve_allocation(config: TrainConfig, w: Optional[WeightVector] = None):
    """Static per-worker compressor parameters for non-adaptive strategies.

    Returns ``("ratio", values)`` or ``("threshold", values)``; adaptive
    strategies start from their aggressive setting.
    """
    if w is None:
        w = resolve_weights(config)
    s = config.strategy
    if s == "dagc_r":
        return "ratio", list(alloc_mod.dagc_r(w, config.mean_ratio).ratios)
    if s == "uniform_topk":
        return "ratio", [config.mean_ratio] * config.workers
    if s == "manual":
        return "ratio", [float(r) for r in config.manual_ratios]
    if s == "accordion_r":
        lo, _ = _accordion_ratio_bounds(config.mean_ratio)
        return "ratio", [lo] * config.workers
    if s == "dagc_a":
        return "threshold", list(alloc_mod.dagc_a(w, config.mean_threshold).thresholds)
    if s == "uniform_ht":
        return "threshold", [config.mean_threshold] * config.workers
    # accordion_a
    _, hi = _accordion_threshold_bounds(config.mean_threshold)
    return "threshold", [hi] * config.workers


def _accordion_ratio_bounds(mean_ratio: float) -> tuple[float, float]:
    # symmetric decade around the uniform setting, clipped to (0, 1]
    return mean_ratio / 10.0, min(10.0 * mean_ratio, 1.0)


def _accordion_threshold_bounds(mean_threshold: float) -> tuple[float, float]:
    return mean_threshold / 10.0, 10.0 * mean_threshold


def _component_rng(seed: int, label: str) -> np.random.Generator:
    digest = np.frombuffer(label.encode(), dtype=np.uint8)
    return np.random.default_rng(
        np.random.SeedSequence([seed, *digest.tolist()])
    )


def _build_datasets(config: TrainConfig):
    if config.dataset == "synthetic":
        rng = _component_rng(config.seed, "dataset")
        full = data_mod.synthetic_classification(
            config.num_samples,
            config.num_features,
            config.num_classes,
            rng,
            centroid_scale=config.centroid_scale,
        )
    else:
        full = data_mod.load_idx(config.idx_images, config.idx_labels)
    split_rng = _component_rng(config.seed, "split")
    order = split_rng.permutation(len(full))
    test_count = max(1, round(config.test_fraction * len(full)))
    test_idx, train_idx = order[:test_count], order[test_count:]
    train = data_mod.LabeledDataset(
        full.features[train_idx], full.labels[train_idx], full.num_classes
    )
    test = data_mod.LabeledDataset(
        full.features[test_idx], full.labels[test_idx], full.num_classes
    )
    return train, test


# ---------------------------------------------------------------------------
# The simulation loop


def run_dsgd(config: TrainConfig) -> RunMetrics:
    """End-to-end run from a validated config; deterministic per master seed."""
    config.validate()
    w = resolve_weights(config)
    train_ds, test_ds = _build_datasets(config)
    partition = data_mod.dirichlet_label_partition(
        train_ds, w, config.alpha, _component_rng(config.seed, "partition")
    )
    kind, params = resolve_allocation(config, w)
    model = init_model(
        config.model,
        train_ds.num_features,
        train_ds.num_classes,
        hidden=config.hidden,
        rng=_component_rng(config.seed, "model"),
    )
    accordion = None
    if config.strategy == "accordion_r":
        accordion = _accordion_ratio_bounds(config.mean_ratio)
    elif config.strategy == "accordion_a":
        hi_lo = _accordion_threshold_bounds(config.mean_threshold)
        accordion = (hi_lo[1], hi_lo[0])  # aggressive = high threshold
    return run_simulation(
        model,
        train_ds,
        test_ds,
        partition.shards,
        w.as_array(),
        kind="topk" if kind == "ratio" else "ht",
        params=params,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        iterations=config.iterations,
        eval_interval=config.eval_interval,
        seed=config.seed,
        accordion_params=accordion,
    )


def run_simulation(
    model: Model,
    train_ds: data_mod.LabeledDataset,
    test_ds: data_mod.LabeledDataset,
    shards,
    weights,
    kind: str,
    params,
    learning_rate: float,
    batch_size: int,
    iterations: int,
    eval_interval: int,
    seed: int,
    accordion_params: Optional[tuple] = None,
) -> RunMetrics:
    """The iteration loop, usable directly by tests with prebuilt pieces.

    ``accordion_params`` is ``(aggressive, conservative)``; when given, every
    worker re-selects its parameter at its local epoch boundaries from the
    mean gradient norm of the finished epoch.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n = len(shards)
    d = model.dim
    workers = []
    for i in range(n):
        shard = np.asarray(shards[i], dtype=np.int64)
        wrng = _component_rng(seed, f"worker-{i}")
        state = WorkerState(
            shard=shard,
            weight=float(weights[i]),
            error=np.zeros(d),
            kind=kind,
            param=float(params[i]),
            batcher=_ShardBatcher(shard, batch_size, wrng),
            rng=wrng,
            accordion=AccordionState() if accordion_params else None,
            accordion_params=accordion_params,
        )
        workers.append(state)

    threads = int(os.environ.get("DAGC_THREADS", "1") or "1")
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    eval_iters: list[int] = []
    losses: list[float] = []
    accuracies: list[float] = []
    worker_elem_rows: list[np.ndarray] = []
    per_iter = np.zeros((iterations, n), dtype=np.int64)
    cumulative = np.zeros(n, dtype=np.int64)

    def worker_step(state: WorkerState) -> SparseUpdate:
        batch = state.batcher.next_batch()
        g = local_gradient(model, train_ds, batch)
        if state.accordion is not None:
            state.epoch_norms.append(float(np.linalg.norm(g)))
            if len(state.epoch_norms) >= state.batcher.epoch_len:
                mean_norm = float(np.mean(state.epoch_norms))
                state.epoch_norms.clear()
                aggressive, conservative = state.accordion_params
                state.param, state.accordion = accordion_select(
                    state.accordion, mean_norm, aggressive, conservative
                )
        update, state.error = comp.compress_with_feedback(
            state.error, g, state.compressor()
        )
        return update

    try:
        for t in range(iterations):
            if pool is not None:
                updates = list(pool.map(worker_step, workers))
            else:
                updates = [worker_step(state) for state in workers]
            # deterministic reduce: fixed worker order regardless of completion
            step = np.zeros(d)
            for i, update in enumerate(updates):
                step[update.indices] += weights[i] * update.values
                per_iter[t, i] = update.nnz
            cumulative += per_iter[t]
            model.params -= learning_rate * step
            if (t + 1) % eval_interval == 0 or t == iterations - 1:
                if not eval_iters or eval_iters[-1] != t + 1:
                    eval_iters.append(t + 1)
                    losses.append(batch_loss(model, train_ds))
                    accuracies.append(evaluate(model, test_ds))
                    worker_elem_rows.append(cumulative.copy())
    finally:
        if pool is not None:
            pool.shutdown()

    return RunMetrics(
        iterations=eval_iters,
        losses=losses,
        accuracies=accuracies,
        worker_elements=np.vstack(worker_elem_rows),
        elements_per_iteration=per_iter,
    )
