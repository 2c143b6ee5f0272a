"""Optimization loop, seed sweeps and training logs.

Runs are bit-for-bit deterministic for a given seed on one platform: every
random draw (parameter init, epoch shuffles) comes from generators seeded by
the run seed, and sessions are visited in a fixed order within each batch.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import model as m
from .autodiff import Tensor, no_grad
from .data import Session, SplitSpec, split_sessions
from .model import ModelConfig, ModelParams
from .preprocessing import FeatureConfig, extract_features
from .timeline import QuerySchedule, assign_query_labels

__all__ = [
    "NumericError",
    "RunResult",
    "SweepResult",
    "TrainConfig",
    "aggregate_seed_metrics",
    "backward",
    "fit_params",
    "prepare_session",
    "run_seed_sweep",
    "train_run",
]

logger = logging.getLogger(__name__)

_OPTIMIZERS = ("sgd", "adam")

LOG_COLUMNS = ("epoch", "split", "task", "branch", "loss", "accuracy")


class NumericError(ArithmeticError):
    """Raised when training produces a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters for one run."""

    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    brain_loss_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        canonical = "adam" if self.optimizer == "adaptive-moment" else self.optimizer
        if canonical not in _OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {_OPTIMIZERS}, got {self.optimizer!r}")
        object.__setattr__(self, "optimizer", canonical)
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.brain_loss_weight < 0:
            raise ValueError("brain_loss_weight must be >= 0")


def backward(params: ModelParams, loss: Tensor) -> dict[str, np.ndarray]:
    """Backpropagate ``loss`` and return per-group gradients.

    Groups that did not participate in the forward pass (a disabled branch,
    a zero-weighted loss term) come back as exact zeros.
    """
    loss.backward()
    grads = {}
    for name, tensor in params.tensors.items():
        grads[name] = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
    return grads


class _Sgd:
    def __init__(self, config: TrainConfig):
        self.lr = config.learning_rate

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        for name, tensor in params.tensors.items():
            tensor.data = tensor.data - self.lr * grads[name]


class _Adam:
    def __init__(self, config: TrainConfig):
        self.lr = config.learning_rate
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.epsilon
        self.steps = 0
        self.mean: dict[str, np.ndarray] = {}
        self.var: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        self.steps += 1
        for name, tensor in params.tensors.items():
            grad = grads[name]
            mean = self.mean.get(name)
            var = self.var.get(name)
            if mean is None:
                mean = np.zeros_like(tensor.data)
                var = np.zeros_like(tensor.data)
            mean = self.beta1 * mean + (1.0 - self.beta1) * grad
            var = self.beta2 * var + (1.0 - self.beta2) * grad * grad
            self.mean[name], self.var[name] = mean, var
            mean_hat = mean / (1.0 - self.beta1**self.steps)
            var_hat = var / (1.0 - self.beta2**self.steps)
            tensor.data = tensor.data - self.lr * mean_hat / (np.sqrt(var_hat) + self.eps)


def _make_optimizer(config: TrainConfig):
    return _Adam(config) if config.optimizer == "adam" else _Sgd(config)


# ---------------------------------------------------------------------------
# Session preparation: features + query labels, computed once per run.
# ---------------------------------------------------------------------------


@dataclass
class PreparedSession:
    """Feature matrices, schedules and per-query labels for one session."""

    session: Session
    visual: np.ndarray
    brain: np.ndarray
    windows: object
    queries: QuerySchedule
    labels: dict[str, np.ndarray]


def prepare_session(session: Session, features: FeatureConfig, query_count: int) -> PreparedSession:
    schedule = features.schedule_for(session.duration_s)
    band = (features.band_low_hz, features.band_high_hz)
    visual, brain = extract_features(
        session,
        schedule,
        features.frames_per_window,
        features.visual_encoder(),
        features.brain_encoder(),
        band=band,
        downsample_to=features.downsample_to_hz,
    )
    queries = QuerySchedule(query_count=query_count, duration_ms=session.timeline.duration_ms)
    assigned = assign_query_labels(session.labels, queries)
    labels = {
        "verb": np.array([verb for verb, _ in assigned], dtype=np.int64),
        "action": np.array([action for _, action in assigned], dtype=np.int64),
    }
    return PreparedSession(
        session=session,
        visual=visual.vectors.astype(np.float64),
        brain=brain.vectors.astype(np.float64),
        windows=schedule,
        queries=queries,
        labels=labels,
    )


def _batch_inputs(prepared: list[PreparedSession]):
    return [(p.visual, p.brain, p.windows, p.queries) for p in prepared]


def _stack_labels(prepared: list[PreparedSession]) -> dict[str, np.ndarray]:
    return {
        task: np.stack([p.labels[task] for p in prepared], axis=0) for task in m.TASKS
    }


def _evaluate_split(
    config: ModelConfig,
    params: ModelParams,
    prepared: list[PreparedSession],
    brain_loss_weight: float,
) -> dict[str, dict[str, dict[str, float]]]:
    """Loss and accuracy per (branch, task) over one split, forward-only."""
    stats: dict[str, dict[str, dict[str, float]]] = {
        branch: {task: {"loss": 0.0, "correct": 0.0, "total": 0.0} for task in m.TASKS}
        for branch in config.branches
    }
    with no_grad():
        for start in range(0, len(prepared), 8):
            chunk = prepared[start : start + 8]
            _, logits_map = m.forward_batch(config, params, _batch_inputs(chunk))
            labels = _stack_labels(chunk)
            result = m.sequence_loss(config, logits_map, labels, brain_loss_weight)
            for branch in config.branches:
                for task in m.TASKS:
                    mask = labels[task] >= 0
                    if not mask.any():
                        continue
                    probs = logits_map[branch][task]["probs"]
                    pred = probs.argmax(axis=-1)
                    cell = stats[branch][task]
                    cell["correct"] += float((pred[mask] == labels[task][mask]).sum())
                    cell["total"] += float(mask.sum())
                    cell["loss"] += result.task_values[branch].get(task, 0.0) * float(mask.sum())
    out: dict[str, dict[str, dict[str, float]]] = {}
    for branch in config.branches:
        out[branch] = {}
        for task in m.TASKS:
            cell = stats[branch][task]
            total = cell["total"]
            out[branch][task] = {
                "loss": cell["loss"] / total if total else math.nan,
                "accuracy": cell["correct"] / total if total else math.nan,
            }
    return out


@dataclass
class RunResult:
    """History and final metrics of one training run."""

    seed: int
    history: list[dict]
    final_test: dict[str, dict[str, dict[str, float]]]
    params: ModelParams

    def final_accuracy(self, branch: str, task: str) -> float:
        return self.final_test[branch][task]["accuracy"]


def _log_rows(history_entry: dict, split_name: str, metrics: dict) -> list[dict]:
    rows = []
    for branch, tasks in metrics.items():
        for task, values in tasks.items():
            rows.append(
                {
                    "epoch": history_entry["epoch"],
                    "split": split_name,
                    "task": task,
                    "branch": branch,
                    "loss": values["loss"],
                    "accuracy": values["accuracy"],
                }
            )
    return rows


def _train_epoch(
    model_config: ModelConfig,
    params: ModelParams,
    prepared: list[PreparedSession],
    train_config: TrainConfig,
    optimizer,
    shuffle_rng: np.random.Generator,
    epoch: int,
) -> None:
    """One pass over ``prepared`` in shuffled batches, updating ``params``."""
    order = shuffle_rng.permutation(len(prepared))
    for start in range(0, len(order), train_config.batch_size):
        batch = [prepared[i] for i in order[start : start + train_config.batch_size]]
        params.zero_grad()
        _, logits_map = m.forward_batch(model_config, params, _batch_inputs(batch))
        result = m.sequence_loss(
            model_config, logits_map, _stack_labels(batch), train_config.brain_loss_weight
        )
        loss_value = float(result.total.data)
        if not math.isfinite(loss_value):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        if result.total.requires_grad:
            grads = backward(params, result.total)
            optimizer.step(params, grads)


def _shuffle_rng(train_config: TrainConfig) -> np.random.Generator:
    return np.random.default_rng([int(train_config.seed) & (2**63 - 1), 0xD1CE])


def fit_params(
    prepared: list[PreparedSession],
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> ModelParams:
    """Train fresh parameters on prepared sessions, without splits or logging."""
    if not prepared:
        raise ValueError("cannot fit on an empty session list")
    params = ModelParams.initialize(model_config, seed=train_config.seed)
    optimizer = _make_optimizer(train_config)
    shuffle_rng = _shuffle_rng(train_config)
    for epoch in range(1, train_config.epochs + 1):
        _train_epoch(model_config, params, prepared, train_config, optimizer, shuffle_rng, epoch)
    return params


def train_run(
    sessions: list[Session],
    split: SplitSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    features: FeatureConfig | None = None,
    log_path=None,
) -> RunResult:
    """Train one model on a split; deterministic for a given seed.

    Sessions are padded per batch and masked in attention and loss,
    so variable durations (hence variable window counts) batch cleanly.
    """
    features = features or FeatureConfig()
    train, val, test = split_sessions(sessions, split)
    prepared = {
        "train": [prepare_session(s, features, model_config.query_count) for s in train],
        "val": [prepare_session(s, features, model_config.query_count) for s in val],
        "test": [prepare_session(s, features, model_config.query_count) for s in test],
    }

    params = ModelParams.initialize(model_config, seed=train_config.seed)
    optimizer = _make_optimizer(train_config)
    shuffle_rng = _shuffle_rng(train_config)

    history: list[dict] = []
    log_rows: list[dict] = []
    for epoch in range(1, train_config.epochs + 1):
        _train_epoch(
            model_config, params, prepared["train"], train_config, optimizer, shuffle_rng, epoch
        )

        entry = {"epoch": epoch}
        for split_name in ("train", "val"):
            metrics = _evaluate_split(
                model_config, params, prepared[split_name], train_config.brain_loss_weight
            )
            entry[split_name] = metrics
            log_rows.extend(_log_rows(entry, split_name, metrics))
        history.append(entry)

    final_test = _evaluate_split(
        model_config, params, prepared["test"], train_config.brain_loss_weight
    )
    if log_path is not None:
        _write_log(log_path, log_rows)
    return RunResult(seed=train_config.seed, history=history, final_test=final_test, params=params)


def _write_log(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Seed sweeps.
# ---------------------------------------------------------------------------


def aggregate_seed_metrics(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1) of per-seed metrics."""
    if len(values) < 2:
        raise ValueError("aggregation needs at least 2 seeds")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1))


@dataclass
class SweepResult:
    """Per-seed results plus mean/std summaries keyed by (branch, task)."""

    runs: list[RunResult]
    summary: dict[tuple[str, str], tuple[float, float]]


def run_seed_sweep(
    sessions: list[Session],
    split: SplitSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds: list[int],
    features: FeatureConfig | None = None,
) -> SweepResult:
    """Train once per seed and aggregate final test accuracies."""
    if len(seeds) < 2:
        raise ValueError(f"a seed sweep needs at least 2 seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        import warnings

        warnings.warn("duplicate seeds in sweep; their runs will be identical", stacklevel=2)
    runs = []
    for seed in seeds:
        runs.append(train_run(sessions, split, model_config, replace(train_config, seed=seed), features))
    summary = {}
    for branch in model_config.branches:
        for task in m.TASKS:
            summary[(branch, task)] = aggregate_seed_metrics(
                [run.final_accuracy(branch, task) for run in runs]
            )
    return SweepResult(runs=runs, summary=summary)
