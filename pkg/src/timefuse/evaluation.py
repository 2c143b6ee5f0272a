"""Metrics, evaluation reports and the toggle-ablation harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import model as m
from .autodiff import no_grad
from .data import Session, SplitSpec
from .model import ModelConfig, ModelParams
from .preprocessing import FeatureConfig
from .timeline import ACTION_NAMES, VERB_MAJOR_CLASS, VERB_NAMES
from .training import TrainConfig, aggregate_seed_metrics, prepare_session, train_run

__all__ = [
    "AblationCell",
    "BranchTaskReport",
    "EvalReport",
    "confusion_matrix",
    "default_ablation_grid",
    "evaluate_params",
    "per_class_accuracy",
    "run_ablation_grid",
    "top1_accuracy",
    "verb_display_order",
]


# ---------------------------------------------------------------------------
# Metrics.  Background-labeled queries (id < 0) are excluded everywhere.
# ---------------------------------------------------------------------------


def _check_pair(predictions: np.ndarray, labels: np.ndarray, classes: int):
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if predictions.shape != labels.shape:
        raise ValueError(
            f"predictions ({predictions.shape}) and labels ({labels.shape}) differ in length"
        )
    if np.any(predictions >= classes) or np.any(predictions < 0):
        raise ValueError(f"prediction id outside [0, {classes})")
    if np.any(labels >= classes):
        raise ValueError(f"label id outside [-1, {classes})")
    mask = labels >= 0
    return predictions[mask], labels[mask]


def top1_accuracy(predictions: np.ndarray, labels: np.ndarray, classes: int) -> float:
    """Fraction of non-background labels predicted exactly."""
    predictions, labels = _check_pair(predictions, labels, classes)
    if labels.size == 0:
        return float("nan")
    return float((predictions == labels).mean())


def confusion_matrix(
    predictions: np.ndarray, labels: np.ndarray, classes: int, normalize: bool = True
) -> np.ndarray:
    """(classes, classes) confusion counts, rows = true class, optionally row-normalized."""
    predictions, labels = _check_pair(predictions, labels, classes)
    counts = np.zeros((classes, classes), dtype=np.float64)
    np.add.at(counts, (labels, predictions), 1.0)
    if not normalize:
        return counts
    support = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        normed = np.where(support > 0, counts / support, 0.0)
    return normed


def per_class_accuracy(predictions: np.ndarray, labels: np.ndarray, classes: int) -> np.ndarray:
    """Diagonal of the row-normalized confusion matrix (0 for absent classes)."""
    return np.diag(confusion_matrix(predictions, labels, classes, normalize=True))


def verb_display_order() -> list[int]:
    """Verb ids ordered by display cluster: work/play first, learn/consume second."""
    first = [v for v in range(len(VERB_NAMES)) if VERB_MAJOR_CLASS[v] in ("work", "play")]
    second = [v for v in range(len(VERB_NAMES)) if VERB_MAJOR_CLASS[v] in ("learn", "consume")]
    return first + second


# ---------------------------------------------------------------------------
# Whole-split evaluation on trained parameters.
# ---------------------------------------------------------------------------


@dataclass
class BranchTaskReport:
    accuracy: float
    confusion: np.ndarray
    per_class: np.ndarray
    support: int


@dataclass
class EvalReport:
    """Per-(branch, task) metrics over one session list."""

    entries: dict[tuple[str, str], BranchTaskReport]

    def accuracy(self, branch: str, task: str) -> float:
        return self.entries[(branch, task)].accuracy


def evaluate_params(
    config: ModelConfig,
    params: ModelParams,
    sessions: list[Session],
    features: FeatureConfig | None = None,
) -> EvalReport:
    """Predict every query of every session and assemble the report.

    The headline accuracy and the confusion-derived accuracy are computed by
    two separate paths and cross-checked on every call.
    """
    features = features or FeatureConfig()
    predictions: dict[tuple[str, str], list[np.ndarray]] = {}
    labels: dict[str, list[np.ndarray]] = {task: [] for task in m.TASKS}
    prepared = [prepare_session(s, features, config.query_count) for s in sessions]
    with no_grad():
        for chunk_start in range(0, len(prepared), 8):
            chunk = prepared[chunk_start : chunk_start + 8]
            _, logits_map = m.forward_batch(
                config, params, [(p.visual, p.brain, p.windows, p.queries) for p in chunk]
            )
            for task in m.TASKS:
                labels[task].extend(p.labels[task] for p in chunk)
            for branch in config.branches:
                for task in m.TASKS:
                    probs = logits_map[branch][task]["probs"]
                    for row, _ in enumerate(chunk):
                        predictions.setdefault((branch, task), []).append(probs[row].argmax(axis=-1))

    entries: dict[tuple[str, str], BranchTaskReport] = {}
    for branch in config.branches:
        for task in m.TASKS:
            classes = config.class_count(task)
            pred = np.concatenate(predictions[(branch, task)])
            true = np.concatenate(labels[task])
            accuracy = top1_accuracy(pred, true, classes)
            counts = confusion_matrix(pred, true, classes, normalize=False)
            support = int(counts.sum())
            if support:
                from_counts = float(np.trace(counts) / support)
                if not np.isclose(accuracy, from_counts, rtol=0.0, atol=1e-12):
                    raise AssertionError(
                        f"metric paths disagree: top1 {accuracy} vs confusion {from_counts}"
                    )
            entries[(branch, task)] = BranchTaskReport(
                accuracy=accuracy,
                confusion=confusion_matrix(pred, true, classes, normalize=True),
                per_class=per_class_accuracy(pred, true, classes),
                support=support,
            )
    return EvalReport(entries=entries)


def report_to_rows(report: EvalReport) -> list[dict]:
    rows = []
    for (branch, task), entry in sorted(report.entries.items()):
        rows.append(
            {
                "branch": branch,
                "task": task,
                "accuracy": entry.accuracy,
                "support": entry.support,
            }
        )
    return rows


def write_report_csv(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("branch", "task", "accuracy", "support"))
        writer.writeheader()
        writer.writerows(report_to_rows(report))


def write_confusion_csv(report: EvalReport, branch: str, task: str, path) -> None:
    """Row-normalized confusion matrix with named classes.

    Verb rows/columns are ordered by display cluster (work/play, then
    learn/consume); actions keep catalog order.
    """
    entry = report.entries[(branch, task)]
    names = VERB_NAMES if task == "verb" else ACTION_NAMES
    order = verb_display_order() if task == "verb" else list(range(len(names)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + [names[c] for c in order])
        for r in order:
            writer.writerow([names[r]] + [f"{entry.confusion[r, c]:.6f}" for c in order])


# ---------------------------------------------------------------------------
# Ablation grid.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationCell:
    """One column of the toggle grid.

    ``use_modality_embedding`` must be ``None`` outside temporal fusion: the
    modality embedding does not exist there, and a cell claiming to toggle it
    would silently test nothing.
    """

    fusion: str
    use_embedding_layer: bool
    use_interval_mlp: bool
    use_modality_embedding: bool | None = None

    def __post_init__(self):
        if self.fusion not in m.FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.fusion != "temporal" and self.use_modality_embedding is not None:
            raise ValueError(
                f"config error: use_modality_embedding is not meaningful for {self.fusion!r} "
                "fusion; the offending toggle is use_modality_embedding (pass None)"
            )
        if self.fusion == "temporal" and self.use_modality_embedding is None:
            raise ValueError("temporal cells must set use_modality_embedding explicitly")

    def label(self) -> str:
        flags = f"g={'+' if self.use_embedding_layer else '-'},I={'+' if self.use_interval_mlp else '-'}"
        if self.fusion == "temporal":
            flags += f",m={'+' if self.use_modality_embedding else '-'}"
        return f"{self.fusion}[{flags}]"


def default_ablation_grid() -> list[AblationCell]:
    """The 13-cell toggle grid: 4 brain-only, 4 visual-only, 5 fused columns."""
    cells: list[AblationCell] = []
    toggle_pairs = [(False, False), (True, False), (False, True), (True, True)]
    for fusion in ("brain_only", "visual_only"):
        for g, i in toggle_pairs:
            cells.append(AblationCell(fusion=fusion, use_embedding_layer=g, use_interval_mlp=i))
    fused = [
        (False, False, False),
        (True, False, False),
        (False, True, False),
        (False, False, True),
        (True, True, True),
    ]
    for g, i, mm in fused:
        cells.append(
            AblationCell(
                fusion="temporal", use_embedding_layer=g, use_interval_mlp=i, use_modality_embedding=mm
            )
        )
    return cells


def _cell_config(base: ModelConfig, cell: AblationCell) -> ModelConfig:
    return replace(
        base,
        fusion=cell.fusion,
        use_embedding_layer=cell.use_embedding_layer,
        use_interval_mlp=cell.use_interval_mlp,
        use_modality_embedding=bool(cell.use_modality_embedding),
    )


def run_ablation_grid(
    sessions: list[Session],
    split: SplitSpec,
    base_config: ModelConfig,
    train_config: TrainConfig,
    seeds: list[int],
    grid: list[AblationCell] | None = None,
    features: FeatureConfig | None = None,
    headline_branch_for: dict[str, str] | None = None,
) -> list[dict]:
    """Train every grid cell for every seed; emit per-run rows plus mean/std rows.

    The headline accuracy of fused cells is read from the visual branch;
    unimodal cells report their own branch.
    """
    grid = grid if grid is not None else default_ablation_grid()
    if len(seeds) < 1:
        raise ValueError("ablation needs at least one seed")
    rows: list[dict] = []
    for cell in grid:
        config = _cell_config(base_config, cell)
        headline = "brain" if cell.fusion == "brain_only" else "visual"
        if headline_branch_for and cell.fusion in headline_branch_for:
            headline = headline_branch_for[cell.fusion]
        per_seed: dict[str, list[float]] = {"verb": [], "action": []}
        for seed in seeds:
            cfg = replace(train_config, seed=seed)
            result = train_run(sessions, split, config, cfg, features)
            row = {
                "cell": cell.label(),
                "fusion": cell.fusion,
                "embedding_layer": "+" if cell.use_embedding_layer else "-",
                "interval_mlp": "+" if cell.use_interval_mlp else "-",
                "modality_embedding": (
                    ("+" if cell.use_modality_embedding else "-")
                    if cell.fusion == "temporal"
                    else "n/a"
                ),
                "seed": seed,
                "verb_accuracy": result.final_accuracy(headline, "verb"),
                "action_accuracy": result.final_accuracy(headline, "action"),
            }
            rows.append(row)
            per_seed["verb"].append(row["verb_accuracy"])
            per_seed["action"].append(row["action_accuracy"])
        if len(seeds) >= 2:
            for stat_index, stat in enumerate(("mean", "std")):
                rows.append(
                    {
                        "cell": cell.label(),
                        "fusion": cell.fusion,
                        "embedding_layer": "+" if cell.use_embedding_layer else "-",
                        "interval_mlp": "+" if cell.use_interval_mlp else "-",
                        "modality_embedding": (
                            ("+" if cell.use_modality_embedding else "-")
                            if cell.fusion == "temporal"
                            else "n/a"
                        ),
                        "seed": stat,
                        "verb_accuracy": aggregate_seed_metrics(per_seed["verb"])[stat_index],
                        "action_accuracy": aggregate_seed_metrics(per_seed["action"])[stat_index],
                    }
                )
    return rows


ABLATION_COLUMNS = (
    "cell",
    "fusion",
    "embedding_layer",
    "interval_mlp",
    "modality_embedding",
    "seed",
    "verb_accuracy",
    "action_accuracy",
)


def write_ablation_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
