"""Command-line entry points.

Subcommands: ``gen`` (synthesize a dataset), ``prep`` (attach per-window
features), ``train`` (one run), ``sweep`` (multi-seed runs), ``ablate``
(toggle grid), ``eval`` (metrics for a checkpoint), ``report`` (summarize
saved logs).  Every config-consuming command accepts ``--config FILE`` plus
any number of ``--key=value`` overrides, and echoes the fully resolved
configuration before doing work.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed inputs), 3 numeric failure during optimization.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfg
from .data import (
    ContainerFormatError,
    generate_dataset,
    load_dataset,
    make_splits,
    save_dataset,
    split_sessions,
)
from .evaluation import (
    evaluate_params,
    run_ablation_grid,
    write_ablation_csv,
    write_confusion_csv,
    write_report_csv,
)
from .model import load_checkpoint, save_checkpoint
from .preprocessing import extract_features
from .training import LOG_COLUMNS, NumericError, run_seed_sweep, train_run

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    """Raised instead of argparse's SystemExit so main() owns the exit code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="timefuse", description=__doc__, add_help=True)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name: str, help_text: str, with_config: bool = True) -> _Parser:
        p = sub.add_parser(name, help=help_text)
        if with_config:
            p.add_argument("--config", default=None, help="key=value config file")
        return p

    p = add("gen", "generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("prep", "compute per-window features and store them in the containers")
    p.add_argument("--data", required=True, help="input dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument(
        "--drop-streams",
        action="store_true",
        help="store only features, dropping raw video/signal payloads",
    )

    p = add("train", "train a single model on a subject split")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--log", default=None, help="write per-epoch metrics CSV here")
    p.add_argument("--checkpoint", default=None, help="write trained parameters here")

    p = add("sweep", "train one run per seed and aggregate")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", default=None, help="write per-seed accuracies CSV here")

    p = add("ablate", "run the component-toggle grid")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="write the grid CSV here")

    p = add("eval", "evaluate a checkpoint on the test portion of a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="trained parameter file")
    p.add_argument("--out", default=None, help="directory for report and confusion CSVs")

    p = add("report", "summarize saved run artifacts", with_config=False)
    p.add_argument("--log", default=None, help="per-epoch metrics CSV from train")
    p.add_argument("--ablation", default=None, help="grid CSV from ablate")

    return parser


def _split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Separate ``--key=value`` config overrides from regular arguments."""
    known_flags = {
        "--config", "--out", "--data", "--log", "--checkpoint", "--ablation", "--drop-streams",
        "-h", "--help",
    }
    args: list[str] = []
    overrides: list[str] = []
    for item in argv:
        flag = item.split("=", 1)[0]
        if item.startswith("--") and "=" in item and flag not in known_flags:
            overrides.append(item[2:])
        else:
            args.append(item)
    return args, overrides


def _resolved(ns, overrides: list[str]) -> dict[str, object]:
    resolved = cfg.resolve_config(ns.config, overrides)
    print("# resolved configuration")
    print(cfg.format_config(resolved))
    print()
    return resolved


def _load_split(resolved, data_dir):
    sessions = load_dataset(data_dir)
    split = make_splits(sessions, str(resolved["split_mode"]), resolved["test_scenes"])
    return sessions, split


def _print_metrics(title: str, metrics: dict) -> None:
    print(title)
    for branch, tasks in sorted(metrics.items()):
        for task, values in sorted(tasks.items()):
            print(
                f"  {branch:>6}/{task:<6} accuracy {values['accuracy']:.4f}"
                f"  loss {values['loss']:.4f}"
            )


def _cmd_gen(ns, overrides) -> int:
    resolved = _resolved(ns, overrides)
    sessions = generate_dataset(cfg.generator_spec(resolved))
    out = save_dataset(sessions, ns.out)
    print(f"wrote {len(sessions)} sessions to {out}")
    return EXIT_OK


def _cmd_prep(ns, overrides) -> int:
    resolved = _resolved(ns, overrides)
    features = cfg.feature_config(resolved)
    sessions = load_dataset(ns.data)
    prepared = []
    for session in sessions:
        schedule = features.schedule_for(session.duration_s)
        visual, brain = extract_features(
            session,
            schedule,
            features.frames_per_window,
            features.visual_encoder(),
            features.brain_encoder(),
            band=(features.band_low_hz, features.band_high_hz),
            downsample_to=features.downsample_to_hz,
        )
        updated = replace(session, features_visual=visual, features_brain=brain)
        if ns.drop_streams:
            updated = replace(updated, video=None, signal=None)
        prepared.append(updated)
    out = save_dataset(prepared, ns.out)
    print(f"wrote {len(prepared)} sessions with features to {out}")
    return EXIT_OK


def _cmd_train(ns, overrides) -> int:
    resolved = _resolved(ns, overrides)
    sessions, split = _load_split(resolved, ns.data)
    result = train_run(
        sessions,
        split,
        cfg.model_config(resolved),
        cfg.train_config(resolved),
        cfg.feature_config(resolved),
        log_path=ns.log,
    )
    _print_metrics("final test metrics", result.final_test)
    if ns.log:
        print(f"wrote per-epoch log to {ns.log}")
    if ns.checkpoint:
        save_checkpoint(result.params, ns.checkpoint)
        print(f"wrote checkpoint to {ns.checkpoint}")
    return EXIT_OK


def _cmd_sweep(ns, overrides) -> int:
    resolved = _resolved(ns, overrides)
    sessions, split = _load_split(resolved, ns.data)
    seeds = list(resolved["seeds"])
    sweep = run_seed_sweep(
        sessions,
        split,
        cfg.model_config(resolved),
        cfg.train_config(resolved),
        seeds,
        cfg.feature_config(resolved),
    )
    print(f"seed sweep over {seeds}")
    for (branch, task), (mean, std) in sorted(sweep.summary.items()):
        print(f"  {branch:>6}/{task:<6} accuracy {mean:.4f} +/- {std:.4f}")
    if ns.out:
        rows = []
        for run in sweep.runs:
            for branch, tasks in run.final_test.items():
                for task, values in tasks.items():
                    rows.append(
                        {
                            "seed": run.seed,
                            "branch": branch,
                            "task": task,
                            "accuracy": values["accuracy"],
                            "loss": values["loss"],
                        }
                    )
        path = Path(ns.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("seed", "branch", "task", "accuracy", "loss"))
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote per-seed metrics to {path}")
    return EXIT_OK


def _cmd_ablate(ns, overrides) -> int:
    resolved = _resolved(ns, overrides)
    sessions, split = _load_split(resolved, ns.data)
    rows = run_ablation_grid(
        sessions,
        split,
        cfg.model_config(resolved),
        cfg.train_config(resolved),
        list(resolved["seeds"]),
        features=cfg.feature_config(resolved),
    )
    write_ablation_csv(rows, ns.out)
    for row in rows:
        if row["seed"] == "mean":
            print(
                f"  {row['cell']:<28} verb {row['verb_accuracy']:.4f}"
                f"  action {row['action_accuracy']:.4f}"
            )
    print(f"wrote ablation grid to {ns.out}")
    return EXIT_OK


def _cmd_eval(ns, overrides) -> int:
    resolved = _resolved(ns, overrides)
    params = load_checkpoint(ns.checkpoint)
    model_config = params.config
    sessions, split = _load_split(resolved, ns.data)
    _, _, test = split_sessions(sessions, split)
    report = evaluate_params(model_config, params, test, cfg.feature_config(resolved))
    for (branch, task), entry in sorted(report.entries.items()):
        print(f"  {branch:>6}/{task:<6} accuracy {entry.accuracy:.4f} on {entry.support} queries")
    if ns.out:
        out = Path(ns.out)
        write_report_csv(report, out / "report.csv")
        for branch, task in report.entries:
            write_confusion_csv(report, branch, task, out / f"confusion_{branch}_{task}.csv")
        print(f"wrote report and confusion tables to {out}")
    return EXIT_OK


def _summarize_log(path: str) -> None:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ContainerFormatError(f"log {path} is empty")
    if set(rows[0]) != set(LOG_COLUMNS):
        raise ContainerFormatError(f"log {path} does not have columns {LOG_COLUMNS}")
    final_epoch = max(int(r["epoch"]) for r in rows)
    print(f"training log {path}: {final_epoch} epochs")
    for split_name in ("train", "val"):
        for row in rows:
            if int(row["epoch"]) == final_epoch and row["split"] == split_name:
                print(
                    f"  epoch {final_epoch} {split_name:>5} {row['branch']:>6}/{row['task']:<6}"
                    f" accuracy {float(row['accuracy']):.4f} loss {float(row['loss']):.4f}"
                )


def _summarize_ablation(path: str) -> None:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ContainerFormatError(f"ablation table {path} is empty")
    print(f"ablation grid {path}")
    means = [r for r in rows if r["seed"] == "mean"]
    for row in means or rows:
        print(
            f"  {row['cell']:<28} verb {float(row['verb_accuracy']):.4f}"
            f"  action {float(row['action_accuracy']):.4f}"
        )


def _cmd_report(ns, _overrides) -> int:
    if not ns.log and not ns.ablation:
        raise _UsageError("timefuse report: provide --log and/or --ablation")
    if ns.log:
        _summarize_log(ns.log)
    if ns.ablation:
        _summarize_ablation(ns.ablation)
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "prep": _cmd_prep,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args, overrides = _split_overrides(argv)
        ns = parser.parse_args(args)
        if ns.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return _COMMANDS[ns.command](ns, overrides)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except cfg.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContainerFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
