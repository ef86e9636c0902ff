"""Aggregate a run directory into report tables."""
from __future__ import annotations

import csv
import math
from pathlib import Path

from .metrics import METRIC_NAMES, ForgettingUndefined, average, fmt, forgetting, matrices_from_rows, read_score_rows, to_points


class IncompleteRun(FileNotFoundError):
    """A run directory lacks artifacts needed for a report."""


REQUIRED = ("config.snapshot", "losses.csv", "scorematrix.csv", "vocab.tsv")


def missing_artifacts(run_dir: str | Path) -> list[str]:
    root = Path(run_dir)
    missing = [name for name in REQUIRED if not (root / name).exists()]
    if (root / "PARTIAL").exists():
        missing.append("(run aborted: PARTIAL marker present)")
    if not missing:
        checkpoints = sorted({cp for cp, *_ in read_score_rows(root / "scorematrix.csv")})
        if not checkpoints:
            missing.append("scorematrix.csv rows")
        for n in checkpoints:
            if not (root / "checkpoints" / f"task{n}.clvq").exists():
                missing.append(f"checkpoints/task{n}.clvq")
    return missing


def _tasks_in_order(rows) -> list[str]:
    return list(dict.fromkeys(task for _, task, _, _ in rows))


def _read_snapshot(path: Path) -> dict[str, str]:
    out = {}
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def run_label(run_dir: str | Path) -> str:
    snap = _read_snapshot(Path(run_dir) / "config.snapshot")
    mode = snap.get("train.mode", "continual")
    if mode != "continual":
        return mode
    parts = [n.upper() for n in ("er", "kd", "pro") if snap.get(f"train.{n}") == "true"]
    return "+".join(parts) if parts else "vanilla"


def report(run_dir: str | Path) -> str:
    """Write report.csv, summary.csv and forgetting_curve.csv; return a printable table.

    Text metrics are reported in points (x100), CIDEr in raw units.
    Forgetting is left blank when a run has a single checkpoint.
    """
    root = Path(run_dir)
    missing = missing_artifacts(root)
    if missing:
        raise IncompleteRun(f"{root}: incomplete run, missing " + ", ".join(missing))
    rows = read_score_rows(root / "scorematrix.csv")
    if not rows:
        raise ValueError(f"{root}: empty score matrix")
    tasks = _tasks_in_order(rows)
    mats = matrices_from_rows(rows, tasks)
    final = max(cp for cp, *_ in rows)

    with open(root / "report.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("checkpoint", "task", "metric", "value", "points"))
        for cp, task, metric, value in sorted(rows, key=lambda r: (r[0], tasks.index(r[1]), METRIC_NAMES.index(r[2]))):
            w.writerow((cp, task, metric, fmt(value), fmt(to_points(metric, value))))

    summary = []
    for metric in METRIC_NAMES:
        if metric not in mats:
            continue
        m = mats[metric]
        avg = to_points(metric, average(m))
        try:
            fg = to_points(metric, forgetting(m))
        except ForgettingUndefined:
            fg = math.nan
        summary.append((metric, avg, fg))
    with open(root / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "average", "forgetting"))
        for metric, avg, fg in summary:
            w.writerow((metric, fmt(avg), "" if math.isnan(fg) else fmt(fg)))

    bleu4 = mats.get("BLEU-4")
    with open(root / "forgetting_curve.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("checkpoint", "task", "bleu4_points"))
        if bleu4 is not None:
            for cp in bleu4.checkpoints:
                for j, task in enumerate(tasks, start=1):
                    if (cp, j) in bleu4.values:
                        w.writerow((cp, task, fmt(to_points("BLEU-4", bleu4.get(cp, j)))))

    lines = [f"run: {root}  ({run_label(root)}, final checkpoint {final})", ""]
    lines.append(f"{'metric':<8} {'average':>9} {'forgetting':>11}")
    for metric, avg, fg in summary:
        lines.append(f"{metric:<8} {avg:>9.2f} {'n/a' if math.isnan(fg) else f'{fg:.2f}':>11}")
    diag = root / "diagnostics.csv"
    if diag.exists():
        lines += ["", f"{'task':<12} {'entropy':>9} {'test_loss':>10}"]
        with open(diag, encoding="utf-8", newline="") as fh:
            for rec in csv.DictReader(fh):
                lines.append(f"{rec['task']:<12} {float(rec['entropy']):>9.4f} {float(rec['test_loss']):>10.4f}")
    return "\n".join(lines) + "\n"
