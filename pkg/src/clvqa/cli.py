"""Command line entry point: ``clvqa <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime abort.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .metrics import METRIC_NAMES, fmt, read_predictions, score_corpus, write_score_rows
from .model import TruncationError, Vocabulary, VocabularyMismatch
from .report import IncompleteRun, report
from .taskstream import TASKS, ParseError, StreamSizes, generate_stream, read_stream, write_stream
from .trainer import RuntimeAbort, evaluate, run

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ABORT = 0, 2, 3, 4

log = logging.getLogger("clvqa")


def _vocab_for(data_dir: Path, datasets) -> Vocabulary:
    path = data_dir / "vocab.tsv"
    return Vocabulary.read(path) if path.exists() else Vocabulary.from_datasets(datasets)


def cmd_gen_tasks(args) -> int:
    sizes = StreamSizes.per_task(args.size_per_task)
    datasets = generate_stream(sizes, args.seed)
    write_stream(datasets, args.out)
    for ds in datasets:
        print(f"{ds.task}: {len(ds.train)} train, {len(ds.val)} val, {len(ds.test)} test")
    return EXIT_OK


def cmd_train(args) -> int:
    if not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    data = args.data or cfg.data_dir
    if data is None:
        raise ConfigError("no dataset: set train.data in the config or pass --data")
    datasets = read_stream(data)
    est = run(cfg, datasets, run_dir=args.out, vocab=_vocab_for(Path(data), datasets))
    print(f"trained {cfg.label()} over {len(est.tasks_)} tasks, {len(est.loss_log_)} steps -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    data = Path(args.data)
    tasks = (args.task,) if args.task else TASKS
    datasets = read_stream(data, tasks)
    vocab_path = ckpt.parent / "vocab.tsv"
    vocab = Vocabulary.read(vocab_path) if vocab_path.exists() else _vocab_for(data, datasets)
    pred_dir = Path(args.predictions) if args.predictions else None
    if pred_dir is not None:
        pred_dir.mkdir(parents=True, exist_ok=True)
    rows = evaluate(ckpt, datasets, vocab, predictions_dir=pred_dir, gen_max_len=args.max_len)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_score_rows(args.out, rows)
    for cp, task, metric, value in rows:
        if metric == "BLEU-4":
            print(f"{task}: BLEU-4 {value:.4f}")
    return EXIT_OK


def cmd_score(args) -> int:
    rows = read_predictions(args.pred)
    if not rows:
        raise ParseError(f"{args.pred}: no predictions")
    scores = score_corpus([c.split() for _, c, _ in rows], [r.split() for _, _, r in rows])
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "value"))
        for m in METRIC_NAMES:
            w.writerow((m, fmt(scores[m])))
            print(f"{m:<8} {scores[m]:.6f}")
    return EXIT_OK


def cmd_report(args) -> int:
    sys.stdout.write(report(args.run))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clvqa", description="Continual driving-QA experiments on a synthetic task stream.")
    p.add_argument("-v", "--verbose", action="store_true", help="log memory and training events")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-tasks", help="generate the synthetic 4-task stream")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size-per-task", type=int, default=2000, help="training samples per task")
    g.set_defaults(func=cmd_gen_tasks)

    t = sub.add_parser("train", help="train according to a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--data", help="dataset directory (overrides train.data)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on test splits")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="score rows CSV")
    e.add_argument("--task", choices=TASKS)
    e.add_argument("--predictions", help="directory for per-task prediction TSVs")
    e.add_argument("--max-len", type=int, default=16)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="score a predictions TSV (id, candidate, reference)")
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    r = sub.add_parser("report", help="summarize a run directory")
    r.add_argument("--run", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ParseError, VocabularyMismatch, TruncationError, CheckpointError, IncompleteRun,
            ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
