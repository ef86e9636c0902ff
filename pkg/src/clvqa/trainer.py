"""Continual training loop, baselines, evaluation and run artifacts.

Run directory layout::

    config.snapshot        resolved configuration (key = value)
    vocab.tsv              token<TAB>id
    losses.csv             one row per optimizer step
    scorematrix.csv        checkpoint,task,metric,value (all tasks at every checkpoint)
    diagnostics.csv        final-checkpoint answer entropy and test loss per task
    freeze_audit.csv       content hashes of frozen state before/after each task
    checkpoints/task<N>.clvq
    memory/task<N>.tsv     replay buffer after task N
    predictions/task<N>.<task>.tsv
    report.csv, summary.csv, forgetting_curve.csv   (written by ``report``)
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import AdamW, ParameterStore, Tensor
from .checkpoint import read_checkpoint, write_checkpoint
from .config import RunConfig, format_config
from .distill import replay_alphas, replay_loss
from .metrics import METRIC_NAMES, fmt, matrices_from_rows, score_corpus, write_predictions, write_score_rows
from .model import (PARAM_NAMES, Vocabulary, VocabularyMismatch, encode_batch, forward_batch, init_params,
                    loss_gt, predict_answers, token_entropy)
from .projection import CURRENT, REPLAY, ProjectionBank, lambda_for_task, pro_loss_total, proj_name, total_loss
from .replay import MemoryBuffer, curate_task_memory, populate_memory, refresh_memory
from .seeding import derive_seed, rng_for
from .taskstream import Sample, TaskDataset

log = logging.getLogger(__name__)

LOSS_HEADER = ("step", "task", "epoch", "kind", "loss", "l_gt", "l_pro", "l_replay", "mean_alpha")


class RuntimeAbort(RuntimeError):
    """Training stopped early; the run directory carries a PARTIAL marker."""


def _batches(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        yield order[start:start + size]


class ContinualVQA(BaseEstimator):
    """Sequential multi-task QA learner with replay, distillation and projection drift control.

    ``fit`` consumes a list of :class:`TaskDataset` in stream order; with
    ``mode="joint"`` all training splits are pooled instead. After fitting,
    ``score_rows_`` holds every evaluation and ``predict`` answers new samples.
    """

    def __init__(self, mode="continual", er=True, kd=True, pro=True, epochs=4, batch_size=4, lr=1e-4,
                 weight_decay=0.05, replay_period=4, seed=0, data_dir=None, memory_capacity=None, memory_k=5,
                 temperature=2.0, tau=0.5, alpha_max=0.7, replay_weight=1.0, lambda0=0.05, d_proj=32, d_e=64,
                 d_h=128, max_len=32, init_scale=0.1, gen_max_len=16):
        self.mode = mode
        self.er = er
        self.kd = kd
        self.pro = pro
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.replay_period = replay_period
        self.seed = seed
        self.data_dir = data_dir
        self.memory_capacity = memory_capacity
        self.memory_k = memory_k
        self.temperature = temperature
        self.tau = tau
        self.alpha_max = alpha_max
        self.replay_weight = replay_weight
        self.lambda0 = lambda0
        self.d_proj = d_proj
        self.d_e = d_e
        self.d_h = d_h
        self.max_len = max_len
        self.init_scale = init_scale
        self.gen_max_len = gen_max_len

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ContinualVQA":
        return cls(**asdict(cfg))

    def config(self) -> RunConfig:
        return RunConfig(**self.get_params())

    # -- fitting ------------------------------------------------------------

    def fit(self, datasets: list[TaskDataset], vocab: Vocabulary | None = None, run_dir: str | Path | None = None):
        cfg = self.config()
        if not datasets:
            raise ValueError("no task datasets given")
        self.tasks_ = [ds.task for ds in datasets]
        self.vocab_ = vocab or Vocabulary.from_datasets(datasets)
        self.run_dir_ = Path(run_dir) if run_dir is not None else None
        self.params_ = init_params(len(self.vocab_), cfg.model_config(), rng_for(cfg.seed, "model/init"))
        self.bank_ = ProjectionBank(self.params_, cfg.d_e, cfg.d_proj)
        self.optimizer_ = AdamW(cfg.lr, cfg.weight_decay)
        self.loss_log_: list[tuple] = []
        self.score_rows_: list[tuple] = []
        self.freeze_audit_: list[dict] = []
        self.memory_: MemoryBuffer | None = None
        self.diagnostics_: list[tuple] = []
        self._step = 0
        self._cfg = cfg
        self._datasets = datasets
        if self.run_dir_ is not None:
            self._prepare_run_dir()
        if cfg.mode == "joint":
            self._fit_joint()
        else:
            for n, ds in enumerate(datasets, start=1):
                self._fit_task(n, ds)
        self._final_diagnostics()
        return self

    def _fit_task(self, n: int, ds: TaskDataset) -> None:
        cfg = self._cfg
        params = self.params_
        teacher = params.snapshot() if (cfg.uses_kd and n >= 2) else None
        if cfg.uses_pro:
            self.bank_.add_task(rng_for(cfg.seed, f"proj/task{n}"))
        lam = lambda_for_task(n, cfg.lambda_schedule()) if (cfg.uses_pro and n >= 2) else 0.0
        audit = {"task": n,
                 "teacher_before": teacher.digest() if teacher else "",
                 "frozen_before": params.digest(self.bank_.frozen_names())}
        replaying = cfg.uses_replay and n >= 2 and self.memory_ is not None and len(self.memory_) > 0
        replay_rng = rng_for(cfg.seed, f"replay/task{n}")
        train = ds.train
        for epoch in range(1, cfg.epochs + 1):
            order = rng_for(cfg.seed, f"shuffle/task{n}/epoch{epoch}").permutation(len(train))
            for b, idx in enumerate(_batches(len(train), cfg.batch_size, order), start=1):
                self._current_step(n, epoch, [train[i] for i in idx], lam)
                if replaying and b % cfg.replay_period == 0:
                    pool = self.memory_.entries
                    pick = replay_rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)
                    self._replay_step(n, epoch, [pool[i].sample for i in pick], teacher)
        audit["teacher_after"] = teacher.digest() if teacher else ""
        audit["frozen_after"] = params.digest(self.bank_.frozen_names())
        self.freeze_audit_.append(audit)
        if cfg.uses_replay:
            self._update_memory(n, ds)
        self._checkpoint(n)

    def _fit_joint(self) -> None:
        cfg = self._cfg
        pooled: list[Sample] = [s for ds in self._datasets for s in ds.train]
        for epoch in range(1, cfg.epochs + 1):
            order = rng_for(cfg.seed, f"shuffle/joint/epoch{epoch}").permutation(len(pooled))
            for idx in _batches(len(pooled), cfg.batch_size, order):
                self._current_step(0, epoch, [pooled[i] for i in idx], 0.0)
        self._checkpoint(len(self._datasets))

    def _encode(self, samples: list[Sample]):
        return encode_batch(samples, self.vocab_, self._cfg.max_len)

    def _current_step(self, n: int, epoch: int, samples: list[Sample], lam: float) -> None:
        params = self.params_
        params.zero_grad()
        batch = self._encode(samples)
        e, logits = forward_batch(params, batch)
        l_gt = loss_gt(logits, batch.targets, batch.target_mask)
        l_pro = pro_loss_total(self.bank_, e) if lam > 0.0 else Tensor(0.0)
        loss = total_loss(CURRENT, {"L_GT": l_gt, "L_pro": l_pro}, lam)
        ad.backward(loss)
        self.optimizer_.step(params)
        self._log(n, epoch, CURRENT, loss.item(), l_gt.item(), l_pro.item(), 0.0, 0.0)

    def _replay_step(self, n: int, epoch: int, samples: list[Sample], teacher: ParameterStore | None) -> None:
        cfg = self._cfg
        params = self.params_
        params.zero_grad()
        batch = self._encode(samples)
        _, logits = forward_batch(params, batch)
        if teacher is not None:
            _, t_logits = forward_batch(teacher, batch)
            dcfg = cfg.distill_config()
            l_replay = replay_loss(logits, t_logits, batch.targets, batch.target_mask, dcfg)
            alphas = replay_alphas(t_logits, batch.target_mask, dcfg)
            mean_alpha = float(alphas.sum() / batch.target_mask.sum())
        else:
            l_replay = ad.masked_cross_entropy(logits, batch.targets, batch.target_mask)
            mean_alpha = 0.0
        loss = total_loss(REPLAY, {"L_replay": l_replay}, replay_weight=cfg.replay_weight)
        ad.backward(loss)
        self.optimizer_.step(params)
        self._log(n, epoch, REPLAY, loss.item(), 0.0, 0.0, l_replay.item(), mean_alpha)

    def _log(self, n, epoch, kind, loss, l_gt, l_pro, l_replay, mean_alpha) -> None:
        self._step += 1
        task = self.tasks_[n - 1] if n >= 1 else "joint"
        self.loss_log_.append((self._step, task, epoch, kind, loss, l_gt, l_pro, l_replay, mean_alpha))

    def _update_memory(self, n: int, ds: TaskDataset) -> None:
        cfg = self._cfg
        capacity = cfg.memory_capacity
        if capacity is None:
            capacity = len(self._datasets[0].train) // 10
        share = capacity if n == 1 else capacity // n
        picked = curate_task_memory(ds.train, min(share, len(ds.train)), cfg.memory_k,
                                    derive_seed(cfg.seed, f"memory/task{n}"))
        if n == 1 or self.memory_ is None:
            self.memory_ = populate_memory(capacity, ds.task, picked)
        else:
            self.memory_ = refresh_memory(self.memory_, ds.task, picked, n,
                                          derive_seed(cfg.seed, f"memory/refresh{n}"))
        for line in self.memory_.log:
            log.info(line)
        if self.run_dir_ is not None:
            self.memory_.write(self.run_dir_ / "memory" / f"task{n}.tsv")

    # -- evaluation ---------------------------------------------------------

    def _checkpoint(self, n: int) -> None:
        if self.run_dir_ is not None:
            path = self.run_dir_ / "checkpoints" / f"task{n}.clvq"
            try:
                write_checkpoint(path, checkpoint_arrays(self.params_, self.bank_))
            except OSError as exc:
                (self.run_dir_ / "PARTIAL").write_text(f"checkpoint write failed after task {n}: {exc}\n")
                raise RuntimeAbort(f"could not write {path}: {exc}") from exc
        rows = evaluate_params(self.params_, self.vocab_, self._datasets, n, self._cfg.gen_max_len,
                               self.run_dir_ / "predictions" if self.run_dir_ is not None else None)
        self.score_rows_.extend(rows)
        if self.run_dir_ is not None:
            self._write_logs()

    def _final_diagnostics(self) -> None:
        final = len(self._datasets)
        for ds in self._datasets:
            ent = token_entropy(self.params_, self.vocab_, ds.test)
            batch = self._encode(ds.test)
            _, logits = forward_batch(self.params_, batch)
            test_loss = ad.masked_cross_entropy(logits, batch.targets, batch.target_mask).item()
            self.diagnostics_.append((final, ds.task, ent, test_loss))
        if self.run_dir_ is not None:
            with open(self.run_dir_ / "diagnostics.csv", "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("checkpoint", "task", "entropy", "test_loss"))
                for cp, task, ent, tl in self.diagnostics_:
                    w.writerow((cp, task, fmt(ent), fmt(tl)))

    def _prepare_run_dir(self) -> None:
        root = self.run_dir_
        for sub in ("checkpoints", "memory", "predictions"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        (root / "PARTIAL").unlink(missing_ok=True)
        (root / "config.snapshot").write_text(format_config(self._cfg, include_data=False), encoding="utf-8")
        self.vocab_.write(root / "vocab.tsv")
        self.vocab_.write(root / "checkpoints" / "vocab.tsv")

    def _write_logs(self) -> None:
        root = self.run_dir_
        with open(root / "losses.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOSS_HEADER)
            for step, task, epoch, kind, *vals in self.loss_log_:
                w.writerow((step, task, epoch, kind, *map(fmt, vals)))
        write_score_rows(root / "scorematrix.csv", self.score_rows_)
        with open(root / "freeze_audit.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("task", "teacher_before", "teacher_after", "frozen_before", "frozen_after"))
            for a in self.freeze_audit_:
                w.writerow((a["task"], a["teacher_before"], a["teacher_after"], a["frozen_before"], a["frozen_after"]))

    # -- inference ----------------------------------------------------------

    def predict(self, samples: list[Sample]) -> list[tuple[str, ...]]:
        check_is_fitted(self, "params_")
        return predict_answers(self.params_, self.vocab_, list(samples), self.gen_max_len)

    def score(self, samples: list[Sample], y=None) -> float:
        """Corpus BLEU-4 of greedy answers against the reference answers."""
        preds = self.predict(samples)
        return score_corpus(preds, [s.answer for s in samples])["BLEU-4"]

    def score_matrices(self):
        check_is_fitted(self, "score_rows_")
        return matrices_from_rows(self.score_rows_, self.tasks_)


# -- checkpoints and evaluation ----------------------------------------------


def checkpoint_arrays(params: ParameterStore, bank: ProjectionBank) -> dict[str, np.ndarray]:
    arrays = {n: params[n].data for n in PARAM_NAMES}
    for m in range(1, bank.n_tasks + 1):
        arrays[proj_name(m)] = params[proj_name(m)].data
    if bank.n_tasks:
        arrays["proj.frozen"] = np.array(bank.frozen_flags(), dtype=np.float64)
    return arrays


def load_params(path: str | Path) -> ParameterStore:
    arrays = read_checkpoint(path)
    flags = arrays.pop("proj.frozen", None)
    params = ParameterStore()
    for name, value in arrays.items():
        frozen = False
        if name.startswith("proj.W.") and flags is not None:
            frozen = bool(flags[int(name.rsplit(".", 1)[1]) - 1])
        params.add(name, value, frozen=frozen)
    return params


def check_vocab(params: ParameterStore, vocab: Vocabulary) -> None:
    if params["text_emb"].shape[0] != len(vocab) or params["dec.W_o"].shape[1] != len(vocab):
        raise VocabularyMismatch(
            f"checkpoint expects a vocabulary of {params['text_emb'].shape[0]} tokens, data has {len(vocab)}")


def evaluate_params(params: ParameterStore, vocab: Vocabulary, datasets: list[TaskDataset], checkpoint: int,
                    gen_max_len: int = 16, predictions_dir: Path | None = None) -> list[tuple]:
    """Greedy-decode every task's test split and score it; one row per (task, metric)."""
    check_vocab(params, vocab)
    rows = []
    for ds in datasets:
        if not ds.test:
            raise ValueError(f"task {ds.task} has an empty test split")
        preds = predict_answers(params, vocab, ds.test, gen_max_len)
        refs = [s.answer for s in ds.test]
        if predictions_dir is not None:
            write_predictions(predictions_dir / f"task{checkpoint}.{ds.task}.tsv",
                              [(s.id, " ".join(p), " ".join(s.answer)) for s, p in zip(ds.test, preds)])
        scores = score_corpus(preds, refs)
        rows.extend((checkpoint, ds.task, m, scores[m]) for m in METRIC_NAMES)
    return rows


def evaluate(checkpoint: str | Path, datasets: list[TaskDataset], vocab: Vocabulary, checkpoint_index: int | None = None,
             gen_max_len: int = 16, predictions_dir: Path | None = None) -> list[tuple]:
    params = load_params(checkpoint)
    if checkpoint_index is None:
        stem = Path(checkpoint).stem
        checkpoint_index = int(stem[4:]) if stem.startswith("task") and stem[4:].isdigit() else 0
    return evaluate_params(params, vocab, datasets, checkpoint_index, gen_max_len, predictions_dir)


# -- run entry points ---------------------------------------------------------


def _run(cfg: RunConfig, datasets: list[TaskDataset], run_dir, vocab: Vocabulary | None) -> ContinualVQA:
    est = ContinualVQA.from_config(cfg)
    return est.fit(datasets, vocab=vocab, run_dir=run_dir)


def run_continual(cfg: RunConfig, datasets: list[TaskDataset], run_dir=None, vocab=None) -> ContinualVQA:
    if cfg.mode != "continual":
        raise ValueError("run_continual needs mode=continual")
    return _run(cfg, datasets, run_dir, vocab)


def run_vanilla(cfg: RunConfig, datasets: list[TaskDataset], run_dir=None, vocab=None) -> ContinualVQA:
    values = asdict(cfg)
    values.update(mode="vanilla", er=False, kd=False, pro=False)
    return _run(RunConfig(**values), datasets, run_dir, vocab)


def run_joint(cfg: RunConfig, datasets: list[TaskDataset], run_dir=None, vocab=None) -> ContinualVQA:
    values = asdict(cfg)
    values.update(mode="joint", er=False, kd=False, pro=False)
    return _run(RunConfig(**values), datasets, run_dir, vocab)


def run(cfg: RunConfig, datasets: list[TaskDataset], run_dir=None, vocab=None) -> ContinualVQA:
    return {"continual": run_continual, "vanilla": run_vanilla, "joint": run_joint}[cfg.mode](
        cfg, datasets, run_dir, vocab)
