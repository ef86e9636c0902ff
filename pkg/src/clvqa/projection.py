"""Per-task projection layers over the merged embedding and their drift penalty."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ParameterStore, Tensor
from .model import MergedEmbedding, _cols


def proj_name(task: int) -> str:
    return f"proj.W.{task}"


class ProjectionBank:
    """Projection matrices ``W_1..W_n`` (each ``d_e x d_proj``) stored in ``params``.

    Only the newest matrix is trainable; adding a task freezes all others.
    """

    def __init__(self, params: ParameterStore, d_e: int, d_proj: int = 32):
        self.params = params
        self.d_e = d_e
        self.d_proj = d_proj
        self.n_tasks = 0
        while proj_name(self.n_tasks + 1) in params:
            self.n_tasks += 1

    def add_task(self, rng: np.random.Generator) -> Tensor:
        for m in range(1, self.n_tasks + 1):
            self.params.freeze(proj_name(m))
        self.n_tasks += 1
        lim = 1.0 / np.sqrt(self.d_e)
        return self.params.add(proj_name(self.n_tasks), rng.uniform(-lim, lim, (self.d_e, self.d_proj)))

    def weight(self, m: int) -> Tensor:
        if not 1 <= m <= self.n_tasks:
            raise ContractError(f"no projection for task {m} (bank has {self.n_tasks})")
        return self.params[proj_name(m)]

    def frozen_flags(self) -> list[bool]:
        return [proj_name(m) in self.params.frozen for m in range(1, self.n_tasks + 1)]

    def frozen_names(self) -> list[str]:
        return [proj_name(m) for m in range(1, self.n_tasks) if proj_name(m) in self.params.frozen]


def project(bank: ProjectionBank, m: int, e: MergedEmbedding) -> Tensor:
    """``F_m = e W_m`` at every position; ``[N, L, d_proj]``."""
    W = bank.weight(m)
    if e.vectors.shape[-1] != W.shape[0]:
        raise ContractError(f"embedding width {e.vectors.shape[-1]} != projection input {W.shape[0]}")
    return ad.matmul(e.vectors, W)


def pro_loss_pair(F_n: Tensor, F_m: Tensor, mask) -> Tensor:
    """Squared difference averaged over valid positions and feature dimensions."""
    if F_n.shape != F_m.shape:
        raise ContractError(f"projection shapes differ: {F_n.shape} vs {F_m.shape}")
    mask = np.asarray(mask, dtype=np.float64)
    full = _cols(mask, F_n.shape[-1])
    return ad.masked_mean(ad.square(ad.sub(F_n, F_m)), full)


def pro_loss_total(bank: ProjectionBank, e: MergedEmbedding, mask=None) -> Tensor:
    """Sum of pairwise drift between the newest projection and every earlier one."""
    n = bank.n_tasks
    if n < 2:
        return Tensor(0.0)
    mask = e.mask if mask is None else mask
    F_n = project(bank, n, e)
    total = None
    for m in range(1, n):
        term = pro_loss_pair(F_n, project(bank, m, e), mask)
        total = term if total is None else ad.add(total, term)
    return total


@dataclass(frozen=True)
class LambdaSchedule:
    lambda0: float = 0.05

    def __post_init__(self):
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be positive")


def lambda_for_task(n: int, schedule: LambdaSchedule = LambdaSchedule()) -> float:
    """Regularizer weight for task ``n`` (>= 2): ``lambda0`` halved per task after the second."""
    if n < 2:
        raise ContractError("the first task has no projection regularizer")
    return schedule.lambda0 * 0.5 ** (n - 2)


CURRENT, REPLAY = "current", "replay"


def total_loss(batch_kind: str, parts: dict, lam: float = 0.0, replay_weight: float = 1.0):
    """Dispatch the per-batch objective: current-task or replay."""
    try:
        if batch_kind == CURRENT:
            l_gt, l_pro = parts["L_GT"], parts["L_pro"]
            return l_gt + l_pro * lam if lam != 0.0 else l_gt
        if batch_kind == REPLAY:
            l_replay = parts["L_replay"]
            return l_replay * replay_weight if replay_weight != 1.0 else l_replay
    except KeyError as exc:
        raise ContractError(f"{batch_kind} batch is missing loss part {exc.args[0]}") from None
    raise ContractError(f"unknown batch kind {batch_kind!r}")
