"""Confidence-gated token-level distillation for replay batches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    tau: float = 0.5
    alpha_max: float = 0.7
    replay_weight: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if not 0.0 <= self.alpha_max <= 1.0:
            raise ValueError(f"alpha_max must lie in [0, 1], got {self.alpha_max}")


def teacher_probs(logits, T: float) -> np.ndarray:
    """Temperature-softened teacher distribution, detached from any graph."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return ad.softmax_temp(Tensor(z), T).data


def token_confidence(probs) -> np.ndarray:
    return np.asarray(probs).max(axis=-1)


def distill_weight(c, tau: float, alpha_max: float):
    """0 below ``tau``, then linear from 0 at ``tau`` up to ``alpha_max`` at ``c = 1``."""
    c = np.asarray(c, dtype=np.float64)
    alpha = np.where(c < tau, 0.0, (c - tau) / (1.0 - tau) * alpha_max)
    return float(alpha) if alpha.ndim == 0 else alpha


def token_kd(p_teacher, log_p_student, T: float):
    """``T^2 * KL(p_teacher || p_student)`` over the last axis.

    ``log_p_student`` may be a :class:`Tensor`, in which case the result
    carries gradients back to it. Zero teacher entries contribute nothing.
    """
    p = np.asarray(p_teacher, dtype=np.float64)
    neg_h = xlogy(p, p).sum(axis=-1)
    if isinstance(log_p_student, Tensor):
        cross = ad.sum(ad.mul(log_p_student, p), axis=-1)
        return ad.scale(ad.sub(Tensor(neg_h), cross), T * T)
    q = np.asarray(log_p_student, dtype=np.float64)
    out = (neg_h - (p * q).sum(axis=-1)) * T * T
    return float(out) if out.ndim == 0 else out


def replay_loss(student_logits: Tensor, teacher_logits, targets, mask, cfg: DistillConfig) -> Tensor:
    """Masked mean over tokens of ``(1 - a) * CE + a * KD`` with per-token gate ``a``."""
    mask = np.asarray(mask, dtype=np.float64)
    t_logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_logits.shape != student_logits.shape:
        raise ad.ShapeError(f"teacher logits {t_logits.shape} vs student {student_logits.shape}")
    ce = ad.token_cross_entropy(student_logits, targets, mask)
    if cfg.alpha_max == 0.0:
        return ad.masked_mean(ce, mask)
    p_t = teacher_probs(t_logits, cfg.temperature)
    alpha = distill_weight(token_confidence(p_t), cfg.tau, cfg.alpha_max)
    alpha = np.where(mask > 0, alpha, 0.0)
    kd = token_kd(p_t, ad.log_softmax_temp(student_logits, cfg.temperature), cfg.temperature)
    per_token = ad.add(ad.mul(ce, 1.0 - alpha), ad.mul(kd, alpha))
    return ad.masked_mean(per_token, mask)


def replay_alphas(teacher_logits, mask, cfg: DistillConfig) -> np.ndarray:
    """Per-token gates used by :func:`replay_loss`, for logging and audits."""
    p_t = teacher_probs(teacher_logits, cfg.temperature)
    return np.where(np.asarray(mask) > 0, distill_weight(token_confidence(p_t), cfg.tau, cfg.alpha_max), 0.0)
