"""Cross-entropy, temperature softmax, per-exit KL divergence and the combined
self-distillation objective. Every batch reduction is a mean."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class SDConfig:
    gamma: float = 0.9
    temperature: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.temperature > 0.0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class LossBreakdown:
    final: Tensor
    multi: Tensor
    kld: Tensor
    sd: Tensor
    per_exit: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {
            "L_final": self.final.item(),
            "L_multi": self.multi.item(),
            "L_kld": self.kld.item(),
            "L_sd": self.sd.item(),
        }


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label out of range [0, {c})")
    picked = T.log_softmax(logits)[np.arange(b), labels.astype(np.int64)]
    return -picked.mean()


def temp_softmax(logits: Tensor, temperature: float) -> Tensor:
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    return T.softmax(logits * (1.0 / temperature))


def kld_exit(teacher_logits: Tensor, student_logits: Tensor, temperature: float) -> Tensor:
    """KL(p_teacher || p_student) at temperature T, teacher detached, batch mean."""
    if teacher_logits.shape != student_logits.shape:
        raise DimensionError(f"teacher {teacher_logits.shape} and student {student_logits.shape} differ")
    pt = temp_softmax(teacher_logits.detach(), temperature)
    ps = temp_softmax(student_logits, temperature)
    log_pt = np.log(np.maximum(pt.data, LOG_CLAMP))
    log_ratio = T.sub(Tensor(log_pt), T.log(T.clamp_min(ps, LOG_CLAMP)))
    return (pt * log_ratio).sum(axis=1).mean()


def sd_loss(outputs: list[Tensor], labels, cfg: SDConfig) -> LossBreakdown:
    k = len(outputs)
    if k < 2:
        raise DimensionError("self-distillation needs at least two exits")
    teacher = outputs[-1]
    final = cross_entropy(teacher, labels)
    zero = Tensor(np.zeros((), dtype=teacher.dtype))
    multi, kld = zero, zero
    per_exit = []
    for f_i in outputs[:-1]:
        ce_i = cross_entropy(f_i, labels)
        kl_i = kld_exit(teacher, f_i, cfg.temperature)
        per_exit.append((ce_i, kl_i))
        multi = multi + ce_i * (1.0 - cfg.gamma)
        kld = kld + kl_i * cfg.gamma
    return LossBreakdown(final=final, multi=multi, kld=kld, sd=multi + kld, per_exit=per_exit)


def multi_exit_ce(outputs: list[Tensor], labels) -> Tensor:
    """Plain sum of off-ramp cross-entropies, sum over i < k."""
    total = Tensor(np.zeros((), dtype=outputs[0].dtype))
    for f_i in outputs[:-1]:
        total = total + cross_entropy(f_i, labels)
    return total
