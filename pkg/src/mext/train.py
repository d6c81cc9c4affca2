"""Training regimes.

* ``deebert``    stage 1: backbone + final classifier on the final-exit CE;
                 stage 2: backbone and final classifier frozen, off-ramps on
                 the summed off-ramp CE.
* ``deebert_sd`` same, but stage 2 uses the self-distillation loss.
* ``sd_only``    one stage, everything trainable, update with g_f + g_s.
* ``romebert``   one stage, update with the gradient-regularised g*.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import gradreg, inference
from . import tensor as T
from .data import Dataset
from .errors import ConfigError, DataError
from .losses import LossBreakdown, SDConfig, cross_entropy, sd_loss
from .model import ModelConfig, ParamStore, forward_all_exits, forward_prefix, init

log = logging.getLogger(__name__)

REGIMES = ("deebert", "deebert_sd", "sd_only", "romebert")
TWO_STAGE = ("deebert", "deebert_sd")


@dataclass(frozen=True)
class RegimeConfig:
    regime: str = "romebert"
    epochs: tuple[int, ...] = (3,)
    batch_size: int = 32
    lr: float = 5e-4
    sd: SDConfig = field(default_factory=SDConfig)
    seed: int = 0
    warmup: float = 0.1
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; choose from {', '.join(REGIMES)}")
        want = 2 if self.regime in TWO_STAGE else 1
        if len(self.epochs) != want:
            raise ConfigError(f"regime {self.regime!r} needs {want} stage epoch count(s), got {list(self.epochs)}")
        if any(e < 0 for e in self.epochs):
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("warmup fraction must lie in [0, 1)")

    @property
    def use_gr(self) -> bool:
        return self.regime == "romebert"


@dataclass(frozen=True)
class FreezeMask:
    """Ownership tags (or tag groups) whose parameters never change."""
    tags: frozenset[str] = frozenset()

    def frozen(self, store: ParamStore) -> list[str]:
        return store.names(*self.tags) if self.tags else []

    def trainable(self, store: ParamStore) -> list[str]:
        frozen = set(self.frozen(store))
        return [n for n in store.names() if n not in frozen]


STAGE1_MASK = FreezeMask(frozenset({"off_ramp"}))
STAGE2_MASK = FreezeMask(frozenset({"backbone", "final_classifier"}))
JOINT_MASK = FreezeMask()


class Adam:
    """Adam with decoupled per-parameter moment buffers and an external lr."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, store: ParamStore, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            p = store[name].data
            g = g.astype(p.dtype, copy=False)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def lr_at(step: int, total: int, base: float, warmup: float) -> float:
    """Linear warm-up over the first ``warmup`` fraction, then linear decay to 0."""
    warm = int(total * warmup)
    if warm and step < warm:
        return base * (step + 1) / warm
    return base * max(0.0, (total - step) / max(1, total - warm))


def clip_global(vec: gradreg.GradVector, max_norm: float) -> gradreg.GradVector:
    if max_norm <= 0:
        return vec
    n = vec.norm()
    return vec.scaled(max_norm / n) if n > max_norm else vec


def _zero_like(t: T.Tensor) -> T.Tensor:
    return T.Tensor(np.zeros((), dtype=t.dtype))


@dataclass
class StepResult:
    losses: LossBreakdown
    conflicted: bool = False
    dot: float | None = None


class Trainer:
    """Owns a ParamStore plus the optimiser state of the current stage."""

    def __init__(self, store: ParamStore, cfg: RegimeConfig, grad_log: gradreg.DiagnosticLog | None = None):
        self.store = store
        self.cfg = cfg
        self.grad_log = grad_log
        self.layout = gradreg.Layout.from_store(store)
        self.global_step = 0
        self.new_stage(JOINT_MASK, 1)

    def new_stage(self, mask: FreezeMask, total_steps: int) -> None:
        self.mask = mask
        self.trainable = mask.trainable(self.store)
        self.store.set_trainable(self.trainable)
        self.opt = Adam(self.cfg.betas, self.cfg.adam_eps)
        self.total_steps = max(1, total_steps)
        self.stage_step = 0

    def _apply(self, update: gradreg.GradVector) -> None:
        update = clip_global(update, self.cfg.clip_norm)
        grads = gradreg.unflatten(update)
        grads = {n: grads[n] for n in self.trainable}
        lr = lr_at(self.stage_step, self.total_steps, self.cfg.lr, self.cfg.warmup)
        self.opt.step(self.store, grads, lr)
        self.stage_step += 1
        self.global_step += 1

    def _flat(self, loss: T.Tensor) -> gradreg.GradVector:
        names = self.trainable
        grads = T.grad(loss, [self.store[n] for n in names])
        return gradreg.flatten(dict(zip(names, grads)), self.layout)

    # -- the four update rules ------------------------------------------------

    def step_deebert_stage1(self, tokens, labels) -> StepResult:
        logits = forward_prefix(self.store, tokens, self.store.config.k)
        final = cross_entropy(logits, labels)
        zero = _zero_like(final)
        self._apply(self._flat(final))
        return StepResult(LossBreakdown(final, zero, zero, zero))

    def step_deebert_stage2(self, tokens, labels, with_sd: bool) -> StepResult:
        outs = forward_all_exits(self.store, tokens)
        if with_sd:
            bd = sd_loss(outs, labels, self.cfg.sd)
        else:
            final = cross_entropy(outs[-1], labels)
            per_exit = [(cross_entropy(f, labels), _zero_like(final)) for f in outs[:-1]]
            multi = _zero_like(final)
            for ce_i, _ in per_exit:
                multi = multi + ce_i
            bd = LossBreakdown(final, multi, _zero_like(final), multi, per_exit)
        self._apply(self._flat(bd.sd))
        return StepResult(bd)

    def step_romebert(self, tokens, labels, use_gr: bool) -> StepResult:
        outs = forward_all_exits(self.store, tokens)
        bd = sd_loss(outs, labels, self.cfg.sd)
        g_f = self._flat(bd.final)
        g_s = self._flat(bd.sd)
        if use_gr:
            g_star, conflicted = gradreg.regularize(g_f, g_s)
        else:
            g_star, conflicted = g_f + g_s, False
        dot = g_f.dot(g_s)
        if self.grad_log is not None:
            self.grad_log.record(self.global_step, g_f, g_s, conflicted)
        self._apply(g_star)
        return StepResult(bd, conflicted, dot)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


@dataclass
class TrainResult:
    store: ParamStore
    metrics: list[dict]


def _stages(cfg: RegimeConfig):
    """(stage number, mask, epochs, step name) in execution order."""
    if cfg.regime in TWO_STAGE:
        return [
            (1, STAGE1_MASK, cfg.epochs[0], "stage1"),
            (2, STAGE2_MASK, cfg.epochs[1], "stage2_sd" if cfg.regime == "deebert_sd" else "stage2"),
        ]
    return [(1, JOINT_MASK, cfg.epochs[0], "romebert" if cfg.use_gr else "sd_only")]


def train(
    cfg: RegimeConfig,
    model_cfg: ModelConfig,
    train_data: Dataset,
    dev_data: Dataset | None = None,
    metrics_path=None,
    grad_log_path=None,
    store: ParamStore | None = None,
) -> TrainResult:
    """Run every stage of ``cfg.regime`` and return the trained store.

    One metrics record is produced per epoch; when ``metrics_path`` is given
    they are also written there as JSON lines.
    """
    if len(train_data) == 0:
        raise DataError("training set is empty")
    store = init(model_cfg) if store is None else store
    rng = np.random.default_rng(cfg.seed)
    grad_log = gradreg.DiagnosticLog(grad_log_path) if grad_log_path else None
    trainer = Trainer(store, cfg, grad_log)
    metrics: list[dict] = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    steps_per_epoch = -(-len(train_data) // cfg.batch_size)
    epoch = 0
    try:
        for stage, mask, n_epochs, kind in _stages(cfg):
            log.info("%s: stage %d begins (%s, %d epochs)", cfg.regime, stage, kind, n_epochs)
            trainer.new_stage(mask, n_epochs * steps_per_epoch)
            for _ in range(n_epochs):
                epoch += 1
                sums = {"L_final": 0.0, "L_multi": 0.0, "L_kld": 0.0}
                conflicts = steps = 0
                for idx in _batches(len(train_data), cfg.batch_size, rng):
                    tok, lab = train_data.tokens[idx], train_data.labels[idx]
                    if kind == "stage1":
                        res = trainer.step_deebert_stage1(tok, lab)
                    elif kind in ("stage2", "stage2_sd"):
                        res = trainer.step_deebert_stage2(tok, lab, with_sd=kind == "stage2_sd")
                    else:
                        res = trainer.step_romebert(tok, lab, use_gr=kind == "romebert")
                    vals = res.losses.values()
                    for key in sums:
                        sums[key] += vals[key]
                    conflicts += res.conflicted
                    steps += 1
                rec = {
                    "epoch": epoch,
                    "stage": stage,
                    "regime": cfg.regime,
                    **{k: v / steps for k, v in sums.items()},
                    "conflict_rate": conflicts / steps,
                    "per_layer_dev_acc": (
                        inference.eval_fixed_layers(store, dev_data, "accuracy") if dev_data is not None and len(dev_data) else []
                    ),
                }
                metrics.append(rec)
                if sink:
                    sink.write(json.dumps(rec, sort_keys=True) + "\n")
                    sink.flush()
                log.info("epoch %d (stage %d): L_final=%.4f conflict_rate=%.3f dev=%s", epoch, stage,
                         rec["L_final"], rec["conflict_rate"], [round(a, 3) for a in rec["per_layer_dev_acc"]])
            log.info("%s: stage %d ends", cfg.regime, stage)
    finally:
        if sink:
            sink.close()
        if grad_log:
            grad_log.close()
    store.set_trainable([])
    return TrainResult(store, metrics)


def with_regime(cfg: RegimeConfig, regime: str, epochs=None) -> RegimeConfig:
    return replace(cfg, regime=regime, epochs=tuple(epochs) if epochs is not None else cfg.epochs)
