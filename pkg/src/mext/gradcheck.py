"""Central finite-difference verification of analytic gradients (float64).

Error metric: ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
over the checked coordinates, i.e. infinity-norm relative error. Per-element
ratios are meaningless for entries that are themselves ~1e-12.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .losses import SDConfig, cross_entropy, kld_exit, sd_loss
from .model import ModelConfig, ParamStore, forward_all_exits, init
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x`` (mutated in place, restored)."""
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        up = f()
        flat[c] = orig - h
        down = f()
        flat[c] = orig
        out[j] = (up - down) / (2 * h)
    return out


def check_fn(
    name: str,
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> CheckResult:
    """Compare ``T.grad`` of ``fn(inputs)`` against central differences.

    With ``max_coords`` set, each input contributes at most that many randomly
    chosen coordinates; otherwise every coordinate is checked.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
    analytic = T.grad(fn(inputs), inputs)

    def value() -> float:
        return float(fn(inputs).data)

    a_all, n_all = [], []
    for t, g in zip(inputs, analytic):
        size = t.data.size
        coords = np.arange(size) if max_coords is None or size <= max_coords else rng.choice(size, max_coords, replace=False)
        n_all.append(numeric_grad(value, t.data, coords, h))
        a_all.append(g.reshape(-1)[coords])
    return CheckResult(name, rel_error(np.concatenate(a_all), np.concatenate(n_all)), sum(len(a) for a in a_all))


def directional_check(
    name: str,
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    directions: int = 4,
    rng: np.random.Generator | None = None,
) -> CheckResult:
    """Check g . v against (f(x + h v) - f(x - h v)) / 2h for random unit v
    spanning every coordinate at once."""
    rng = rng or np.random.default_rng(1)
    for t in inputs:
        t.requires_grad = True
    analytic = T.grad(fn(inputs), inputs)
    base = [t.data.copy() for t in inputs]
    a_dirs, n_dirs = [], []
    for _ in range(directions):
        vs = [rng.standard_normal(t.shape) for t in inputs]
        norm = np.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        for sign, store in ((1, "up"), (-1, "down")):
            for t, b, v in zip(inputs, base, vs):
                t.data[...] = b + sign * h * v
            if store == "up":
                up = float(fn(inputs).data)
            else:
                down = float(fn(inputs).data)
        for t, b in zip(inputs, base):
            t.data[...] = b
        n_dirs.append((up - down) / (2 * h))
        a_dirs.append(sum(float((g * v).sum()) for g, v in zip(analytic, vs)))
    return CheckResult(name, rel_error(np.array(a_dirs), np.array(n_dirs)), directions)


# ---------------------------------------------------------------------------
# model-level suite
# ---------------------------------------------------------------------------

def small_problem(seed: int = 0, k: int = 3, hidden: int = 32, batch: int = 4, length: int = 6):
    cfg = ModelConfig(k=k, hidden=hidden, heads=4, ffn=2 * hidden, vocab=24, classes=3, max_len=length,
                      seed=seed, dtype="f64", init_std=0.3)
    store = init(cfg)
    rng = np.random.default_rng(seed + 100)
    # perturb gains/biases away from 1/0 so their gradients are non-degenerate
    for n in store.names():
        if n.endswith(".bias") or n.endswith(".gain"):
            store[n].data[...] += rng.normal(0.0, 0.3, size=store[n].shape)
    tokens = rng.integers(4, cfg.vocab, size=(batch, length)).astype(np.int64)
    tokens[0, -2:] = 0
    labels = rng.integers(0, cfg.classes, size=batch)
    return store, tokens, labels


def model_losses(store: ParamStore, tokens, labels, sd: SDConfig):
    """Closures over the parameter list for L_final, L_multi and L_kld.

    The teacher logits inside L_kld are frozen at the current parameters, which
    is exactly the detachment the analytic gradient implements.
    """
    names = store.names()
    teacher = forward_all_exits(store, tokens)[-1].data.copy()

    def rebind(ts):
        for n, t in zip(names, ts):
            store.tensors[n] = t

    def l_final(ts):
        rebind(ts)
        return cross_entropy(forward_all_exits(store, tokens)[-1], labels)

    def l_multi(ts):
        rebind(ts)
        return sd_loss(forward_all_exits(store, tokens), labels, sd).multi

    def l_kld(ts):
        rebind(ts)
        outs = forward_all_exits(store, tokens)
        total = Tensor(np.zeros(()))
        for f_i in outs[:-1]:
            total = total + kld_exit(Tensor(teacher), f_i, sd.temperature) * sd.gamma
        return total

    def l_kld_pipeline(ts):
        rebind(ts)
        return sd_loss(forward_all_exits(store, tokens), labels, sd).kld

    return names, {"L_final": l_final, "L_multi": l_multi, "L_kld": l_kld}, l_kld_pipeline


def run_suite(seed: int = 0, h: float = 1e-5, max_coords: int = 6, tol: float = 1e-5) -> list[CheckResult]:
    """Finite-difference check of L_final, L_multi and L_kld on a k=3, hidden=32 model."""
    store, tokens, labels = small_problem(seed)
    sd = SDConfig()
    names, fns, _ = model_losses(store, tokens, labels, sd)
    params = [store[n] for n in names]
    results = []
    for i, (lname, fn) in enumerate(fns.items()):
        results.append(check_fn(f"{lname}/coords", fn, params, h, max_coords, np.random.default_rng(seed + i)))
        results.append(directional_check(f"{lname}/directional", fn, params, h, rng=np.random.default_rng(seed + 10 + i)))
    return results
