"""Entropy-threshold early exiting and its accounting.

An example exits at the first off-ramp whose prediction entropy (T=1
softmax) falls strictly below the threshold ``S``; layer ``k`` always exits.
Running time of an exit at layer ``i`` is modelled as ``i/k`` of full depth.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ContractError, DataError
from .model import ParamStore, iter_exits

EVAL_BATCH = 256


@dataclass(frozen=True)
class ExitDecision:
    exit_layer: int
    entropy_at_exit: float
    prediction: int


@dataclass
class SweepRecord:
    threshold: float
    metric: float
    expected_time_pct: float
    histogram: list[int]


def entropy(probs, base: float = math.e) -> np.ndarray | float:
    """Shannon entropy of the last axis, 0 log 0 := 0. Natural log by default."""
    p = np.asarray(probs, dtype=np.float64)
    if (p < 0).any():
        raise ContractError("entropy of a distribution with negative mass")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-4):
        raise ContractError("probabilities do not sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    if base != math.e:
        h = h / math.log(base)
    return float(h) if np.ndim(h) == 0 else h


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MEXT_THREADS", "1")))
    except ValueError:
        return 1


def all_exit_logits(params: ParamStore, tokens: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """[k x N x classes] logits of every exit, in example order.

    Batches are independent, so ``MEXT_THREADS`` > 1 spreads them over a
    thread pool; results are stitched back in input order.
    """
    tokens = np.asarray(tokens)
    if len(tokens) == 0:
        raise DataError("evaluation needs a nonempty dataset")
    starts = range(0, len(tokens), batch_size)

    def run(s):
        chunk = tokens[s:s + batch_size]
        return np.stack([f.data for f in iter_exits(params, chunk)])

    n_threads = _threads()
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=1)


@dataclass
class ExitTable:
    """Per-layer predictions and entropies for a dataset; thresholds can be
    applied repeatedly without re-running the model."""
    predictions: np.ndarray   # [k x N]
    entropies: np.ndarray     # [k x N]

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "ExitTable":
        probs = _softmax64(logits)
        return cls(logits.argmax(axis=-1), entropy(probs))

    @classmethod
    def build(cls, params: ParamStore, tokens) -> "ExitTable":
        return cls.from_logits(all_exit_logits(params, tokens))

    @property
    def k(self) -> int:
        return self.predictions.shape[0]

    def exit_layers(self, threshold: float) -> np.ndarray:
        if threshold < 0:
            raise ContractError("entropy threshold must be >= 0")
        return K.first_exit(np.ascontiguousarray(self.entropies), float(threshold))

    def exit_predictions(self, layers: np.ndarray) -> np.ndarray:
        return self.predictions[layers - 1, np.arange(len(layers))]


def score(pred: np.ndarray, labels: np.ndarray, metric: str = "accuracy") -> float:
    """Accuracy, or binary F1 on the positive class (label 1)."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if metric == "accuracy":
        return float((pred == labels).mean())
    if metric == "f1":
        tp = float(((pred == 1) & (labels == 1)).sum())
        fp = float(((pred == 1) & (labels != 1)).sum())
        fn = float(((pred != 1) & (labels == 1)).sum())
        return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
    raise ContractError(f"unknown metric {metric!r}")


def histogram(layers: np.ndarray, k: int) -> list[int]:
    return np.bincount(layers, minlength=k + 1)[1:].tolist()


def expected_time_pct(hist: list[int]) -> float:
    k = len(hist)
    n = sum(hist)
    return 100.0 * sum(c * (i / k) for i, c in enumerate(hist, start=1)) / n


def infer_adaptive(params: ParamStore, tokens, threshold: float) -> ExitDecision:
    """Run one example layer by layer, stopping at the first confident exit."""
    if threshold < 0:
        raise ContractError("entropy threshold must be >= 0")
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[0] != 1:
        raise ContractError("infer_adaptive takes a single example")
    k = params.config.k
    for i, logits in enumerate(iter_exits(params, tokens), start=1):
        h = float(entropy(_softmax64(logits.data[0])))
        if h < threshold or i == k:
            return ExitDecision(i, h, int(logits.data[0].argmax()))
    raise AssertionError("unreachable")


def sweep_table(table: ExitTable, labels, thresholds, metric: str = "accuracy") -> list[SweepRecord]:
    out = []
    for s in thresholds:
        layers = table.exit_layers(s)
        hist = histogram(layers, table.k)
        out.append(SweepRecord(float(s), score(table.exit_predictions(layers), labels, metric), expected_time_pct(hist), hist))
    return out


def sweep(params: ParamStore, dataset, thresholds, metric: str | None = None) -> list[SweepRecord]:
    if len(dataset) == 0:
        raise DataError("sweep needs a nonempty dataset")
    metric = metric or dataset.metric
    return sweep_table(ExitTable.build(params, dataset.tokens), dataset.labels, thresholds, metric)


def eval_fixed_layers(params: ParamStore, dataset, metric: str | None = None) -> list[float]:
    """Metric of every exit when all examples are forced out at that exit."""
    if len(dataset) == 0:
        raise DataError("evaluation needs a nonempty dataset")
    metric = metric or dataset.metric
    table = ExitTable.build(params, dataset.tokens)
    return [score(p, dataset.labels, metric) for p in table.predictions]


def exit_histogram(params: ParamStore, dataset, threshold: float) -> list[int]:
    table = ExitTable.build(params, dataset.tokens)
    return histogram(table.exit_layers(threshold), table.k)


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def sweep_csv(records: list[SweepRecord], k: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "metric", "expected_time_pct"] + [f"count_layer_{i}" for i in range(1, k + 1)])
    for r in records:
        w.writerow([repr(r.threshold), f"{r.metric:.6f}", f"{r.expected_time_pct:.6f}"] + list(r.histogram))
    return buf.getvalue()


def layerwise_csv(values: list[float], metric: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", metric])
    for i, v in enumerate(values, start=1):
        w.writerow([i, f"{v:.6f}"])
    return buf.getvalue()


def histogram_json(counts: list[int], threshold: float, extra: dict | None = None) -> str:
    doc = {"threshold": threshold, "k": len(counts), "n": int(sum(counts)), "counts": [int(c) for c in counts]}
    doc["expected_time_pct"] = expected_time_pct(counts)
    doc.update(extra or {})
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
