"""Gradient regularisation: flatten per-parameter gradients into one global
vector, detect conflict between the final-exit gradient and the
self-distillation gradient, and project the former when they disagree."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ContractError

NORM_FLOOR = 1e-24


@dataclass(frozen=True)
class Layout:
    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    offsets: tuple[int, ...]
    size: int

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, tuple[int, ...]]) -> "Layout":
        names, shp, offs = [], [], []
        off = 0
        for n, s in shapes.items():
            names.append(n)
            shp.append(tuple(s))
            offs.append(off)
            off += int(np.prod(s, dtype=np.int64))
        return cls(tuple(names), tuple(shp), tuple(offs), off)

    @classmethod
    def from_store(cls, store, names=None) -> "Layout":
        names = store.names() if names is None else names
        return cls.from_shapes({n: store[n].shape for n in names})

    def entries(self):
        """(name, offset, length) triples in layout order."""
        for n, s, o in zip(self.names, self.shapes, self.offsets):
            yield n, o, int(np.prod(s, dtype=np.int64))

    def segment(self, name: str) -> slice:
        i = self.names.index(name)
        n = int(np.prod(self.shapes[i], dtype=np.int64))
        return slice(self.offsets[i], self.offsets[i] + n)


@dataclass
class GradVector:
    values: np.ndarray
    layout: Layout

    def dot(self, other: "GradVector") -> float:
        _same_layout(self, other)
        return float(np.dot(self.values, other.values))

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def __add__(self, other: "GradVector") -> "GradVector":
        _same_layout(self, other)
        return GradVector(self.values + other.values, self.layout)

    def scaled(self, alpha: float) -> "GradVector":
        return GradVector(self.values * alpha, self.layout)


def _same_layout(a: GradVector, b: GradVector) -> None:
    if a.layout != b.layout:
        raise ContractError("gradient vectors have different layouts")


def flatten(grads: Mapping[str, np.ndarray], layout: Layout) -> GradVector:
    """Pack ``grads`` into one float64 vector; missing parameters become zeros."""
    unknown = set(grads) - set(layout.names)
    if unknown:
        raise ContractError(f"gradient map has parameters outside the layout: {sorted(unknown)}")
    out = np.zeros(layout.size, dtype=np.float64)
    for name, off, n in layout.entries():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g)
        if g.size != n:
            raise ContractError(f"gradient for {name!r} has {g.size} values, layout expects {n}")
        out[off:off + n] = g.reshape(-1)
    return GradVector(out, layout)


def unflatten(vec: GradVector, dtype=None) -> dict[str, np.ndarray]:
    out = {}
    for name, shape, (_, off, n) in zip(vec.layout.names, vec.layout.shapes, vec.layout.entries()):
        seg = vec.values[off:off + n].reshape(shape)
        out[name] = seg.astype(dtype) if dtype is not None else seg.copy()
    return out


def project(g_f: GradVector, g_s: GradVector) -> GradVector:
    """Remove from g_f its component along g_s."""
    coef = g_f.dot(g_s) / g_s.dot(g_s)
    return GradVector(g_f.values - coef * g_s.values, g_f.layout)


def regularize(g_f: GradVector, g_s: GradVector) -> tuple[GradVector, bool]:
    """Return (g*, conflicted).

    When g_f . g_s < 0 the final-exit gradient is projected onto the normal
    plane of g_s before the two are summed; otherwise they are summed as is.
    A vanishing g_s always takes the pass-through branch.
    """
    _same_layout(g_f, g_s)
    dot = g_f.dot(g_s)
    if dot < 0.0 and g_s.dot(g_s) >= NORM_FLOOR:
        return project(g_f, g_s) + g_s, True
    return g_f + g_s, False


class DiagnosticLog:
    """Appends one JSON line per optimisation step: dot, norms, conflict flag."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def record(self, step: int, g_f: GradVector, g_s: GradVector, conflicted: bool) -> dict:
        rec = {
            "step": int(step),
            "dot": g_f.dot(g_s),
            "norm_f": g_f.norm(),
            "norm_s": g_s.norm(),
            "conflicted": bool(conflicted),
        }
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
