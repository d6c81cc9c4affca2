"""Run configuration: one JSON document, deep-merged over defaults, then
patched by CLI flags."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .data import GLUE_TASKS, SyntheticSpec, TaskSpec
from .errors import ConfigError
from .losses import SDConfig
from .model import ModelConfig
from .train import RegimeConfig

DEFAULTS: dict = {
    "model": {"k": 6, "hidden": 128, "heads": 4, "ffn": 256, "dtype": "f32", "seed": 0},
    "regime": {
        "regime": "romebert",
        "epochs": None,          # None -> [3] one-stage, [3, 3] two-stage
        "batch_size": 32,
        "lr": 5e-4,
        "warmup": 0.1,
        "clip_norm": 1.0,
        "seed": 0,
    },
    "sd": {"gamma": 0.9, "temperature": 3.0},
    "task": {
        "name": "synthetic",
        "synthetic": {},
        "data": None,            # directory holding train/dev TSVs
        "train_file": "train.tsv",
        "dev_file": "dev.tsv",
        "spec": None,            # custom TaskSpec fields for non-GLUE TSVs
        "vocab_size": 10000,
        "max_len": 64,
    },
    "thresholds": [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
}


def deep_merge(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in patch.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load(path=None, overrides: dict | None = None) -> dict:
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be an object")
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"{p}: unknown sections {sorted(unknown)}")
    cfg = deep_merge(DEFAULTS, doc)
    return deep_merge(cfg, overrides or {})


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def digest(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(hashlib.sha256(p).digest())
    return h.hexdigest()


@dataclass
class Resolved:
    raw: dict
    regime: RegimeConfig
    task: TaskSpec
    synthetic: SyntheticSpec | None

    def model_config(self, vocab: int, classes: int, max_len: int) -> ModelConfig:
        m = dict(self.raw["model"])
        m.update(vocab=vocab, classes=classes, max_len=max_len)
        return _build(ModelConfig.from_dict, m, "model")


def _build(factory, kwargs, section):
    try:
        return factory(kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def resolve(cfg: dict) -> Resolved:
    r = dict(cfg["regime"])
    regime = r.pop("regime")
    epochs = r.pop("epochs")
    if epochs is None:
        epochs = [3, 3] if regime in ("deebert", "deebert_sd") else [3]
    sd = _build(lambda d: SDConfig(**d), cfg["sd"], "sd")
    try:
        rc = RegimeConfig(regime=regime, epochs=tuple(int(e) for e in epochs), sd=sd, **r)
    except TypeError as exc:
        raise ConfigError(f"[regime] {exc}") from exc

    t = cfg["task"]
    name = t["name"]
    synthetic = None
    if name == "synthetic":
        synthetic = _build(lambda d: SyntheticSpec(**d), t.get("synthetic") or {}, "task.synthetic")
        spec = TaskSpec("synthetic", text_a=0, label=1)
    elif t.get("spec"):
        spec = _build(TaskSpec.from_dict, {"name": name, **t["spec"]}, "task.spec")
    elif name.lower() in GLUE_TASKS:
        spec = GLUE_TASKS[name.lower()]
    else:
        raise ConfigError(f"unknown task {name!r}; use 'synthetic', a GLUE task or give task.spec")
    return Resolved(cfg, rc, spec, synthetic)
