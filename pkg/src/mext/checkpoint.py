"""ParamStore <-> MEXT1 checkpoint files."""
from __future__ import annotations

import numpy as np

from . import container
from .errors import CheckpointMismatch, ConfigError
from .model import ModelConfig, ParamStore, init


def save(path, store: ParamStore, meta: dict | None = None) -> None:
    meta = {"model": store.config.to_dict(), **(meta or {})}
    container.write(path, ((n, store.ownership[n], store[n].data) for n in store), meta)


def expected_layout(cfg: ModelConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    ref = init(cfg)
    return [(n, ref.ownership[n], ref[n].shape) for n in ref]


def check_layout(cfg: ModelConfig, records: list[dict]) -> None:
    want = expected_layout(cfg)
    got = [(r["name"], r["ownership"], tuple(r["shape"])) for r in records]
    if want != got:
        missing = {w[0] for w in want} ^ {g[0] for g in got}
        detail = f"differing names: {sorted(missing)[:5]}" if missing else "shapes or ownership differ"
        raise CheckpointMismatch(f"checkpoint layout does not match model config ({detail})")
    dt = {"f32": "f32", "f64": "f64"}[cfg.dtype]
    if any(r["dtype"] != dt for r in records):
        raise CheckpointMismatch(f"checkpoint dtype does not match model config dtype {cfg.dtype}")


def load(path, expect: ModelConfig | None = None) -> tuple[ParamStore, dict]:
    """Read a checkpoint; with ``expect`` given, its layout must match exactly."""
    meta, records, arrays = container.read(path)
    try:
        cfg = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointMismatch(f"{path}: checkpoint carries no valid model config") from exc
    check_layout(cfg, records)
    if expect is not None:
        check_layout(expect, records)
    store = ParamStore(cfg)
    for r in records:
        store.add(r["name"], np.array(arrays[r["name"]]), r["ownership"])
    return store, meta
