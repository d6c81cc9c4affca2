"""Multi-exit post-LN transformer encoder.

Layer ``i`` (1-based) feeds its own classifier on the first-token state:
``exit{i}`` for ``i < k`` is an off-ramp, ``exit{k}`` is the final classifier.
"""
from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError
from .tensor import Tensor

PAD_ID = 0
MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    k: int = 6
    hidden: int = 128
    heads: int = 4
    ffn: int = 256
    vocab: int = 1000
    classes: int = 2
    max_len: int = 64
    seed: int = 0
    dtype: str = "f32"
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if min(self.hidden, self.ffn, self.vocab, self.max_len) < 1:
            raise ConfigError("hidden, ffn, vocab and max_len must be positive")
        if self.dtype not in T.DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(T.DTYPES)}, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def np_dtype(self):
        return T.DTYPES[self.dtype]


def ownership_group(tag: str) -> str:
    """'backbone:layer3' -> 'backbone', 'off_ramp:2' -> 'off_ramp'."""
    return tag.split(":", 1)[0]


class ParamStore:
    """Ordered named parameters, each with exactly one ownership tag."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.tensors: dict[str, Tensor] = {}
        self.ownership: dict[str, str] = {}

    def add(self, name: str, data: np.ndarray, owner: str) -> None:
        if name in self.tensors:
            raise ContractError(f"duplicate parameter {name!r}")
        self.tensors[name] = Tensor(data, name=name)
        self.ownership[name] = owner

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, *groups: str) -> list[str]:
        """Parameter names whose tag or tag group is in ``groups`` (all if empty)."""
        if not groups:
            return list(self.tensors)
        return [n for n, tag in self.ownership.items() if tag in groups or ownership_group(tag) in groups]

    def exit_owner(self, i: int) -> str:
        return "final_classifier" if i == self.config.k else f"off_ramp:{i}"

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def set_trainable(self, names) -> None:
        names = set(names)
        for n, t in self.tensors.items():
            t.requires_grad = n in names

    def copy(self) -> "ParamStore":
        out = ParamStore(self.config)
        for n, t in self.tensors.items():
            out.add(n, t.data.copy(), self.ownership[n])
        return out

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init(config: ModelConfig) -> ParamStore:
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    h, f, c = config.hidden, config.ffn, config.classes
    store = ParamStore(config)

    def weight(name, shape, owner):
        store.add(name, _trunc_normal(rng, shape, config.init_std, dt), owner)

    def zeros(name, n, owner):
        store.add(name, np.zeros(n, dtype=dt), owner)

    def ln(prefix, owner):
        store.add(prefix + ".gain", np.ones(h, dtype=dt), owner)
        zeros(prefix + ".bias", h, owner)

    emb = "backbone:embedding"
    weight("embed.token", (config.vocab, h), emb)
    weight("embed.position", (config.max_len, h), emb)
    ln("embed.ln", emb)
    for layer in range(1, config.k + 1):
        own = f"backbone:layer{layer}"
        p = f"layer{layer}"
        for proj in ("q", "k", "v", "o"):
            weight(f"{p}.attn.{proj}.weight", (h, h), own)
            zeros(f"{p}.attn.{proj}.bias", h, own)
        ln(f"{p}.ln1", own)
        weight(f"{p}.ffn.in.weight", (h, f), own)
        zeros(f"{p}.ffn.in.bias", f, own)
        weight(f"{p}.ffn.out.weight", (f, h), own)
        zeros(f"{p}.ffn.out.bias", h, own)
        ln(f"{p}.ln2", own)
    for i in range(1, config.k + 1):
        own = store.exit_owner(i)
        weight(f"exit{i}.weight", (h, c), own)
        zeros(f"exit{i}.bias", c, own)
    return store


def pad_mask(tokens: np.ndarray) -> np.ndarray:
    return np.asarray(tokens) != PAD_ID


def _check_tokens(params: ParamStore, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DataError(f"tokens must be a [batch x length] id matrix, got shape {tokens.shape}")
    if tokens.dtype.kind not in "iu":
        raise DataError("token ids must be integers")
    cfg = params.config
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise DataError(f"token id out of range [0, {cfg.vocab})")
    if tokens.shape[1] > cfg.max_len:
        raise DataError(f"sequence length {tokens.shape[1]} exceeds max_len={cfg.max_len}")
    return tokens


def _linear(params: ParamStore, x: Tensor, prefix: str) -> Tensor:
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def _embed(params: ParamStore, tokens: np.ndarray) -> Tensor:
    cfg = params.config
    length = tokens.shape[1]
    x = T.embedding(params["embed.token"], tokens)
    pos = T.getitem(params["embed.position"], slice(0, length))
    x = x + pos
    return T.layernorm(x, params["embed.ln.gain"], params["embed.ln.bias"], cfg.ln_eps)


def _block(params: ParamStore, x: Tensor, layer: int, mask_add: Tensor) -> Tensor:
    cfg = params.config
    b, length, h = x.shape
    nh = cfg.heads
    d = h // nh
    p = f"layer{layer}"

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, length, nh, d).transpose(0, 2, 1, 3)

    q = heads(_linear(params, x, f"{p}.attn.q"))
    kk = heads(_linear(params, x, f"{p}.attn.k"))
    v = heads(_linear(params, x, f"{p}.attn.v"))
    scores = (q @ kk.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d)) + mask_add
    ctx = T.softmax(scores) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, length, h)
    x = T.layernorm(x + _linear(params, ctx, f"{p}.attn.o"), params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"], cfg.ln_eps)
    ff = _linear(params, T.gelu(_linear(params, x, f"{p}.ffn.in")), f"{p}.ffn.out")
    return T.layernorm(x + ff, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"], cfg.ln_eps)


def iter_exits(params: ParamStore, tokens, mask=None, upto: int | None = None) -> Iterator[Tensor]:
    """Yield f_1, f_2, ... lazily; layer i+1 is only computed when asked for."""
    cfg = params.config
    upto = cfg.k if upto is None else upto
    tokens = _check_tokens(params, tokens)
    mask = pad_mask(tokens) if mask is None else np.asarray(mask, dtype=bool)
    dt = cfg.np_dtype
    mask_add = Tensor(np.where(mask, 0.0, MASK_FILL).astype(dt)[:, None, None, :])
    x = _embed(params, tokens)
    for layer in range(1, upto + 1):
        x = _block(params, x, layer, mask_add)
        yield _linear(params, x[:, 0, :], f"exit{layer}")


def forward_all_exits(params: ParamStore, tokens, mask=None) -> list[Tensor]:
    """Logits of every exit; entry ``i-1`` holds f_i with shape [batch x classes]."""
    return list(iter_exits(params, tokens, mask))


def forward_prefix(params: ParamStore, tokens, upto: int, mask=None) -> Tensor:
    """Logits of f_upto only, never running layers deeper than ``upto``."""
    if not 1 <= upto <= params.config.k:
        raise ContractError(f"exit index must lie in [1, {params.config.k}], got {upto}")
    out = None
    for out in iter_exits(params, tokens, mask, upto=upto):
        pass
    return out
