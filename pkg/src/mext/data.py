"""GLUE-style TSV loading, a word-level frequency vocabulary, and a seeded
synthetic task with an easy (layer-1 solvable) and a hard (pair-matching)
stratum."""
from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import ConfigError, DataError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = range(4)

EASY, HARD, NO_STRATUM = 0, 1, -1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def normalize(text: str) -> list[str]:
    """Lowercase, then split on whitespace and around punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TaskSpec:
    name: str
    text_a: int
    label: int
    text_b: int | None = None
    metric: str = "accuracy"
    labels: tuple[str, ...] = ("0", "1")
    header: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.metric not in ("accuracy", "f1"):
            raise ConfigError(f"metric must be 'accuracy' or 'f1', got {self.metric!r}")
        if len(self.labels) < 2:
            raise ConfigError("a task needs at least two labels")

    @property
    def classes(self) -> int:
        return len(self.labels)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["labels"] = tuple(d.get("labels", ("0", "1")))
        if d.get("header") is not None:
            d["header"] = tuple(d["header"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# column layouts of the public GLUE train/dev files
GLUE_TASKS = {
    "sst-2": TaskSpec("sst-2", text_a=0, label=1),
    "mrpc": TaskSpec("mrpc", text_a=3, text_b=4, label=0, metric="f1"),
    "qqp": TaskSpec("qqp", text_a=3, text_b=4, label=5, metric="f1"),
    "qnli": TaskSpec("qnli", text_a=1, text_b=2, label=3, labels=("entailment", "not_entailment")),
    "rte": TaskSpec("rte", text_a=1, text_b=2, label=3, labels=("entailment", "not_entailment")),
    "mnli": TaskSpec("mnli", text_a=8, text_b=9, label=-1, labels=("contradiction", "entailment", "neutral")),
}


@dataclass
class Dataset:
    tokens: np.ndarray            # [N x L] int32, PAD-filled tail
    labels: np.ndarray            # [N] int64
    strata: np.ndarray | None = None   # [N] int8: EASY / HARD / NO_STRATUM
    metric: str = "accuracy"

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise DataError("tokens and labels disagree on the number of examples")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def mask(self) -> np.ndarray:
        return self.tokens != PAD_ID

    def subset(self, idx) -> "Dataset":
        strata = None if self.strata is None else self.strata[idx]
        return Dataset(self.tokens[idx], self.labels[idx], strata, self.metric)


class Vocab:
    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise DataError("vocabulary must start with the four reserved tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode_tokens(self, words: list[str]) -> list[int]:
        return [self.stoi.get(w, UNK_ID) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids if i not in (PAD_ID, CLS_ID, SEP_ID)]


def build_vocab(texts, max_size: int) -> Vocab:
    """Top ``max_size - 4`` words by frequency, ties broken lexicographically."""
    counts: Counter[str] = Counter()
    n = 0
    for t in texts:
        counts.update(normalize(t))
        n += 1
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked if w not in SPECIALS][: max(0, max_size - len(SPECIALS))]
    return Vocab(list(SPECIALS) + words)


def encode_pair(vocab: Vocab, text_a: str, text_b: str | None, max_len: int) -> list[int]:
    a = vocab.encode_tokens(normalize(text_a))
    if text_b is None:
        return [CLS_ID] + a[: max_len - 1]
    b = vocab.encode_tokens(normalize(text_b))
    budget = max_len - 2
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    return [CLS_ID] + a + [SEP_ID] + b


def pad_batch(seqs: list[list[int]], length: int | None = None) -> np.ndarray:
    length = max(len(s) for s in seqs) if length is None else length
    out = np.zeros((len(seqs), length), dtype=np.int32)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def read_tsv(path, spec: TaskSpec) -> list[tuple[str, str | None, str]]:
    """Raw (text_a, text_b, label) triples; the first row is the header."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    need = max(c for c in (spec.text_a, spec.text_b, spec.label) if c is not None and c >= 0) + 1
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if spec.header is not None and tuple(header) != spec.header:
            raise DataError(f"{path}: header {header} does not match task {spec.name!r}")
        if len(header) < need:
            raise DataError(f"{path}: header has {len(header)} columns, task {spec.name!r} needs {need}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < need or len(row) != len(header):
                raise DataError(f"{path}:{lineno}: malformed row ({len(row)} columns, expected {len(header)})")
            b = row[spec.text_b] if spec.text_b is not None else None
            rows.append((row[spec.text_a], b, row[spec.label]))
    return rows


def load_tsv(path, spec: TaskSpec, vocab: Vocab, max_len: int) -> Dataset:
    rows = read_tsv(path, spec)
    label_ids = {lab: i for i, lab in enumerate(spec.labels)}
    seqs, labels = [], []
    for lineno, (a, b, lab) in enumerate(rows, start=2):
        if lab not in label_ids:
            raise DataError(f"{path}:{lineno}: unknown label {lab!r} for task {spec.name!r}")
        seqs.append(encode_pair(vocab, a, b, max_len))
        labels.append(label_ids[lab])
    if not seqs:
        return Dataset(np.zeros((0, 1), dtype=np.int32), np.zeros(0, dtype=np.int64), metric=spec.metric)
    return Dataset(pad_batch(seqs), np.asarray(labels, dtype=np.int64), metric=spec.metric)


def vocab_from_tsv(path, spec: TaskSpec, max_size: int) -> Vocab:
    texts = []
    for a, b, _ in read_tsv(path, spec):
        texts.append(a if b is None else a + " " + b)
    return build_vocab(texts, max_size)


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    easy_fraction: float = 0.7
    seq_len: int = 12
    vocab_size: int = 64
    n_train: int = 16000
    n_dev: int = 4000
    seed: int = 0
    markers_per_class: int = 4
    pairs: int = 8

    def __post_init__(self):
        if not 0.0 <= self.easy_fraction <= 1.0:
            raise ConfigError("easy_fraction must lie in [0, 1]")
        if self.seq_len < 4:
            raise ConfigError("seq_len must be at least 4")
        if self.n_train < 1 or self.n_dev < 1:
            raise ConfigError("n_train and n_dev must be positive")
        if self.vocab_size < self.first_filler + 4:
            raise ConfigError(f"vocab_size must be >= {self.first_filler + 4} for these marker counts")

    @property
    def first_filler(self) -> int:
        return len(SPECIALS) + 2 * self.markers_per_class + 2 * self.pairs

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Alphabet:
    easy: list[np.ndarray] = field(default_factory=list)   # marker ids per class
    keys: np.ndarray = None
    partners: np.ndarray = None
    fillers: np.ndarray = None


def _alphabet(spec: SyntheticSpec) -> _Alphabet:
    m, p = spec.markers_per_class, spec.pairs
    base = len(SPECIALS)
    al = _Alphabet()
    al.easy = [np.arange(base, base + m), np.arange(base + m, base + 2 * m)]
    al.keys = np.arange(base + 2 * m, base + 2 * m + p)
    al.partners = np.arange(base + 2 * m + p, base + 2 * m + 2 * p)
    al.fillers = np.arange(spec.first_filler, spec.vocab_size)
    return al


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    lab = np.arange(n) % 2
    rng.shuffle(lab)
    return lab


def _generate(spec: SyntheticSpec, n: int, rng: np.random.Generator) -> Dataset:
    al = _alphabet(spec)
    n_easy = int(round(n * spec.easy_fraction))
    strata = np.array([EASY] * n_easy + [HARD] * (n - n_easy), dtype=np.int8)
    labels = np.empty(n, dtype=np.int64)
    labels[:n_easy] = _balanced_labels(n_easy, rng)
    labels[n_easy:] = _balanced_labels(n - n_easy, rng)
    tokens = np.zeros((n, spec.seq_len), dtype=np.int32)
    min_len = max(4, spec.seq_len // 2)
    for j in range(n):
        length = int(rng.integers(min_len, spec.seq_len + 1))
        row = tokens[j]
        row[0] = CLS_ID
        row[1:length] = rng.choice(al.fillers, size=length - 1)
        y = labels[j]
        if strata[j] == EASY:
            row[1] = rng.choice(al.easy[y])
            row[length - 1] = rng.choice(al.partners)
        else:
            key = int(rng.integers(len(al.keys)))
            row[1] = al.keys[key]
            if y == 1:
                partner = key
            else:
                partner = int(rng.integers(len(al.partners) - 1))
                partner += partner >= key
            row[length - 1] = al.partners[partner]
    perm = rng.permutation(n)
    return Dataset(tokens[perm], labels[perm], strata[perm])


def gen_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Seeded (train, dev) split.

    Easy examples carry a class marker as the first content token. Hard
    examples start with a key token and end with a partner token; the label
    says whether the partner is the key's fixed mate. Every other position is
    filler. Labels are exactly balanced inside each stratum.
    """
    rng = np.random.default_rng(spec.seed)
    train = _generate(spec, spec.n_train, rng)
    dev = _generate(spec, spec.n_dev, rng)
    return train, dev


def synthetic_task() -> TaskSpec:
    return TaskSpec("synthetic", text_a=0, label=1)


# ---------------------------------------------------------------------------
# dataset cache
# ---------------------------------------------------------------------------

def save_dataset(path, ds: Dataset, meta: dict | None = None) -> None:
    entries = [("tokens", "data", ds.tokens.astype(np.int32)), ("labels", "data", ds.labels.astype(np.int64))]
    if ds.strata is not None:
        entries.append(("strata", "data", ds.strata.astype(np.int8)))
    container.write(path, entries, {"metric": ds.metric, **(meta or {})})


def load_dataset(path) -> Dataset:
    meta, _, arrays = container.read(path)
    return Dataset(arrays["tokens"], arrays["labels"], arrays.get("strata"), meta.get("metric", "accuracy"))
