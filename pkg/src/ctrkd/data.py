"""Feature pipeline: raw click logs -> vocabularies -> encoded batches.

Raw input is header-less delimited text (tab or comma), one column per
field plus a binary label column. Categorical tokens below a frequency
threshold collapse to the reserved UNK index 0; numeric values x > 2 are
squashed to (ln x)^2. Vocabularies are built on the training partition
only and frozen afterwards.
"""
from __future__ import annotations

import gzip
import hashlib
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

UNK_INDEX = 0

CATEGORICAL = "categorical"
NUMERIC = "numeric"


@dataclass(frozen=True)
class FieldSchema:
    name: str
    kind: str
    position: int


class TableSchema:
    """Column layout of one raw file: label position plus typed fields."""

    def __init__(self, label_column: int, fields: Sequence[FieldSchema],
                 delimiter: str = "\t"):
        kinds = {f.kind for f in fields}
        if not kinds <= {CATEGORICAL, NUMERIC}:
            raise ValueError(f"unknown field kind in {kinds}")
        positions = [f.position for f in fields]
        if len(set(positions)) != len(positions):
            raise ValueError("field positions must be unique")
        if label_column in positions:
            raise ValueError("label column cannot also be a feature column")
        if sorted(positions) != list(range(min(positions), min(positions) + len(positions))):
            raise ValueError("feature positions must be contiguous")
        self.label_column = label_column
        self.fields = tuple(sorted(fields, key=lambda f: f.position))
        self.delimiter = delimiter

    @property
    def categorical_fields(self) -> tuple[FieldSchema, ...]:
        return tuple(f for f in self.fields if f.kind == CATEGORICAL)

    @property
    def numeric_fields(self) -> tuple[FieldSchema, ...]:
        return tuple(f for f in self.fields if f.kind == NUMERIC)

    @property
    def n_columns(self) -> int:
        return max([self.label_column] + [f.position for f in self.fields]) + 1

    @classmethod
    def criteo(cls, n_numeric: int = 13, n_categorical: int = 26) -> "TableSchema":
        # label, I1..I13, C1..C26, tab-separated
        fields = [FieldSchema(f"I{i + 1}", NUMERIC, 1 + i) for i in range(n_numeric)]
        fields += [FieldSchema(f"C{i + 1}", CATEGORICAL, 1 + n_numeric + i)
                   for i in range(n_categorical)]
        return cls(0, fields, delimiter="\t")

    @classmethod
    def avazu(cls, n_categorical: int = 22) -> "TableSchema":
        # id, click, then categorical fields, comma-separated; id is ignored
        fields = [FieldSchema(f"C{i + 1}", CATEGORICAL, 2 + i) for i in range(n_categorical)]
        return cls(1, fields, delimiter=",")


def read_rows(path, delimiter: str = "\t") -> list[list[str]]:
    """Read a delimited text file (gzip by .gz suffix) into column lists."""
    opener = gzip.open if str(path).endswith(".gz") else open
    rows = []
    with opener(path, "rt", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\r\n")
            if line:
                rows.append(line.split(delimiter))
    return rows


def transform_numeric(x):
    """Squash large numerics: x if x <= 2, else (ln x)^2."""
    arr = np.asarray(x, dtype=np.float64)
    out = arr.copy()
    big = arr > 2.0
    out[big] = np.square(np.log(arr[big]))
    return float(out) if np.isscalar(x) or out.ndim == 0 else out


def _parse_numeric(token: str) -> float:
    # missing and negative raw values map to 0 before the transform
    if token == "":
        return 0.0
    value = float(token)
    return 0.0 if value < 0 else value


def _escape(token: str) -> str:
    return token.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(token: str) -> str:
    out = []
    it = iter(token)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, "")
        out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, nxt))
    return "".join(out)


class FeatureVocabulary:
    """Per-field token -> index maps with index 0 reserved for UNK.

    Tokens whose training frequency is below ``min_count`` are absent from
    the map and therefore encode to UNK; so does anything unseen at build
    time. Indices are dense and assigned in sorted token order.
    """

    def __init__(self, mapping: dict[str, dict[str, int]], min_count: int | None):
        self.mapping = mapping
        self.min_count = min_count
        self._inverse: dict[str, dict[int, str]] | None = None

    @classmethod
    def build(cls, rows: Sequence[Sequence[str]], schema: TableSchema,
              min_count: int) -> "FeatureVocabulary":
        if not rows:
            raise ValueError("cannot build a vocabulary from zero rows")
        cat_fields = schema.categorical_fields
        counters = {f.name: Counter() for f in cat_fields}
        width = schema.n_columns
        for i, row in enumerate(rows):
            if len(row) < width:
                raise ValueError(f"row {i} has {len(row)} columns, schema needs {width}")
            for f in cat_fields:
                counters[f.name][row[f.position]] += 1
        mapping = {}
        for f in cat_fields:
            kept = sorted(t for t, c in counters[f.name].items() if c >= min_count)
            mapping[f.name] = {tok: i + 1 for i, tok in enumerate(kept)}
        return cls(mapping, min_count)

    def size(self, field: str) -> int:
        return len(self.mapping[field]) + 1  # + UNK

    def sizes(self) -> tuple[int, ...]:
        return tuple(self.size(f) for f in self.mapping)

    def index(self, field: str, token: str) -> int:
        return self.mapping[field].get(token, UNK_INDEX)

    def token(self, field: str, index: int) -> str | None:
        """Inverse lookup; None for UNK."""
        if self._inverse is None:
            self._inverse = {f: {i: t for t, i in m.items()} for f, m in self.mapping.items()}
        if index == UNK_INDEX:
            return None
        return self._inverse[field][index]

    def _serialize(self) -> bytes:
        lines = []
        for field in sorted(self.mapping):
            for token, index in sorted(self.mapping[field].items(), key=lambda kv: kv[1]):
                lines.append(f"{_escape(field)}\t{_escape(token)}\t{index}\n")
        return "".join(lines).encode("utf-8")

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self._serialize())

    @classmethod
    def load(cls, path) -> "FeatureVocabulary":
        mapping: dict[str, dict[str, int]] = {}
        with open(path, "rb") as f:
            for line in f.read().decode("utf-8").splitlines():
                field, token, index = line.split("\t")
                mapping.setdefault(_unescape(field), {})[_unescape(token)] = int(index)
        for field, m in mapping.items():
            if sorted(m.values()) != list(range(1, len(m) + 1)):
                raise ValueError(f"vocabulary file has non-dense indices for field {field}")
        return cls(mapping, min_count=None)

    def fingerprint(self) -> str:
        return hashlib.sha256(self._serialize()).hexdigest()


@dataclass(frozen=True)
class EncodedSample:
    categorical: np.ndarray
    numeric: np.ndarray
    label: float


@dataclass(frozen=True)
class Batch:
    cat: np.ndarray      # (B, n_categorical) int32
    num: np.ndarray      # (B, n_numeric) float64
    labels: np.ndarray   # (B, 1) float64

    def __len__(self) -> int:
        return self.cat.shape[0]


class EncodedDataset:
    """Column arrays for a partition, with instrumented label access.

    Every read through the ``labels`` property bumps ``label_reads``; code
    paths that must not consume labels (KD-loss early stopping) can be
    audited by checking the counter stays at zero.
    """

    def __init__(self, cat: np.ndarray, num: np.ndarray, labels: np.ndarray):
        cat = np.asarray(cat, dtype=np.int32)
        num = np.asarray(num, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        n = labels.shape[0]
        if cat.ndim != 2 or num.ndim != 2 or cat.shape[0] != n or num.shape[0] != n:
            raise ValueError("cat/num/labels row counts disagree")
        self.cat = cat
        self.num = num
        self._labels = labels
        self.label_reads = 0

    @property
    def labels(self) -> np.ndarray:
        self.label_reads += 1
        return self._labels

    def __len__(self) -> int:
        return self._labels.shape[0]

    @property
    def n_categorical(self) -> int:
        return self.cat.shape[1]

    @property
    def n_numeric(self) -> int:
        return self.num.shape[1]

    def sample(self, i: int) -> EncodedSample:
        return EncodedSample(self.cat[i].copy(), self.num[i].copy(), float(self.labels[i]))

    def subset(self, indices) -> "EncodedDataset":
        idx = np.asarray(indices)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        return EncodedDataset(self.cat[idx], self.num[idx], self._labels[idx])

    @classmethod
    def concatenate(cls, parts: Iterable["EncodedDataset"]) -> "EncodedDataset":
        parts = list(parts)
        return cls(np.concatenate([p.cat for p in parts]),
                   np.concatenate([p.num for p in parts]),
                   np.concatenate([p._labels for p in parts]))

    def save_npz(self, path) -> None:
        np.savez(path, cat=self.cat, num=self.num, labels=self._labels)

    @classmethod
    def load_npz(cls, path) -> "EncodedDataset":
        with np.load(path) as z:
            return cls(z["cat"], z["num"], z["labels"])


def encode_rows(rows: Sequence[Sequence[str]], schema: TableSchema,
                vocab: FeatureVocabulary) -> EncodedDataset:
    """Map raw rows to index/value arrays using a frozen vocabulary."""
    cat_fields = schema.categorical_fields
    num_fields = schema.numeric_fields
    n = len(rows)
    cat = np.zeros((n, len(cat_fields)), dtype=np.int32)
    num = np.zeros((n, len(num_fields)), dtype=np.float64)
    labels = np.zeros(n, dtype=np.float64)
    for i, row in enumerate(rows):
        raw_label = row[schema.label_column]
        if raw_label not in ("0", "1"):
            raise ValueError(f"row {i}: label {raw_label!r} is not binary")
        labels[i] = float(raw_label)
        for j, f in enumerate(cat_fields):
            cat[i, j] = vocab.index(f.name, row[f.position])
        for j, f in enumerate(num_fields):
            num[i, j] = transform_numeric(_parse_numeric(row[f.position]))
    return EncodedDataset(cat, num, labels)


@dataclass(frozen=True)
class RandomRatioSplit:
    ratios: tuple[float, float, float]
    seed: int


@dataclass(frozen=True)
class SequentialSplit:
    day_column: int
    train_days: int


def split_rows(rows: Sequence, strategy) -> tuple[list, list, list]:
    """Deterministic disjoint+exhaustive train/val/test partition of rows."""
    if isinstance(strategy, RandomRatioSplit):
        return _split_random(rows, strategy)
    if isinstance(strategy, SequentialSplit):
        return _split_sequential(rows, strategy)
    raise TypeError(f"unknown split strategy {strategy!r}")


def _split_random(rows, strategy: RandomRatioSplit):
    r = strategy.ratios
    if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negatives summing to 1, got {r}")
    n = len(rows)
    perm = np.random.default_rng(strategy.seed).permutation(n)
    b1 = math.floor(n * r[0] + 0.5)
    b2 = math.floor(n * (r[0] + r[1]) + 0.5)
    parts = (np.sort(perm[:b1]), np.sort(perm[b1:b2]), np.sort(perm[b2:]))
    return tuple([rows[i] for i in part] for part in parts)


def _split_sequential(rows, strategy: SequentialSplit):
    if strategy.train_days < 1:
        raise ValueError("sequential split needs at least one training day")
    days_in_order: list[str] = []
    day_of_row = []
    for i, row in enumerate(rows):
        if strategy.day_column >= len(row):
            raise ValueError(f"row {i} has no day column {strategy.day_column}")
        day = row[strategy.day_column]
        if day not in days_in_order:
            days_in_order.append(day)
        day_of_row.append(day)
    if len(days_in_order) <= strategy.train_days:
        raise ValueError(f"found {len(days_in_order)} days, need more than "
                         f"train_days={strategy.train_days} to form a tail")
    train_set = set(days_in_order[:strategy.train_days])
    train = [r for r, d in zip(rows, day_of_row) if d in train_set]
    tail = [r for r, d in zip(rows, day_of_row) if d not in train_set]
    half = len(tail) // 2
    return train, tail[:half], tail[half:]


def batches(dataset: EncodedDataset, batch_size: int, shuffle: bool = False,
            seed=0):
    """Stream the dataset once as Batch objects; order fixed by the seed."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    else:
        order = np.arange(n)
    labels = dataset.labels
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(dataset.cat[idx], dataset.num[idx], labels[idx].reshape(-1, 1))
