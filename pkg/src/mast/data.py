"""LibSVM ingestion, seeded splitting and classification accuracy.

The content hash is 64-bit FNV-1a over the canonical serialization produced by
:func:`serialize_libsvm`, so it is independent of whitespace, label spelling
(``1``/``+1``/``0``) and float formatting in the source file.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import scipy.sparse as sp

from . import rng as streams

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


class LibsvmError(ValueError):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows as a CSR matrix with 0-based columns and labels in {-1, +1}."""

    rows: sp.csr_matrix
    labels: np.ndarray
    content_hash: int = field(init=False)

    def __post_init__(self):
        rows = sp.csr_matrix(self.rows, dtype=float)
        labels = np.asarray(self.labels, dtype=float).ravel()
        if rows.shape[0] != labels.size:
            raise ValueError(f"{rows.shape[0]} rows but {labels.size} labels")
        if not np.all(np.abs(labels) == 1.0):
            raise ValueError("labels must be -1 or +1")
        labels.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "content_hash", fnv1a_64(serialize_libsvm(self).encode()))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def __eq__(self, other):
        return isinstance(other, Dataset) and self.content_hash == other.content_hash

    def __hash__(self):
        return hash(self.content_hash)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.rows[idx], self.labels[idx])

    def with_intercept(self) -> "Dataset":
        """Append a constant-1 feature as the last column."""
        ones = sp.csr_matrix(np.ones((self.n, 1)))
        return Dataset(sp.hstack([self.rows, ones], format="csr"), self.labels)


def _format_value(v: float) -> str:
    return str(int(v)) if float(v).is_integer() and abs(v) < 2**53 else repr(float(v))


def serialize_libsvm(ds: Dataset) -> str:
    out = []
    rows = ds.rows
    for i in range(ds.n):
        lo, hi = rows.indptr[i], rows.indptr[i + 1]
        parts = ["+1" if ds.labels[i] > 0 else "-1"]
        parts += [f"{j + 1}:{_format_value(v)}" for j, v in zip(rows.indices[lo:hi], rows.data[lo:hi])]
        out.append(" ".join(parts))
    return "\n".join(out) + "\n"


def parse_libsvm(text: Union[bytes, str], n_features: int | None = None) -> Dataset:
    """Parse LibSVM text. ``n_features`` pads the column count (never truncates)."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LibsvmError(f"not valid UTF-8: {exc}") from None
    labels, data, indices, indptr = [], [], [], [0]
    alphabet = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise LibsvmError(f"bad label {tokens[0]!r}", lineno) from None
        if label not in (-1.0, 0.0, 1.0):
            raise LibsvmError(f"label {tokens[0]!r} is not binary", lineno)
        alphabet.add(label)
        if {0.0, -1.0} <= alphabet:
            raise LibsvmError("labels mix the {0,1} and {-1,+1} alphabets", lineno)
        prev = 0
        for tok in tokens[1:]:
            key, sep, val = tok.partition(":")
            if not sep:
                raise LibsvmError(f"expected index:value, got {tok!r}", lineno)
            try:
                j, v = int(key), float(val)
            except ValueError:
                raise LibsvmError(f"malformed pair {tok!r}", lineno) from None
            if j < 1:
                raise LibsvmError(f"feature index {j} must be at least 1", lineno)
            if j <= prev:
                raise LibsvmError(f"feature index {j} is not strictly increasing", lineno)
            if not math.isfinite(v):
                raise LibsvmError(f"non-finite value in {tok!r}", lineno)
            prev = j
            indices.append(j - 1)
            data.append(v)
        labels.append(label)
        indptr.append(len(indices))
    if not labels:
        raise LibsvmError("no samples found")
    y = np.array(labels)
    y[y == 0.0] = -1.0
    d = max(indices, default=-1) + 1
    if n_features is not None:
        d = max(d, n_features)
    rows = sp.csr_matrix((np.array(data, dtype=float), np.array(indices, dtype=np.int64), np.array(indptr)),
                         shape=(len(labels), d))
    return Dataset(rows, y)


def load_libsvm(path, n_features: int | None = None) -> Dataset:
    return parse_libsvm(Path(path).read_bytes(), n_features)


@dataclass(frozen=True)
class Split:
    parts: tuple
    seed: int
    fractions: tuple

    @property
    def train(self) -> np.ndarray:
        return self.parts[0]

    @property
    def has_validation(self) -> bool:
        return len(self.parts) >= 3

    @property
    def has_test(self) -> bool:
        return len(self.parts) >= 2

    @property
    def validation(self) -> np.ndarray:
        if len(self.parts) < 3:
            raise AttributeError("this split has no validation part")
        return self.parts[1]

    @property
    def test(self) -> np.ndarray:
        if len(self.parts) < 2:
            raise AttributeError("this split has no test part")
        return self.parts[-1]

    @property
    def sizes(self) -> tuple:
        return tuple(len(p) for p in self.parts)


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation; ties go to the earlier part."""
    exact = [n * f for f in fractions]
    sizes = [math.floor(e + 1e-9) for e in exact]
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(ds: Dataset, fractions: Sequence[float], seed: int) -> Split:
    fractions = tuple(float(f) for f in fractions)
    if not fractions or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)!r}, expected 1")
    perm = streams.derive_stream(seed, streams.SPLIT, ds.content_hash).permutation(ds.n)
    bounds = np.cumsum([0] + split_sizes(ds.n, fractions))
    parts = tuple(np.sort(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:]))
    return Split(parts, seed, fractions)


def margins(ds: Dataset, idx, x) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    x = np.asarray(x, dtype=float)
    if x.shape != (ds.d,):
        raise ValueError(f"model has shape {x.shape}, dataset has {ds.d} features")
    return ds.labels[idx] * (ds.rows[idx] @ x)


def accuracy(ds: Dataset, idx, x) -> float:
    """Fraction of rows with positive margin; zero margins count as errors."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("accuracy over an empty index set")
    return float(np.mean(margins(ds, idx, x) > 0))


def batch_accuracy(ds: Dataset, idx, models: np.ndarray) -> np.ndarray:
    """Accuracy for each row of ``models`` (shape ``(m, d)``)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("accuracy over an empty index set")
    m = ds.rows[idx] @ np.asarray(models, dtype=float).T
    return np.mean(ds.labels[idx, None] * m > 0, axis=0)


def synthetic_mixed(
    n: int,
    d: int,
    seed: int,
    offset: float = 3.0,
    separation: float = 0.5,
    spread: float = 1.0,
    weak_rates: tuple = (0.15, 0.1),
    pos_frac: float = 0.5,
    decimals: int = 4,
) -> Dataset:
    """Binary classification data mixing one dense numeric column with sparse indicators.

    Column 0 is a constant 1, column 1 an unscaled numeric attribute
    ``offset + separation * y + spread * noise`` and the remaining ``d - 2``
    columns are binary indicators. Half of the indicators fire at rate
    ``weak_rates[0]`` for positives and ``weak_rates[1]`` for negatives; the
    other half the reverse. A linear model has to cancel the numeric column's
    offset against the constant column, which makes it fragile to masking.
    """
    if d < 4:
        raise ValueError("need at least four columns")
    g = streams.derive_stream(seed, streams.INIT)
    y = np.where(g.random(n) < pos_frac, 1.0, -1.0)
    m = d - 2
    hi, lo = weak_rates
    pos = np.where(np.arange(m) < m // 2, hi, lo)
    rate = np.where(y[:, None] > 0, pos, hi + lo - pos)
    indicators = (g.random((n, m)) < rate).astype(float)
    numeric = np.round(offset + separation * y + spread * g.standard_normal(n), decimals)
    dense = np.column_stack([np.ones(n), numeric, indicators])
    return Dataset(sp.csr_matrix(dense), y)


FIXTURES = {"mixed": "mixed.libsvm"}


def fixture_path(name: str) -> Path:
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; known: {sorted(FIXTURES)}")
    return Path(__file__).with_name("fixtures") / FIXTURES[name]


def load_fixture(name: str = "mixed") -> Dataset:
    return load_libsvm(fixture_path(name))
