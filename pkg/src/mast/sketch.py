"""Random diagonal sketches: sampling, application and spectral constants.

A sketch ``S`` is stored as its diagonal support (sorted coordinate indices)
together with the nonzero scales. Distributions expose the three spectral
constants used throughout the convergence theory:

* ``l_d``     largest eigenvalue of ``E[S^T S]``
* ``mu_d``    smallest eigenvalue of ``E[S^T S]``
* ``l_s_max`` almost-sure bound on ``lambda_max(S^T S)``
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

DEFAULT_SUPPORT_LIMIT = 10_000


class SupportTooLarge(ValueError):
    """Raised when exact enumeration of a sketch support would exceed the limit."""

    def __init__(self, count: int, limit: int):
        self.count = count
        self.limit = limit
        super().__init__(f"support has {count} members, limit is {limit}")

    def __reduce__(self):
        return type(self), (self.count, self.limit)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SketchSample:
    """One realized diagonal sketch."""

    dim: int
    indices: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        sc = np.asarray(self.scales, dtype=float).ravel()
        if idx.shape != sc.shape:
            raise ValueError("indices and scales must have the same length")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if idx.size and (idx.min() < 0 or idx.max() >= self.dim):
            raise ValueError("sketch index out of range")
        if not np.all(np.isfinite(sc)) or np.any(sc < 0):
            raise ValueError("sketch scales must be finite and non-negative")
        keep = sc != 0.0
        idx, sc = idx[keep], sc[keep]
        order = np.argsort(idx, kind="stable")
        idx, sc = idx[order], sc[order]
        if idx.size > 1 and np.any(np.diff(idx) == 0):
            raise ValueError("duplicate sketch index")
        object.__setattr__(self, "indices", _frozen(idx))
        object.__setattr__(self, "scales", _frozen(sc))

    @classmethod
    def from_mapping(cls, dim: int, entries: dict[int, float]) -> "SketchSample":
        keys = sorted(entries)
        return cls(dim, np.array(keys, dtype=np.int64), np.array([entries[k] for k in keys], dtype=float))

    @classmethod
    def from_diagonal(cls, diag: Sequence[float]) -> "SketchSample":
        diag = np.asarray(diag, dtype=float)
        nz = np.flatnonzero(diag)
        return cls(diag.size, nz, diag[nz])

    @classmethod
    def identity(cls, dim: int) -> "SketchSample":
        return cls(dim, np.arange(dim), np.ones(dim))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def diagonal(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.scales
        return out

    def as_dict(self) -> dict[int, float]:
        return {int(i): float(c) for i, c in zip(self.indices, self.scales)}

    def l_s(self) -> float:
        """lambda_max(S^T S) for this realization."""
        return float(np.max(self.scales) ** 2) if self.nnz else 0.0

    def mu_s(self) -> float:
        if self.nnz < self.dim:
            return 0.0
        return float(np.min(self.scales) ** 2)

    def __eq__(self, other):
        if not isinstance(other, SketchSample):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.scales, other.scales)
        )

    def __hash__(self):
        return hash((self.dim, self.indices.tobytes(), self.scales.tobytes()))

    def __repr__(self):
        return f"SketchSample(dim={self.dim}, entries={self.as_dict()})"


def apply(s: SketchSample, v) -> np.ndarray:
    """Return ``S v``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (s.dim,):
        raise ValueError(f"dimension mismatch: sketch has dim {s.dim}, vector has shape {v.shape}")
    out = np.zeros(s.dim)
    out[s.indices] = s.scales * v[s.indices]
    return out


def apply_transpose(s: SketchSample, v) -> np.ndarray:
    """Return ``S^T v``; identical to :func:`apply` for diagonal sketches."""
    return apply(s, v)


@dataclass(frozen=True)
class SpectralConstants:
    l_d: float
    mu_d: float
    l_s_max: float

    @property
    def kappa_d(self) -> float:
        return self.l_d / self.mu_d


@dataclass(frozen=True, eq=False)
class SupportTable:
    """Full support of a distribution as dense arrays (one diagonal per row)."""

    diagonals: np.ndarray
    probs: np.ndarray

    @property
    def size(self) -> int:
        return int(self.probs.size)

    @property
    def uniform(self) -> bool:
        return bool(np.all(self.probs == self.probs[0]))

    def samples(self) -> list[SketchSample]:
        return [SketchSample.from_diagonal(row) for row in self.diagonals]


class SketchDistribution:
    """Base class for samplable families of diagonal sketches with ``E[S] = I``."""

    dim: int
    kind: str = "abstract"

    def sample(self, rng: np.random.Generator) -> SketchSample:
        raise NotImplementedError

    def sample_diagonals(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` independent draws as rows of diagonal entries, shape ``(n, dim)``."""
        return np.array([self.sample(rng).diagonal() for _ in range(n)]).reshape(n, self.dim)

    def spectral_constants(self) -> SpectralConstants:
        raise NotImplementedError

    def support_size(self) -> int:
        raise NotImplementedError

    def _support(self) -> Iterator[tuple[SketchSample, float]]:
        raise NotImplementedError

    def mean_diagonal(self) -> np.ndarray:
        """Closed-form diagonal of ``E[S]``."""
        return np.ones(self.dim)

    def second_moment_diagonal(self) -> np.ndarray:
        """Closed-form diagonal of ``E[S^T S]``."""
        raise NotImplementedError

    def variance_diagonal(self) -> np.ndarray:
        """Per-coordinate variance of the diagonal entries."""
        return self.second_moment_diagonal() - self.mean_diagonal() ** 2

    def enumerate_support(self, limit: int = DEFAULT_SUPPORT_LIMIT) -> list[tuple[SketchSample, float]]:
        count = self.support_size()
        if count > limit:
            raise SupportTooLarge(count, limit)
        return list(self._support())

    def support_table(self, limit: int = DEFAULT_SUPPORT_LIMIT) -> SupportTable:
        members = self.enumerate_support(limit)
        diags = np.array([s.diagonal() for s, _ in members]).reshape(len(members), self.dim)
        probs = np.array([p for _, p in members])
        return SupportTable(_frozen(diags), _frozen(probs))

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Identity(SketchDistribution):
    dim: int
    kind = "identity"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")

    def sample(self, rng):
        return SketchSample.identity(self.dim)

    def sample_diagonals(self, rng, n):
        return np.ones((n, self.dim))

    def spectral_constants(self):
        return SpectralConstants(1.0, 1.0, 1.0)

    def support_size(self):
        return 1

    def _support(self):
        yield SketchSample.identity(self.dim), 1.0

    def second_moment_diagonal(self):
        return np.ones(self.dim)

    def describe(self):
        return {"kind": "identity", "dim": self.dim}


@dataclass(frozen=True)
class BernoulliIndependent(SketchDistribution):
    """Independent scaled Bernoulli diagonal: ``c_i = 1/p_i`` with probability ``p_i``."""

    p: tuple
    kind = "bernoulli"

    def __post_init__(self):
        p = tuple(float(v) for v in np.atleast_1d(np.asarray(self.p, dtype=float)))
        if not p:
            raise ValueError("need at least one coordinate")
        for v in p:
            if not (0.0 < v <= 1.0) or not math.isfinite(v):
                raise ValueError(f"Bernoulli probabilities must lie in (0, 1], got {v}")
        object.__setattr__(self, "p", p)

    @classmethod
    def uniform(cls, dim: int, p: float) -> "BernoulliIndependent":
        return cls((p,) * dim)

    @property
    def dim(self) -> int:
        return len(self.p)

    @property
    def _p(self) -> np.ndarray:
        return np.asarray(self.p)

    def sample(self, rng):
        p = self._p
        keep = np.flatnonzero(rng.random(self.dim) < p)
        return SketchSample(self.dim, keep, 1.0 / p[keep])

    def sample_diagonals(self, rng, n):
        p = self._p
        return np.where(rng.random((n, self.dim)) < p, 1.0 / p, 0.0)

    def spectral_constants(self):
        pmin, pmax = min(self.p), max(self.p)
        return SpectralConstants(1.0 / pmin, 1.0 / pmax, 1.0 / pmin**2)

    def support_size(self):
        # coordinates with p_i = 1 are always present and do not branch
        return 2 ** sum(1 for v in self.p if v < 1.0)

    def _support(self):
        p = self._p
        forced = [i for i, v in enumerate(self.p) if v == 1.0]
        free = [i for i, v in enumerate(self.p) if v < 1.0]
        sets = []
        for r in range(len(free) + 1):
            for chosen in itertools.combinations(free, r):
                sets.append(tuple(sorted(forced + list(chosen))))
        sets.sort()
        for support in sets:
            chosen = set(support)
            prob = 1.0
            for i in free:
                prob *= p[i] if i in chosen else 1.0 - p[i]
            idx = np.array(support, dtype=np.int64)
            yield SketchSample(self.dim, idx, 1.0 / p[idx]), prob

    def second_moment_diagonal(self):
        return 1.0 / self._p

    def describe(self):
        if len(set(self.p)) == 1:
            return {"kind": "bernoulli", "dim": self.dim, "p": self.p[0]}
        return {"kind": "bernoulli", "p": list(self.p)}


@dataclass(frozen=True)
class RandK(SketchDistribution):
    """Uniform K-subset of coordinates, each kept entry scaled by ``d/K``."""

    dim: int
    k: int
    kind = "randk"

    def __post_init__(self):
        if self.dim < 1 or not (1 <= self.k <= self.dim):
            raise ValueError(f"RandK requires 1 <= K <= d, got d={self.dim}, K={self.k}")

    @property
    def scale(self) -> float:
        return self.dim / self.k

    def sample(self, rng):
        # partial Fisher-Yates: first K slots of a uniformly shuffled index array
        idx = np.arange(self.dim)
        draws = rng.integers(np.arange(self.k), self.dim)
        for i, j in enumerate(draws):
            idx[i], idx[j] = idx[j], idx[i]
        return SketchSample(self.dim, np.sort(idx[: self.k]), np.full(self.k, self.scale))

    def sample_diagonals(self, rng, n):
        # the K smallest of d i.i.d. uniforms sit at a uniformly random K-subset
        keys = rng.random((n, self.dim))
        chosen = np.argpartition(keys, self.k - 1, axis=1)[:, : self.k]
        out = np.zeros((n, self.dim))
        np.put_along_axis(out, chosen, self.scale, axis=1)
        return out

    def spectral_constants(self):
        r = self.scale
        return SpectralConstants(r, r, r * r)

    def support_size(self):
        return math.comb(self.dim, self.k)

    def _support(self):
        prob = 1.0 / self.support_size()
        scales = np.full(self.k, self.scale)
        for subset in itertools.combinations(range(self.dim), self.k):
            yield SketchSample(self.dim, np.array(subset, dtype=np.int64), scales), prob

    def second_moment_diagonal(self):
        return np.full(self.dim, self.scale)

    def describe(self):
        return {"kind": "randk", "dim": self.dim, "k": self.k}


@dataclass(frozen=True)
class FiniteSet(SketchDistribution):
    """Uniform distribution over an explicit list of sketches."""

    members: tuple
    kind = "finite"

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("FiniteSet needs at least one member")
        dims = {m.dim for m in members}
        if len(dims) != 1:
            raise ValueError(f"FiniteSet members disagree on dim: {sorted(dims)}")
        object.__setattr__(self, "members", members)

    @classmethod
    def from_support(cls, support: Sequence[tuple[SketchSample, float]]) -> "FiniteSet":
        probs = np.array([p for _, p in support])
        if not np.allclose(probs, probs[0], rtol=0, atol=1e-15):
            raise ValueError("FiniteSet only represents uniform supports")
        return cls(tuple(s for s, _ in support))

    @property
    def dim(self) -> int:
        return self.members[0].dim

    def _diagonals(self) -> np.ndarray:
        return np.array([m.diagonal() for m in self.members])

    def sample(self, rng):
        return self.members[int(rng.integers(len(self.members)))]

    def spectral_constants(self):
        second = self.second_moment_diagonal()
        l_s_max = max(m.l_s() for m in self.members)
        return SpectralConstants(float(second.max()), float(second.min()), float(l_s_max))

    def support_size(self):
        return len(self.members)

    def _support(self):
        prob = 1.0 / len(self.members)
        for m in self.members:
            yield m, prob

    def mean_diagonal(self):
        return self._diagonals().mean(axis=0)

    def second_moment_diagonal(self):
        return (self._diagonals() ** 2).mean(axis=0)

    def describe(self):
        return {"kind": "finite", "members": [m.as_dict() for m in self.members], "dim": self.dim}


def sample(dist: SketchDistribution, rng: np.random.Generator) -> SketchSample:
    return dist.sample(rng)


def spectral_constants(dist: SketchDistribution) -> SpectralConstants:
    return dist.spectral_constants()


def enumerate_support(dist: SketchDistribution, limit: int = DEFAULT_SUPPORT_LIMIT):
    return dist.enumerate_support(limit)


def distribution_from_spec(spec: dict, dim: int) -> SketchDistribution:
    """Build a distribution from ``{kind: randk|bernoulli|identity, ...}``.

    ``randk`` takes either ``k`` or a keep-ratio ``q`` (``K = round(q*d)``, at least 1);
    ``bernoulli`` takes a scalar or per-coordinate ``p``.
    """
    kind = spec.get("kind")
    if kind == "identity":
        return Identity(dim)
    if kind == "randk":
        if "k" in spec:
            k = int(spec["k"])
        elif "q" in spec:
            k = max(1, int(round(float(spec["q"]) * dim)))
        else:
            raise ValueError("randk sketch needs 'k' or 'q'")
        return RandK(dim, k)
    if kind == "bernoulli":
        p = spec.get("p")
        if p is None:
            raise ValueError("bernoulli sketch needs 'p'")
        if np.ndim(p) == 0:
            return BernoulliIndependent.uniform(dim, float(p))
        if len(p) != dim:
            raise ValueError(f"bernoulli 'p' has length {len(p)}, model has dim {dim}")
        return BernoulliIndependent(tuple(p))
    raise ValueError(f"unknown sketch kind {kind!r}")
