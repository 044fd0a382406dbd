"""Smooth losses and the sketched (MAST) objective built on top of them.

For a loss ``f``, a sketch distribution ``D`` and a shift ``s``::

    f_S(x)   = f(s + S (x - s))
    grad f_S = S^T grad f(s + S (x - s))
    f~(x)    = E_S[f_S(x)]

Exact expectations enumerate the sketch support; everything else is sampled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.special import expit

from . import sketch as sk
from .sketch import DEFAULT_SUPPORT_LIMIT, SketchDistribution, SketchSample, SupportTable


class UnsupportedOperation(ValueError):
    pass


def power_iteration(matvec, dim: int, rtol: float = 1e-8, max_iter: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD operator, deterministic all-ones start."""
    v = np.ones(dim) / math.sqrt(dim)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - lam) <= rtol * new:
            return new
        lam = new
    return lam


class Loss:
    """Differentiable objective with known smoothness ``l_f`` and strong convexity ``mu_f``.

    Subclasses implement :meth:`value` and :meth:`gradient`; the batched versions
    take one point per row and exist so that exact expectations over a sketch
    support can be evaluated in a single pass.
    """

    dim: int
    l_f: float
    mu_f: float = 0.0
    f_inf: Optional[float] = None
    convex: bool = True
    n_terms: Optional[int] = None

    def value(self, x) -> float:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def values(self, points: np.ndarray) -> np.ndarray:
        return np.array([self.value(p) for p in points])

    def gradients(self, points: np.ndarray) -> np.ndarray:
        return np.array([self.gradient(p) for p in points]).reshape(len(points), self.dim)

    # finite-sum structure, only for losses that have it
    def term_gradient(self, x, terms) -> np.ndarray:
        raise UnsupportedOperation(f"{type(self).__name__} has no finite-sum structure")

    def term_smoothness(self) -> np.ndarray:
        raise UnsupportedOperation(f"{type(self).__name__} has no finite-sum structure")

    def term_infima(self) -> Optional[np.ndarray]:
        return None


class QuadraticLoss(Loss):
    """``f(x) = 0.5 (x - c)^T M (x - c) + offset`` with symmetric PSD ``M``.

    ``matrix`` may be a full array or a 1-D diagonal.
    """

    def __init__(self, matrix, center, offset: float = 0.0):
        m = np.asarray(matrix, dtype=float)
        c = np.asarray(center, dtype=float).ravel()
        if offset < 0:
            raise ValueError("offset must be non-negative")
        self.diagonal = m.ndim == 1
        if self.diagonal:
            if m.shape != c.shape:
                raise ValueError("diagonal and center lengths differ")
            if np.any(m < 0):
                raise ValueError("matrix must be PSD")
            eig = m
        else:
            if m.shape != (c.size, c.size) or not np.allclose(m, m.T):
                raise ValueError("matrix must be square, symmetric and match center")
            eig = np.linalg.eigvalsh(m)
            if eig[0] < -1e-12 * max(1.0, eig[-1]):
                raise ValueError("matrix must be PSD")
        self.matrix = m
        self.center = c
        self.offset = float(offset)
        self.dim = c.size
        self.l_f = float(np.max(eig))
        self.mu_f = float(max(np.min(eig), 0.0))
        self.f_inf = self.offset

    def _mul(self, r):
        return r * self.matrix if self.diagonal else r @ self.matrix

    def value(self, x):
        r = np.asarray(x, dtype=float) - self.center
        return 0.5 * float(r @ self._mul(r)) + self.offset

    def gradient(self, x):
        return self._mul(np.asarray(x, dtype=float) - self.center)

    def values(self, points):
        r = np.asarray(points, dtype=float) - self.center
        return 0.5 * np.einsum("ij,ij->i", r, self._mul(r)) + self.offset

    def gradients(self, points):
        return self._mul(np.asarray(points, dtype=float) - self.center)


class _LinearClassifierLoss(Loss):
    """Shared margin machinery for logistic-type losses ``mean_i log(1+exp(-b_i A_i x)) + reg(x)``."""

    def __init__(self, features, labels, lam: float):
        a = sp.csr_matrix(features, dtype=float)
        b = np.asarray(labels, dtype=float).ravel()
        if a.shape[0] != b.size:
            raise ValueError("features and labels disagree on n")
        if not np.all(np.isin(b, (-1.0, 1.0))):
            raise ValueError("labels must be +-1")
        if lam < 0:
            raise ValueError("lambda must be non-negative")
        self.features = a
        self.labels = b
        self.lam = float(lam)
        self.n, self.dim = a.shape
        self.n_terms = self.n
        self._at = a.T.tocsr()
        self.data_smoothness = power_iteration(lambda v: self._at @ (a @ v), self.dim) / (4 * self.n)

    def _reg(self, x):
        raise NotImplementedError

    def _reg_grad(self, x):
        raise NotImplementedError

    def value(self, x):
        x = np.asarray(x, dtype=float)
        z = self.labels * (self.features @ x)
        return float(np.mean(np.logaddexp(0.0, -z))) + self._reg(x)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        z = self.labels * (self.features @ x)
        return -(self._at @ (self.labels * expit(-z))) / self.n + self._reg_grad(x)

    def values(self, points):
        y = np.asarray(points, dtype=float)
        z = self.labels[:, None] * (self.features @ y.T)
        return np.mean(np.logaddexp(0.0, -z), axis=0) + np.array([self._reg(p) for p in y])

    def gradients(self, points):
        y = np.asarray(points, dtype=float)
        z = self.labels[:, None] * (self.features @ y.T)
        w = self.labels[:, None] * expit(-z)
        data = -(self._at @ w).T / self.n
        return data + np.array([self._reg_grad(p) for p in y]).reshape(y.shape)

    def term_gradient(self, x, terms):
        terms = np.asarray(terms, dtype=np.int64)
        x = np.asarray(x, dtype=float)
        rows = self.features[terms]
        b = self.labels[terms]
        z = b * (rows @ x)
        return -(rows.T @ (b * expit(-z))) / terms.size + self._reg_grad(x)

    def row_norms_sq(self) -> np.ndarray:
        return np.asarray(self.features.multiply(self.features).sum(axis=1)).ravel()


class LogisticLoss(_LinearClassifierLoss):
    """l2-regularized logistic regression; ``l_f = lambda_max(A^T A)/(4n) + lambda``, ``mu_f = lambda``."""

    def __init__(self, features, labels, lam: float, f_inf: Optional[float] = None):
        super().__init__(features, labels, lam)
        self.l_f = self.data_smoothness + self.lam
        self.mu_f = self.lam
        self.f_inf = f_inf

    @classmethod
    def with_condition_number(cls, features, labels, kappa: float, **kw) -> "LogisticLoss":
        """Pick lambda so that ``(L_0 + lambda)/lambda = kappa``."""
        if kappa <= 1:
            raise ValueError("target condition number must exceed 1")
        probe = cls(features, labels, 0.0)
        return cls(features, labels, probe.data_smoothness / (kappa - 1.0), **kw)

    def _reg(self, x):
        return 0.5 * self.lam * float(x @ x)

    def _reg_grad(self, x):
        return self.lam * x

    def values(self, points):
        y = np.asarray(points, dtype=float)
        z = self.labels[:, None] * (self.features @ y.T)
        return np.mean(np.logaddexp(0.0, -z), axis=0) + 0.5 * self.lam * np.einsum("ij,ij->i", y, y)

    def gradients(self, points):
        y = np.asarray(points, dtype=float)
        z = self.labels[:, None] * (self.features @ y.T)
        w = self.labels[:, None] * expit(-z)
        return -(self._at @ w).T / self.n + self.lam * y

    def term_smoothness(self):
        return self.row_norms_sq() / 4.0 + self.lam

    def term_infima(self):
        """Per-term minima of ``log(1+exp(-b_i a_i.x)) + lambda/2 |x|^2``.

        The minimizer lies along ``a_i``, which reduces each term to a scalar root find.
        """
        r = np.sqrt(self.row_norms_sq())
        out = np.empty(self.n)
        for i, ri in enumerate(r):
            if ri == 0.0:
                out[i] = math.log(2.0)
            elif self.lam == 0.0:
                out[i] = 0.0
            else:
                u = brentq(lambda u: -ri * expit(-ri * u) + self.lam * u, 0.0, ri / self.lam, xtol=1e-15, rtol=1e-15)
                out[i] = float(np.logaddexp(0.0, -ri * u)) + 0.5 * self.lam * u * u
        return out


class NonconvexLogisticLoss(_LinearClassifierLoss):
    """Logistic loss with the bounded nonconvex regularizer ``lambda * sum x_i^2/(1+x_i^2)``.

    The regularizer's second derivative peaks at ``2`` (at zero), hence
    ``l_f = lambda_max(A^T A)/(4n) + 2 lambda``.
    """

    convex = False

    def __init__(self, features, labels, lam: float, f_inf: Optional[float] = None):
        super().__init__(features, labels, lam)
        self.l_f = self.data_smoothness + 2.0 * self.lam
        self.mu_f = 0.0
        self.f_inf = f_inf

    def _reg(self, x):
        x2 = x * x
        return self.lam * float(np.sum(x2 / (1.0 + x2)))

    def _reg_grad(self, x):
        return 2.0 * self.lam * x / (1.0 + x * x) ** 2

    def term_smoothness(self):
        return self.row_norms_sq() / 4.0 + 2.0 * self.lam


class ScaledConstants(Loss):
    """Wraps a loss but reports different ``l_f``/``mu_f``; used to inject faults into checks."""

    def __init__(self, base: Loss, l_f: Optional[float] = None, mu_f: Optional[float] = None):
        self.base = base
        self.dim = base.dim
        self.l_f = base.l_f if l_f is None else l_f
        self.mu_f = base.mu_f if mu_f is None else mu_f
        self.f_inf = base.f_inf
        self.convex = base.convex
        self.n_terms = base.n_terms

    def value(self, x):
        return self.base.value(x)

    def gradient(self, x):
        return self.base.gradient(x)

    def values(self, points):
        return self.base.values(points)

    def gradients(self, points):
        return self.base.gradients(points)


@dataclass(frozen=True, eq=False)
class MastProblem:
    loss: Loss
    dist: SketchDistribution
    shift: np.ndarray
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        s = np.array(self.shift, dtype=float).ravel()
        if s.size != self.loss.dim or self.dist.dim != self.loss.dim:
            raise ValueError(
                f"dimension mismatch: loss {self.loss.dim}, sketch {self.dist.dim}, shift {s.size}"
            )
        s.setflags(write=False)
        object.__setattr__(self, "shift", s)

    @property
    def dim(self) -> int:
        return self.loss.dim

    @property
    def constants(self) -> sk.SpectralConstants:
        if "constants" not in self._cache:
            self._cache["constants"] = self.dist.spectral_constants()
        return self._cache["constants"]

    def support(self, limit: int = DEFAULT_SUPPORT_LIMIT) -> SupportTable:
        table = self._cache.get("support")
        if table is None:
            table = self.dist.support_table(limit)
            self._cache["support"] = table
        elif table.size > limit:
            raise sk.SupportTooLarge(table.size, limit)
        return table

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: problem has dim {self.dim}, got shape {x.shape}")
        return x

    def sketched_points(self, diagonals: np.ndarray, x) -> np.ndarray:
        return self.shift + diagonals * (self._check(x) - self.shift)

    def support_values(self, x, limit: int = DEFAULT_SUPPORT_LIMIT) -> np.ndarray:
        table = self.support(limit)
        return self.loss.values(self.sketched_points(table.diagonals, x))

    def support_gradients(self, x, rows=None, limit: int = DEFAULT_SUPPORT_LIMIT) -> np.ndarray:
        """``grad f_{S_i}(x)`` for the selected support rows (all rows by default)."""
        diags = self.support(limit).diagonals
        if rows is not None:
            diags = diags[np.asarray(rows, dtype=np.int64)]
        return diags * self.loss.gradients(self.sketched_points(diags, x))

    def minibatch_gradient(self, x, rows) -> np.ndarray:
        return np.mean(self.support_gradients(x, rows), axis=0)

    def tilde_gradient(self, x, limit: int = DEFAULT_SUPPORT_LIMIT) -> np.ndarray:
        """Exact ``grad f~(x)`` by enumeration."""
        table = self.support(limit)
        if table.uniform:
            return self.minibatch_gradient(x, np.arange(table.size))
        return table.probs @ self.support_gradients(x, limit=limit)


def sketched_value(p: MastProblem, s: SketchSample, x) -> float:
    x = p._check(x)
    return p.loss.value(p.shift + sk.apply(s, x - p.shift))


def estimator_gradient(p: MastProblem, s: SketchSample, x) -> np.ndarray:
    x = p._check(x)
    return sk.apply_transpose(s, p.loss.gradient(p.shift + sk.apply(s, x - p.shift)))


def exact_tilde_value(p: MastProblem, x, limit: int = DEFAULT_SUPPORT_LIMIT) -> float:
    table = p.support(limit)
    return float(table.probs @ p.support_values(x, limit))


def exact_tilde_gradient(p: MastProblem, x, limit: int = DEFAULT_SUPPORT_LIMIT) -> np.ndarray:
    return p.tilde_gradient(x, limit)


def monte_carlo_tilde_value(p: MastProblem, x, n_samples: int, rng, chunk: int = 8192):
    """Sample mean and standard error of ``f_S(x)`` over i.i.d. sketches."""
    if n_samples < 2:
        raise ValueError("need at least two samples")
    x = p._check(x)
    vals = np.empty(n_samples)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        diags = np.array([p.dist.sample(rng).diagonal() for _ in range(m)])
        vals[done : done + m] = p.loss.values(p.sketched_points(diags, x))
        done += m
    mean = float(np.mean(vals))
    return mean, float(np.std(vals, ddof=1) / math.sqrt(n_samples))


@dataclass(frozen=True)
class AbcConstants:
    a: float
    b: float
    c: Optional[float]


@dataclass(frozen=True)
class AbcEstimator:
    """Inner gradient estimator ``g_S(x)`` with ``E[g_S(x) | S] = grad f_S(x)``.

    mode: ``exact``, ``bounded_variance`` (additive Gaussian noise with
    ``E|noise|^2 = sigma2``) or ``uniform_subsample`` (average of ``batch``
    data terms drawn without replacement).
    """

    mode: str = "exact"
    sigma2: float = 0.0
    batch: int = 1

    def __post_init__(self):
        if self.mode not in ("exact", "bounded_variance", "uniform_subsample"):
            raise ValueError(f"unknown estimator mode {self.mode!r}")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be positive")

    def abc_constants(self, loss: Loss, f_inf: Optional[float] = None) -> AbcConstants:
        if self.mode == "exact":
            return AbcConstants(0.0, 1.0, 0.0)
        if self.mode == "bounded_variance":
            return AbcConstants(0.0, 1.0, self.sigma2)
        if loss.n_terms is None:
            raise UnsupportedOperation("uniform subsampling needs a finite-sum loss")
        if self.batch >= loss.n_terms:
            return AbcConstants(0.0, 1.0, 0.0)
        a = float(np.max(loss.term_smoothness()))
        infima = loss.term_infima()
        f_inf = loss.f_inf if f_inf is None else f_inf
        if infima is None or f_inf is None:
            return AbcConstants(a, 0.0, None)
        return AbcConstants(a, 0.0, 2.0 * a * max(f_inf - float(np.mean(infima)), 0.0))


def inner_estimate(e: AbcEstimator, p: MastProblem, s: SketchSample, x, rng) -> np.ndarray:
    if e.mode == "exact":
        return estimator_gradient(p, s, x)
    if e.mode == "bounded_variance":
        g = estimator_gradient(p, s, x)
        if e.sigma2 == 0.0:
            return g
        return g + rng.normal(0.0, math.sqrt(e.sigma2 / p.dim), size=p.dim)
    loss = p.loss
    if loss.n_terms is None:
        raise UnsupportedOperation("uniform subsampling needs a finite-sum loss")
    x = p._check(x)
    y = p.shift + sk.apply(s, x - p.shift)
    if e.batch >= loss.n_terms:
        return sk.apply_transpose(s, loss.gradient(y))
    terms = np.sort(rng.choice(loss.n_terms, size=e.batch, replace=False))
    return sk.apply_transpose(s, loss.term_gradient(y, terms))


def mast_sandwich_bounds(p: MastProblem, x_star, x_d_star):
    """Return ``(f(x*), upper, f(x_D*))`` where the minimizer sandwich predicts
    ``f(x*) <= f(x_D*) <= upper``."""
    loss = p.loss
    if loss.mu_f <= 0:
        raise UnsupportedOperation("the sandwich bound needs a strongly convex loss")
    c = p.constants
    x_star = p._check(x_star)
    x_d_star = p._check(x_d_star)
    lower = loss.value(x_star)
    upper = (
        lower
        + 0.5 * (c.l_d - 1.0) * loss.l_f * float(np.sum((x_star - p.shift) ** 2))
        - 0.5 * (c.mu_d - 1.0) * loss.mu_f * float(np.sum((x_d_star - p.shift) ** 2))
    )
    return lower, upper, loss.value(x_d_star)
