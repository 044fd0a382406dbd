"""Reference computations that the solvers are checked against.

Nothing here imports :mod:`mast.solvers`; expectations over sketches are
recomputed from the raw support enumeration and only the losses' own
value/gradient routines are shared.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .objective import Loss, MastProblem


class ReferenceSolveFailed(RuntimeError):
    def __init__(self, grad_norm_sq: float, iterations: int):
        self.grad_norm_sq = grad_norm_sq
        self.iterations = iterations
        super().__init__(f"reference solve stopped after {iterations} iterations with |grad|^2 = {grad_norm_sq:.3e}")

    def __reduce__(self):
        return type(self), (self.grad_norm_sq, self.iterations)


def finite_diff_gradient(loss_or_fn, x, h_scale: float = 1e-6) -> np.ndarray:
    """Central differences with per-coordinate step ``h_scale * (1 + |x_i|)``."""
    if not h_scale > 0:
        raise ValueError("h_scale must be positive")
    fn = loss_or_fn.value if hasattr(loss_or_fn, "value") else loss_or_fn
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = h_scale * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = fn(xp), fn(xm)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite value on the stencil of coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return g


class ExactSketchedObjective:
    """``f~`` and its gradient for one loss under a finite-support sketch distribution,
    computed directly from ``enumerate_support``."""

    def __init__(self, loss: Loss, dist, shift, limit: int = 10_000):
        members = dist.enumerate_support(limit)
        self.loss = loss
        self.shift = np.asarray(shift, dtype=float)
        self.diags = np.array([s.diagonal() for s, _ in members])
        self.probs = np.array([p for _, p in members])
        self.l_s = np.max(self.diags**2, axis=1)
        self.mu_s = np.min(self.diags**2, axis=1)
        second = self.probs @ self.diags**2
        self.l_d = float(second.max())
        self.mu_d = float(second.min())
        self.l_s_max = float(self.l_s.max())
        self.dim = loss.dim

    @property
    def size(self) -> int:
        return self.probs.size

    def _points(self, xs: np.ndarray) -> np.ndarray:
        # (P, N, d) sketched points for P query points
        return self.shift + self.diags[None, :, :] * (xs[:, None, :] - self.shift)

    def member_values(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        y = self._points(xs).reshape(-1, self.dim)
        return self.loss.values(y).reshape(xs.shape[0], self.size)

    def member_gradients(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        y = self._points(xs).reshape(-1, self.dim)
        g = self.loss.gradients(y).reshape(xs.shape[0], self.size, self.dim)
        return self.diags[None] * g

    def values(self, xs) -> np.ndarray:
        return self.member_values(xs) @ self.probs

    def gradients(self, xs) -> np.ndarray:
        return np.einsum("n,pnd->pd", self.probs, self.member_gradients(xs))

    def value(self, x) -> float:
        return float(self.values(x)[0])

    def gradient(self, x) -> np.ndarray:
        return self.gradients(x)[0]

    @property
    def smoothness(self) -> float:
        return self.l_d * self.loss.l_f

    @property
    def strong_convexity(self) -> float:
        return self.mu_d * self.loss.mu_f


class AveragedObjective:
    """Uniform average of several objectives (one per node of a cluster).

    Parts may be losses, finite-support MAST problems or other solver targets.
    """

    def __init__(self, parts: Sequence):
        self.parts = [as_target(p) for p in parts]
        self.dim = self.parts[0].dim

    def value(self, x) -> float:
        return float(np.mean([p.value(x) for p in self.parts]))

    def gradient(self, x) -> np.ndarray:
        return np.mean([p.gradient(x) for p in self.parts], axis=0)

    @property
    def smoothness(self) -> float:
        return max(p.smoothness for p in self.parts)

    @property
    def strong_convexity(self) -> float:
        return float(np.mean([p.strong_convexity for p in self.parts]))


class _LossTarget:
    def __init__(self, loss: Loss):
        self.loss = loss
        self.dim = loss.dim
        self.value = loss.value
        self.gradient = loss.gradient
        self.smoothness = loss.l_f
        self.strong_convexity = loss.mu_f


def as_target(obj, limit: int = 10_000):
    if isinstance(obj, MastProblem):
        return ExactSketchedObjective(obj.loss, obj.dist, obj.shift, limit)
    if isinstance(obj, Loss):
        return _LossTarget(obj)
    return obj


@dataclass
class ReferenceSolution:
    x: np.ndarray
    value: float
    grad_norm_sq: float
    iterations: int


def solve_reference(
    target,
    tol_grad_sq: float = 1e-30,
    x0=None,
    max_iter: int = 10_000_000,
    accelerated: bool = False,
) -> ReferenceSolution:
    """Minimize a loss, a finite-support MAST problem, or an averaged objective.

    Plain gradient descent with step ``1/L`` until ``|grad|^2 <= tol_grad_sq``.
    With ``accelerated=True`` a constant-momentum Nesterov scheme is used instead
    (needs a positive strong-convexity estimate), falling back to plain steps
    whenever the objective increases.
    """
    t = as_target(target)
    lip = float(t.smoothness)
    mu = float(t.strong_convexity)
    x = np.zeros(t.dim) if x0 is None else np.array(x0, dtype=float)
    step = 1.0 / lip
    beta = 0.0
    if accelerated and mu > 0:
        q = math.sqrt(mu / lip)
        beta = (1 - q) / (1 + q)
    y = x.copy()
    g = t.gradient(x)
    gsq = float(g @ g)
    f_prev = t.value(x)
    for k in range(max_iter):
        if gsq <= tol_grad_sq:
            return ReferenceSolution(x, t.value(x), gsq, k)
        if beta:
            gy = t.gradient(y)
            x_new = y - step * gy
            f_new = t.value(x_new)
            if f_new > f_prev:
                # restart momentum
                y = x.copy()
                x_new = x - step * g
                f_new = t.value(x_new)
            y = x_new + beta * (x_new - x)
            x, f_prev = x_new, f_new
        else:
            x = x - step * g
        g = t.gradient(x)
        gsq = float(g @ g)
        if not math.isfinite(gsq):
            raise ReferenceSolveFailed(gsq, k + 1)
    if gsq <= tol_grad_sq:
        return ReferenceSolution(x, t.value(x), gsq, max_iter)
    raise ReferenceSolveFailed(gsq, max_iter)


@dataclass
class CheckRow:
    check_id: str
    max_violation: float
    argmax: int
    point: np.ndarray
    n_evaluated: int

    def passed(self, tol: float = 1e-9) -> bool:
        return self.max_violation <= tol

    def as_row(self) -> dict:
        return {
            "check": self.check_id,
            "max_violation": self.max_violation,
            "argmax": self.argmax,
            "n_evaluated": self.n_evaluated,
            "point": " ".join(f"{v:.17g}" for v in self.point),
        }


@dataclass
class InequalityReport:
    rows: list

    def passed(self, tol: float = 1e-9) -> bool:
        return all(r.passed(tol) for r in self.rows)

    def failures(self, tol: float = 1e-9) -> list:
        return [r for r in self.rows if not r.passed(tol)]

    def by_id(self, check_id: str) -> CheckRow:
        for r in self.rows:
            if r.check_id == check_id:
                return r
        raise KeyError(check_id)


def _violation(lhs, rhs):
    """Signed relative gap of ``lhs <= rhs``; positive means violated."""
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    scale = np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    return (lhs - rhs) / scale


def verify_inequality_suite(
    problem: MastProblem,
    n_points: int,
    rng: np.random.Generator,
    x_star=None,
    x_d_star=None,
    f_inf: Optional[float] = None,
    limit: int = 10_000,
) -> InequalityReport:
    """Evaluate the smoothness, convexity, second-moment and minimizer-sandwich
    inequalities of the sketched objective at random Gaussian points plus
    ``{0, s, x*, x_D*}``.

    ``x_star``/``x_d_star`` are solved for when missing and the loss is strongly
    convex; ``f_inf`` defaults to ``loss.f_inf`` or ``f(x*)``.
    """
    loss = problem.loss
    ex = ExactSketchedObjective(loss, problem.dist, problem.shift, limit)
    l_f, mu_f = loss.l_f, loss.mu_f
    s = problem.shift
    d = loss.dim
    strongly = mu_f > 0 and loss.convex
    if strongly:
        # the reference solves must not depend on possibly-corrupted constants
        true_l = getattr(loss, "base", loss)
        if x_star is None:
            x_star = solve_reference(true_l, 1e-28, accelerated=True).x
        if x_d_star is None:
            x_d_star = solve_reference(
                ExactSketchedObjective(true_l, problem.dist, s, limit), 1e-28, accelerated=True
            ).x
    if f_inf is None:
        f_inf = loss.f_inf if loss.f_inf is not None else (loss.value(x_star) if x_star is not None else None)

    base = rng.standard_normal((n_points, d))
    extra = [np.zeros(d), s.copy()] + [np.asarray(p, dtype=float) for p in (x_star, x_d_star) if p is not None]
    xs = np.vstack([base] + [e[None] for e in extra])
    hs = rng.standard_normal(xs.shape)
    sq = lambda v: np.sum(v * v, axis=-1)  # noqa: E731

    f_x = loss.values(xs)
    tv_x = ex.values(xs)
    tg_x = ex.gradients(xs)
    tv_xh = ex.values(xs + hs)
    mv_x = ex.member_values(xs)
    mg_x = ex.member_gradients(xs)
    mv_xh = ex.member_values(xs + hs)
    lin_member = np.einsum("pnd,pd->pn", mg_x, hs)
    lin_tilde = np.einsum("pd,pd->p", tg_x, hs)
    hh = sq(hs)
    dist_s = sq(xs - s)

    rows = []

    def add(check_id, lhs, rhs):
        v = _violation(lhs, rhs)
        flat = v.reshape(v.shape[0], -1).max(axis=1)
        i = int(np.argmax(flat))
        rows.append(CheckRow(check_id, float(flat[i]), i, xs[i], int(v.size)))

    add("lemma1.i", mv_xh, mv_x + lin_member + 0.5 * ex.l_s[None] * l_f * hh[:, None])
    add("lemma1.ii", tv_xh, tv_x + lin_tilde + 0.5 * ex.l_d * l_f * hh)
    add("lemma1.iii", tv_x, f_x + 0.5 * (ex.l_d - 1.0) * l_f * dist_s)
    if loss.convex:
        add("lemma2.convex", tv_x + lin_tilde, tv_xh)
        add("lemma2.lower", f_x, tv_x)
        add("lemma3.i", mv_x + lin_member + 0.5 * ex.mu_s[None] * mu_f * hh[:, None], mv_xh)
        add("lemma3.ii", tv_x + lin_tilde + 0.5 * ex.mu_d * mu_f * hh, tv_xh)
        add("lemma3.iii", f_x + 0.5 * (ex.mu_d - 1.0) * mu_f * dist_s, tv_x)
    if f_inf is not None:
        second = np.einsum("n,pn->p", ex.probs, np.sum(mg_x**2, axis=-1))
        add("lemma4", second, 2.0 * l_f * ex.l_s_max * (tv_x - f_inf))
    if strongly:
        lower = loss.value(x_star)
        f_xd = loss.value(x_d_star)
        upper = (
            lower
            + 0.5 * (ex.l_d - 1.0) * l_f * float(sq(x_star - s))
            - 0.5 * (ex.mu_d - 1.0) * mu_f * float(sq(x_d_star - s))
        )
        rows.append(CheckRow("theorem1.lower", float(_violation(lower, f_xd)), 0, np.asarray(x_d_star), 1))
        rows.append(CheckRow("theorem1.upper", float(_violation(f_xd, upper)), 0, np.asarray(x_d_star), 1))
    return InequalityReport(rows)


def exact_gradient_norm_sq(objective: Callable, xs) -> np.ndarray:
    g = objective.gradients(np.atleast_2d(xs))
    return np.sum(g * g, axis=1)
