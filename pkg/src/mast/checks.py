"""Built-in fixtures and the registry of numerical checks run by ``mast verify``.

Each check returns one or more :class:`ReportRow`. Inequality checks report a
signed relative violation (pass when ``<= 1e-9``); envelope checks report a
measured quantity against ``slack * bound``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import distributed as dist_mod
from . import oracle
from . import rng as streams
from . import sketch as sk
from . import solvers as sv
from .objective import (
    AbcEstimator,
    LogisticLoss,
    MastProblem,
    NonconvexLogisticLoss,
    QuadraticLoss,
    ScaledConstants,
    estimator_gradient,
    exact_tilde_value,
)

INEQUALITY_TOL = 1e-9
ENVELOPE_SLACK = 1.2


@dataclass(frozen=True)
class ReportRow:
    check_id: str
    value: float
    limit: float
    passed: bool
    detail: str = ""

    def as_row(self) -> dict:
        return {"check": self.check_id, "value": self.value, "limit": self.limit,
                "passed": self.passed, "detail": self.detail}


def envelope_row(check_id: str, measured: float, bound: float, slack: float = ENVELOPE_SLACK, detail: str = ""):
    limit = slack * bound
    return ReportRow(check_id, float(measured), float(limit), bool(measured <= limit), detail)


# --------------------------------------------------------------------------- fixtures


def rotated_curvature(dim: int, spread: float, g) -> np.ndarray:
    q, _ = np.linalg.qr(g.standard_normal((dim, dim)))
    return (q * np.linspace(1.0, spread, dim)) @ q.T


def quadratic_fixture(dim: int = 4, centered: bool = False, seed: int = 0, spread: float = 2.0,
                      dense: bool = False):
    """Quadratic with curvatures in ``[1, spread]`` and a nonzero shift.

    Diagonal curvature makes every sketched gradient vanish at the MAST
    minimizer; ``dense=True`` rotates the curvature so that it does not.
    """
    g = streams.derive_stream(seed, streams.INIT, dim)
    shift = g.normal(0.0, 0.5, dim)
    center = shift.copy() if centered else g.normal(0.0, 1.0, dim)
    curv = rotated_curvature(dim, spread, g) if dense else np.linspace(1.0, spread, dim)
    return QuadraticLoss(curv, center, 0.0), shift


def toy_features(dim: int = 4, n_random: int = 8, seed: int = 0):
    """Small design whose logistic loss is coercive: every basis direction appears
    with both labels, so no direction separates the data."""
    g = streams.derive_stream(seed, streams.INIT, dim, n_random)
    a = g.normal(0.0, 1.0, (n_random, dim))
    b = np.where(g.random(n_random) < 0.5, -1.0, 1.0)
    eye = np.eye(dim)
    a = np.vstack([a, eye, eye])
    b = np.concatenate([b, np.ones(dim), -np.ones(dim)])
    return sp.csr_matrix(a), b


def logistic_toy(dim: int = 4, kappa: float = 10.0, seed: int = 0):
    a, b = toy_features(dim, seed=seed)
    loss = LogisticLoss.with_condition_number(a, b, kappa)
    shift = streams.derive_stream(seed, streams.INIT, 99).normal(0.0, 0.5, dim)
    return loss, shift


def nonconvex_toy(dim: int = 4, lam: float = 0.5, seed: int = 0):
    a, b = toy_features(dim, seed=seed)
    loss = NonconvexLogisticLoss(a, b, lam)
    shift = streams.derive_stream(seed, streams.INIT, 98).normal(0.0, 0.5, dim)
    return loss, shift


def lemma_fixtures(inject_fault: bool = False):
    """(name, MastProblem) pairs covering both losses and three sketch families."""
    out = []
    for lname, (loss, shift) in (("quadratic", quadratic_fixture(dense=True)), ("logistic", logistic_toy())):
        if inject_fault:
            loss = ScaledConstants(loss, l_f=loss.l_f / 2)
        d = loss.dim
        for dname, dist in (("identity", sk.Identity(d)), ("randk", sk.RandK(d, 2)),
                            ("bernoulli", sk.BernoulliIndependent.uniform(d, 0.6))):
            out.append((f"{lname}/{dname}", MastProblem(loss, dist, shift)))
    return out


def start_point(shift, seed: int) -> np.ndarray:
    return np.asarray(shift) + streams.derive_stream(seed, streams.START).standard_normal(len(shift))


def _exact(p: MastProblem) -> oracle.ExactSketchedObjective:
    base = getattr(p.loss, "base", p.loss)
    return oracle.ExactSketchedObjective(base, p.dist, p.shift)


def nonconvex_infimum(target, starts, tol_grad_sq: float = 1e-24) -> float:
    """Smallest stationary value found by plain gradient descent from several starts."""
    return min(oracle.solve_reference(target, tol_grad_sq=tol_grad_sq, x0=x0).value for x0 in starts)


# --------------------------------------------------------------------------- checks


def check_lemmas(n_points: int = 100, seed: int = 0, inject_fault: bool = False) -> list[ReportRow]:
    worst: dict = {}
    for name, p in lemma_fixtures(inject_fault):
        report = oracle.verify_inequality_suite(p, n_points, streams.derive_stream(seed, streams.METRICS))
        for row in report.rows:
            if row.check_id not in worst or row.max_violation > worst[row.check_id][0]:
                worst[row.check_id] = (row.max_violation, name)
    return [ReportRow(cid, v, INEQUALITY_TOL, v <= INEQUALITY_TOL, f"worst fixture {name}")
            for cid, (v, name) in worst.items()]


def check_sketch_moments(max_dim: int = 8) -> list[ReportRow]:
    """Exact first and second moments by enumeration against closed forms."""
    err = 0.0
    cases = [(sk.RandK(d, k), np.full(d, d / k)) for d in range(1, max_dim + 1) for k in range(1, d + 1)]
    cases += [(sk.BernoulliIndependent.uniform(d, p), np.full(d, 1 / p)) for d in (3, max_dim) for p in (0.3, 0.5, 1.0)]
    for dist, second in cases:
        members = dist.enumerate_support()
        diags = np.array([s.diagonal() for s, _ in members])
        probs = np.array([q for _, q in members])
        err = max(err, np.abs(probs @ diags - 1).max(), np.abs(probs @ diags**2 - second).max(), abs(probs.sum() - 1))
    return [ReportRow("sketch.moments", float(err), 1e-12, err <= 1e-12, f"{len(cases)} distributions")]


def check_estimator_unbiased(n_points: int = 20, seed: int = 0) -> list[ReportRow]:
    loss, shift = logistic_toy(dim=6)
    dist = sk.RandK(6, 2)
    p = MastProblem(loss, dist, shift)
    members = dist.enumerate_support()
    g = streams.derive_stream(seed, streams.METRICS, 1)
    worst = 0.0
    for _ in range(n_points):
        x = g.standard_normal(6)
        avg = sum(w * estimator_gradient(p, s, x) for s, w in members)
        fd = oracle.finite_diff_gradient(lambda z: exact_tilde_value(p, z), x)
        worst = max(worst, np.linalg.norm(avg - fd) / max(np.linalg.norm(fd), 1e-12))
    return [ReportRow("estimator.unbiased", float(worst), 1e-5, worst <= 1e-5, "RandK(6,2) support average vs finite differences")]


def thm2_interpolation(seeds=range(5), target: float = 1e-10):
    loss, shift = quadratic_fixture(dim=5, centered=True, seed=1)
    p = MastProblem(loss, sk.RandK(5, 1), shift)
    c = p.constants
    gamma = sv.step_size(sv.StepSizeRule("thm2"), c, loss)
    x0 = start_point(shift, 0)
    r0 = float(np.sum((x0 - shift) ** 2))
    T = math.ceil(math.log(r0 / target) / (gamma * c.mu_d * loss.mu_f))
    errs = [float(np.sum((sv.trajectory(p, sv.SolverConfig("dsgd", gamma, T, seed), x0)[-1] - shift) ** 2))
            for seed in seeds]
    return float(np.mean(errs)), target, T


def thm2_neighborhood(seeds=range(5), T: Optional[int] = None):
    loss, shift = quadratic_fixture(dim=5, seed=2, dense=True)
    p = MastProblem(loss, sk.RandK(5, 2), shift)
    c = p.constants
    gamma = sv.step_size(sv.StepSizeRule("thm2"), c, loss)
    ref = oracle.solve_reference(_exact(p), tol_grad_sq=1e-28)
    gap = ref.value - loss.f_inf
    x0 = start_point(shift, 0)
    r0 = float(np.sum((x0 - ref.x) ** 2))
    rate = gamma * c.mu_d * loss.mu_f
    if T is None:
        T = math.ceil(math.log(1e6) / rate)
    errs = [float(np.sum((sv.trajectory(p, sv.SolverConfig("dsgd", gamma, T, seed), x0)[-1] - ref.x) ** 2))
            for seed in seeds]
    bound = (1 - rate) ** T * r0 + 2 * gamma * loss.l_f * c.l_s_max * gap / (loss.mu_f * c.mu_d)
    return float(np.mean(errs)), bound, T


def _min_mean_grad(objective, trajectories) -> float:
    norms = np.array([np.sum(objective.gradients(xs[:-1]) ** 2, axis=1) for xs in trajectories])
    return float(norms.mean(axis=0).min())


def thm3_envelope(seeds=range(5), T: int = 1000):
    loss, shift = nonconvex_toy()
    p = MastProblem(loss, sk.RandK(loss.dim, 2), shift)
    c = p.constants
    exact = _exact(p)
    gamma = sv.step_size(sv.StepSizeRule("thm3", T=T), c, loss)
    x0 = start_point(shift, 0)
    starts = [x0, shift, np.zeros(loss.dim)]
    tilde_inf = nonconvex_infimum(exact, starts)
    f_inf = nonconvex_infimum(loss, starts)
    trajs = [sv.trajectory(p, sv.SolverConfig("dsgd", gamma, T, seed), x0) for seed in seeds]
    measured = _min_mean_grad(exact, trajs)
    bound = 3 * (exact.value(x0) - tilde_inf) / (gamma * T) + gamma * loss.l_f**2 * c.l_d * c.l_s_max * (tilde_inf - f_inf)
    return measured, bound


def thm4_envelope(seeds=range(5), T: int = 1000, batch: int = 1):
    loss, shift = logistic_toy()
    p = MastProblem(loss, sk.RandK(loss.dim, 2), shift)
    c = p.constants
    exact = _exact(p)
    f_ref = oracle.solve_reference(loss, tol_grad_sq=1e-28)
    tilde_ref = oracle.solve_reference(exact, tol_grad_sq=1e-28)
    est = AbcEstimator("uniform_subsample", batch=batch)
    abc = est.abc_constants(loss, f_ref.value)
    d_ab = abc.a + abc.b * loss.l_f * c.l_s_max
    gamma = sv.abc_envelope_step(c, loss, abc.a, abc.b, T)
    x0 = start_point(shift, 0)
    trajs = [sv.trajectory(p, sv.SolverConfig("dsgd", gamma, T, seed, estimator=est), x0) for seed in seeds]
    measured = _min_mean_grad(exact, trajs)
    gap = tilde_ref.value - f_ref.value
    bound = 3 * (exact.value(x0) - tilde_ref.value) / (gamma * T) + gamma * loss.l_f * c.l_d / 2 * (abc.c + 2 * d_ab * gap)
    return measured, bound


def lyapunov(p: MastProblem, st: sv.SolverState, x_star, gamma: float, prob: float) -> float:
    n = p.support().size
    diff = p.support_gradients(st.w) - p.support_gradients(x_star)
    return float(np.sum((st.x - x_star) ** 2) + 16 * gamma**2 / (prob * n) * np.sum(diff**2))


def thm5_linear(seeds=range(5), dim: int = 20, prob: float = 0.1, cadence: int = 100):
    """L-SVRDSG with the full sketch minibatch: final error and Lyapunov decay."""
    g = streams.derive_stream(5, streams.INIT)
    loss = QuadraticLoss(rotated_curvature(dim, 1.5, g), g.normal(0, 1, dim), 0.0)
    shift = streams.derive_stream(6, streams.INIT).normal(0, 0.5, dim)
    p = MastProblem(loss, sk.RandK(dim, 1), shift)
    c = p.constants
    n = p.support().size
    gamma = sv.step_size(sv.StepSizeRule("thm5"), c, loss)
    x_star = oracle.solve_reference(_exact(p), tol_grad_sq=1e-24).x
    rho = min(gamma * c.mu_d * loss.mu_f, prob / 2)
    x0 = start_point(shift, 0)
    psi0 = lyapunov(p, sv.SolverState(x0, w=x0), x_star, gamma, prob)
    T = math.ceil(math.log(psi0 / 1e-10) / rho)
    psis, finals = [], []
    for seed in seeds:
        cfg = sv.SolverConfig("lsvrdsg", gamma, T, seed, prob=prob, batch=n)
        row = []
        for st in sv.iterate_states(p, cfg, x0):
            if st.t % cadence == 0 or st.t == T:
                row.append(lyapunov(p, st, x_star, gamma, prob))
            last = st
        psis.append(row)
        finals.append(float(np.sum((last.x - x_star) ** 2)))
    ts = np.array([t for t in range(T + 1) if t % cadence == 0 or t == T])
    mean_psi = np.mean(psis, axis=0)
    ratio = float(np.max(mean_psi / (psi0 * (1 - rho) ** ts)))
    return max(finals), ratio, T, rho


def heterogeneous_cluster(dim: int = 4, seed: int = 3) -> dist_mod.Cluster:
    g = streams.derive_stream(seed, streams.INIT)
    shift = g.normal(0, 0.5, dim)
    dists = [sk.RandK(dim, 1), sk.RandK(dim, 2), sk.BernoulliIndependent.uniform(dim, 0.5), sk.Identity(dim)]
    nodes = []
    for i, dist in enumerate(dists):
        curv = g.uniform(0.5, 2.0 + i, dim)
        nodes.append(dist_mod.Node(QuadraticLoss(curv, g.normal(0, 1, dim), float(i) * 0.1), dist, i))
    return dist_mod.Cluster(tuple(nodes), shift)


def thm6_envelope(seeds=range(5), T: int = 1000):
    c = heterogeneous_cluster()
    avg = oracle.AveragedObjective([oracle.ExactSketchedObjective(n.loss, n.dist, c.shift) for n in c.nodes])
    tilde_inf = oracle.solve_reference(avg, tol_grad_sq=1e-28).value
    mean_node_inf = float(np.mean([n.loss.f_inf for n in c.nodes]))
    gamma = dist_mod.distributed_step_size(c, T)
    x0 = start_point(c.shift, 0)
    trajs = [dist_mod.distributed_trajectory(c, gamma, T, seed, x0) for seed in seeds]
    norms = np.array([[np.sum(avg.gradient(x) ** 2) for x in xs[:-1]] for xs in trajs])
    measured = float(norms.mean(axis=0).min())
    bound = 3 * (avg.value(x0) - tilde_inf) / (gamma * T) + gamma * c.d_max * (tilde_inf - mean_node_inf)
    return measured, bound


def spage_gd_equivalence(T: int = 200) -> bool:
    loss, shift = logistic_toy()
    p = MastProblem(loss, sk.RandK(loss.dim, 2), shift)
    n = p.support().size
    gamma = 1.0 / (loss.l_f * p.constants.l_d)
    x0 = start_point(shift, 0)
    a = sv.trajectory(p, sv.SolverConfig("spage", gamma, T, 0, prob=1.0, batch=n, small_batch=1), x0)
    b = sv.trajectory(p, sv.SolverConfig("gd_tilde", gamma, T, 0), x0)
    return bool(np.array_equal(a, b))


def spage_envelope(seeds=range(5), T: int = 1000, prob: float = 0.3, small_batch: int = 1):
    """Full sketch batch at refresh, so the variance term vanishes and h^0 is exact."""
    loss, shift = nonconvex_toy()
    p = MastProblem(loss, sk.RandK(loss.dim, 2), shift)
    n = p.support().size
    exact = _exact(p)
    gamma = sv.step_size(sv.StepSizeRule("spage", p=prob, small_batch=small_batch), p.constants, loss)
    x0 = start_point(shift, 0)
    tilde_inf = nonconvex_infimum(exact, [x0, shift, np.zeros(loss.dim)])
    trajs = [sv.trajectory(p, sv.SolverConfig("spage", gamma, T, seed, prob=prob, batch=n, small_batch=small_batch), x0)
             for seed in seeds]
    norms = np.array([np.sum(exact.gradients(xs[:-1]) ** 2, axis=1) for xs in trajs])
    measured = float(norms.mean())
    bound = 2 * (exact.value(x0) - tilde_inf) / (gamma * T)
    return measured, bound


def _rows_thm2() -> list[ReportRow]:
    err, target, T = thm2_interpolation()
    rows = [ReportRow("thm2.interpolation", err, target, err <= target, f"T={T}")]
    err, bound, T = thm2_neighborhood()
    rows.append(envelope_row("thm2.neighborhood", err, bound, detail=f"T={T}"))
    return rows


def _rows_thm5() -> list[ReportRow]:
    final, ratio, T, rho = thm5_linear()
    return [ReportRow("thm5.final_error", final, 1e-8, final < 1e-8, f"T={T}"),
            ReportRow("thm5.lyapunov", ratio, ENVELOPE_SLACK, ratio <= ENVELOPE_SLACK, f"rho={rho:.3g}")]


def _rows_envelope(check_id, fn) -> Callable[[], list[ReportRow]]:
    return lambda: [envelope_row(check_id, *fn())]


def _rows_spage() -> list[ReportRow]:
    same = spage_gd_equivalence()
    return [ReportRow("spage.gd_equivalence", 0.0 if same else 1.0, 0.0, same, "p=1, b=N against GD on f~"),
            envelope_row("spage.envelope", *spage_envelope())]


LEMMA_IDS = ("lemma1.i", "lemma1.ii", "lemma1.iii", "lemma2.convex", "lemma2.lower", "lemma3.i",
             "lemma3.ii", "lemma3.iii", "lemma4", "theorem1.lower", "theorem1.upper")

# registry: key -> (producer, row ids it emits)
CHECKS: dict = {
    "sketch.moments": (check_sketch_moments, ("sketch.moments",)),
    "estimator.unbiased": (check_estimator_unbiased, ("estimator.unbiased",)),
    "lemmas": (check_lemmas, LEMMA_IDS),
    "thm2": (_rows_thm2, ("thm2.interpolation", "thm2.neighborhood")),
    "thm3": (_rows_envelope("thm3.envelope", thm3_envelope), ("thm3.envelope",)),
    "thm4": (_rows_envelope("thm4.envelope", thm4_envelope), ("thm4.envelope",)),
    "thm5": (_rows_thm5, ("thm5.final_error", "thm5.lyapunov")),
    "thm6": (_rows_envelope("thm6.envelope", thm6_envelope), ("thm6.envelope",)),
    "spage": (_rows_spage, ("spage.gd_equivalence", "spage.envelope")),
}


def registered_ids(filter_id: Optional[str] = None) -> list[str]:
    ids = [i for _, emitted in CHECKS.values() for i in emitted]
    return [i for i in ids if not filter_id or i.startswith(filter_id)]


def run_checks(filter_id: Optional[str] = None, inject_fault: bool = False) -> list[ReportRow]:
    """Run every registered check whose row id starts with ``filter_id``.

    ``inject_fault`` halves the declared smoothness constant of the lemma
    fixtures, which must make the smoothness inequality fail.
    """
    wanted = set(registered_ids(filter_id))
    if not wanted:
        raise KeyError(f"no registered check matches {filter_id!r}")
    rows = []
    for key, (fn, emitted) in CHECKS.items():
        if wanted.isdisjoint(emitted):
            continue
        produced = fn(inject_fault=inject_fault) if key == "lemmas" else fn()
        rows.extend(r for r in produced if r.check_id in wanted)
    return rows
