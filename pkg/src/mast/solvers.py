"""Single-node solvers for the sketched objective.

* Double sketched (S)GD: ``x <- x - gamma * g``, with ``g`` either the exact
  sketched gradient ``S^T grad f(s + S(x - s))`` or an inexact estimate of it.
* L-SVRDSG: loopless variance reduction over a finite sketch support.
* S-PAGE: probabilistic recursive gradient estimator over a finite sketch support.

All randomness at iteration ``t`` comes from ``iteration_stream(seed, t)``; the
sketch draw happens first, then the refresh coin, then minibatch draws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import rng as streams
from .objective import (
    AbcEstimator,
    Loss,
    MastProblem,
    estimator_gradient,
    exact_tilde_value,
    inner_estimate,
    monte_carlo_tilde_value,
)
from .sketch import SpectralConstants

DIVERGENCE_NORM = 1e12


class DivergenceDetected(RuntimeError):
    def __init__(self, t: int, norm: float):
        self.t = t
        self.norm = norm
        super().__init__(f"iterate diverged at t={t} (|x| = {norm:.3e})")

    def __reduce__(self):
        return type(self), (self.t, self.norm)


class ConfigError(ValueError):
    pass


class MissingConstant(ValueError):
    def __init__(self, name: str, rule: str):
        self.name = name
        super().__init__(f"step-size rule {rule!r} needs {name}")


# --------------------------------------------------------------------------- step sizes

RULES = ("thm2", "thm3", "cor1", "thm4", "thm5", "lsvrdsg_convex", "spage", "manual")


@dataclass(frozen=True)
class StepSizeRule:
    """Which theorem's admissible step size to use, plus the quantities it needs.

    ``gap`` is an estimate of ``f~^inf - f^inf`` (only ``cor1`` uses it).
    """

    rule: str
    T: Optional[int] = None
    eps: Optional[float] = None
    gap: Optional[float] = None
    a: Optional[float] = None
    b: Optional[float] = None
    c: Optional[float] = None
    p: Optional[float] = None
    small_batch: Optional[int] = None
    gamma: Optional[float] = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown step-size rule {self.rule!r}; expected one of {RULES}")


def _need(rule: StepSizeRule, *names):
    for n in names:
        if getattr(rule, n) is None:
            raise MissingConstant(n, rule.rule)


def step_size(rule: StepSizeRule, consts: SpectralConstants, loss: Loss) -> float:
    """Largest step size admitted by the selected convergence theorem."""
    l_f = loss.l_f
    l_d, l_s = consts.l_d, consts.l_s_max
    r = rule.rule
    if r == "manual":
        _need(rule, "gamma")
        gamma = rule.gamma
    elif r == "thm2":
        gamma = 1.0 / (l_f * l_s)
    elif r == "thm3":
        _need(rule, "T")
        gamma = 1.0 / (l_f * math.sqrt(l_d * l_s * rule.T))
    elif r == "cor1":
        _need(rule, "T", "eps", "gap")
        big_d = l_f * math.sqrt(l_d * l_s)
        gamma = 1.0 / math.sqrt(big_d * rule.T)
        if rule.gap > 0:
            gamma = min(gamma, rule.eps**2 / (2.0 * big_d * rule.gap))
    elif r == "thm4":
        _need(rule, "T", "a", "b")
        d_ab = rule.a + rule.b * l_f * l_s
        gamma = 1.0 / math.sqrt(l_f * l_d * d_ab * rule.T)
    elif r == "thm5":
        gamma = 1.0 / (20.0 * l_f * l_s)
    elif r == "lsvrdsg_convex":
        gamma = 1.0 / (40.0 * l_f * l_s)
    else:  # spage
        _need(rule, "p", "small_batch")
        q = (1.0 - rule.p) / (rule.p * rule.small_batch)
        # descent condition of the analysis: gamma*L_f*L_D + gamma^2*q*L_f^2*L_S*L_D <= 1
        a2 = q * l_f**2 * l_s * l_d
        a1 = l_f * l_d
        root = 1.0 / a1 if a2 == 0 else (-a1 + math.sqrt(a1 * a1 + 4 * a2)) / (2 * a2)
        stated = math.inf if q == 0 else 1.0 / (math.sqrt(q) * l_f * (l_d + math.sqrt(l_s * l_d)))
        gamma = min(stated, root)
    if not (gamma > 0 and math.isfinite(gamma)):
        raise ValueError(f"rule {r!r} produced an invalid step size {gamma}")
    return float(gamma)


def abc_envelope_step(consts: SpectralConstants, loss: Loss, a: float, b: float, T: int) -> float:
    return step_size(StepSizeRule("thm4", T=T, a=a, b=b), consts, loss)


# --------------------------------------------------------------------------- state & steps


@dataclass(frozen=True, eq=False)
class SolverState:
    x: np.ndarray
    t: int = 0
    w: Optional[np.ndarray] = None
    h_hat: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None


def _checked(x: np.ndarray, t: int) -> np.ndarray:
    norm = float(np.linalg.norm(x))
    if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
        raise DivergenceDetected(t, norm)
    return x


def dsgd_step(p: MastProblem, st: SolverState, gamma: float, estimator: Optional[AbcEstimator], rng) -> SolverState:
    s = p.dist.sample(rng)
    if estimator is None or estimator.mode == "exact":
        g = estimator_gradient(p, s, st.x)
    else:
        g = inner_estimate(estimator, p, s, st.x, rng)
    x = _checked(st.x - gamma * g, st.t + 1)
    return replace(st, x=x, t=st.t + 1)


def _support_size(p: MastProblem) -> int:
    table = p.support()
    if not table.uniform:
        raise ConfigError("variance-reduced solvers need a uniform finite sketch support")
    return table.size


def _minibatch(rng, n: int, b: int) -> np.ndarray:
    if b == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=b, replace=False))


def lsvrdsg_init(p: MastProblem, x0, batch: int, rng) -> SolverState:
    n = _support_size(p)
    if not 1 <= batch <= n:
        raise ConfigError(f"batch must lie in [1, {n}], got {batch}")
    x0 = np.asarray(x0, dtype=float)
    return SolverState(x=x0.copy(), t=0, w=x0.copy(), h_hat=p.minibatch_gradient(x0, _minibatch(rng, n, batch)))


def lsvrdsg_step(p: MastProblem, st: SolverState, gamma: float, prob: float, batch: int, rng) -> SolverState:
    n = _support_size(p)
    if not 1 <= batch <= n:
        raise ConfigError(f"batch must lie in [1, {n}], got {batch}")
    i = int(rng.integers(n))
    h = p.support_gradients(st.x, [i])[0] - p.support_gradients(st.w, [i])[0] + st.h_hat
    x_next = _checked(st.x - gamma * h, st.t + 1)
    if rng.random() < prob:
        w, h_hat = st.x.copy(), p.minibatch_gradient(st.x, _minibatch(rng, n, batch))
    else:
        w, h_hat = st.w, st.h_hat
    return SolverState(x=x_next, t=st.t + 1, w=w, h_hat=h_hat, h=h)


def spage_init(p: MastProblem, x0, batch: int, rng) -> SolverState:
    n = _support_size(p)
    if not 1 <= batch <= n:
        raise ConfigError(f"batch must lie in [1, {n}], got {batch}")
    x0 = np.asarray(x0, dtype=float)
    return SolverState(x=x0.copy(), t=0, h=p.minibatch_gradient(x0, _minibatch(rng, n, batch)))


def spage_step(
    p: MastProblem, st: SolverState, gamma: float, prob: float, batch: int, small_batch: int, rng
) -> SolverState:
    n = _support_size(p)
    if not (1 <= small_batch <= batch <= n):
        raise ConfigError(f"need 1 <= b' <= b <= {n}, got b={batch}, b'={small_batch}")
    x_next = _checked(st.x - gamma * st.h, st.t + 1)
    if rng.random() < prob:
        h = p.minibatch_gradient(x_next, _minibatch(rng, n, batch))
    else:
        rows = _minibatch(rng, n, small_batch)
        h = st.h + np.mean(p.support_gradients(x_next, rows) - p.support_gradients(st.x, rows), axis=0)
    return SolverState(x=x_next, t=st.t + 1, h=h)


def gd_on_tilde_step(p: MastProblem, st: SolverState, gamma: float) -> SolverState:
    """Exact gradient step on ``f~`` (full support enumeration)."""
    return replace(st, x=_checked(st.x - gamma * p.tilde_gradient(st.x), st.t + 1), t=st.t + 1)


# --------------------------------------------------------------------------- runs

SOLVERS = ("dsgd", "lsvrdsg", "spage", "gd_tilde", "gd")


@dataclass
class SolverConfig:
    solver: str = "dsgd"
    gamma: float = 0.0
    iterations: int = 100
    seed: int = 0
    estimator: Optional[AbcEstimator] = None
    prob: float = 1.0
    batch: int = 1
    small_batch: int = 1

    def validate(self, support_size: Optional[int] = None):
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}")
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ConfigError("gamma must be finite and non-negative")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.solver in ("lsvrdsg", "spage"):
            if not 0 < self.prob <= 1:
                raise ConfigError("prob must lie in (0, 1]")
            if support_size is not None and not 1 <= self.batch <= support_size:
                raise ConfigError(f"batch must lie in [1, {support_size}]")
        if self.solver == "spage" and not 1 <= self.small_batch < self.batch:
            raise ConfigError("S-PAGE needs 1 <= small_batch < batch")


@dataclass
class MetricSpec:
    """What to log and how often.

    ``mast``: ``auto`` (exact when the support fits ``support_limit``, else Monte
    Carlo), ``exact``, ``mc`` or ``none``. ``evaluators`` map a column name to a
    function of the iterate (e.g. validation accuracy).
    """

    cadence: int = 1
    mast: str = "auto"
    mc_samples: int = 1000
    support_limit: int = 10_000
    evaluators: dict = field(default_factory=dict)


@dataclass
class RunRecord:
    header: dict
    rows: list
    diverged: bool = False
    final_x: Optional[np.ndarray] = None
    checkpoints: dict = field(default_factory=dict)


def _mast_metrics(p: MastProblem, x, spec: MetricSpec, seed: int, t: int) -> dict:
    if spec.mast == "none":
        return {}
    exact = spec.mast == "exact"
    if spec.mast == "auto":
        exact = p.dist.support_size() <= spec.support_limit
    if exact:
        g = p.tilde_gradient(x, spec.support_limit)
        return {"mast_loss": exact_tilde_value(p, x, spec.support_limit), "grad_norm_sq_mast": float(g @ g)}
    mean, se = monte_carlo_tilde_value(p, x, spec.mc_samples, streams.derive_stream(seed, streams.METRICS, t))
    return {"mast_loss": mean, "mast_loss_stderr": se}


def metric_row(p: MastProblem, x, spec: MetricSpec, seed: int, t: int) -> dict:
    g = p.loss.gradient(x)
    row = {"seed": seed, "t": t, "erm_loss": p.loss.value(x), "grad_norm_sq_erm": float(g @ g)}
    row.update(_mast_metrics(p, x, spec, seed, t))
    for name, fn in spec.evaluators.items():
        row[name] = fn(x)
    row["diverged"] = False
    return row


def _initial_state(p: MastProblem, cfg: SolverConfig, x0) -> SolverState:
    x0 = np.zeros(p.dim) if x0 is None else np.asarray(x0, dtype=float)
    init_rng = streams.derive_stream(cfg.seed, streams.INIT)
    if cfg.solver == "lsvrdsg":
        return lsvrdsg_init(p, x0, cfg.batch, init_rng)
    if cfg.solver == "spage":
        return spage_init(p, x0, cfg.batch, init_rng)
    return SolverState(x=x0.copy())


def _advance(p: MastProblem, cfg: SolverConfig, st: SolverState) -> SolverState:
    rng = streams.iteration_stream(cfg.seed, st.t)
    if cfg.solver == "dsgd":
        return dsgd_step(p, st, cfg.gamma, cfg.estimator, rng)
    if cfg.solver == "lsvrdsg":
        return lsvrdsg_step(p, st, cfg.gamma, cfg.prob, cfg.batch, rng)
    if cfg.solver == "spage":
        return spage_step(p, st, cfg.gamma, cfg.prob, cfg.batch, cfg.small_batch, rng)
    if cfg.solver == "gd_tilde":
        return gd_on_tilde_step(p, st, cfg.gamma)
    return replace(st, x=_checked(st.x - cfg.gamma * p.loss.gradient(st.x), st.t + 1), t=st.t + 1)


def iterate_states(p: MastProblem, cfg: SolverConfig, x0=None):
    """Yield every ``SolverState`` of a run, starting with the initial one.

    Raises :class:`DivergenceDetected` when the iterate blows up.
    """
    needs_support = cfg.solver in ("lsvrdsg", "spage", "gd_tilde")
    cfg.validate(_support_size(p) if needs_support else None)
    st = _initial_state(p, cfg, x0)
    yield st
    for _ in range(cfg.iterations):
        st = _advance(p, cfg, st)
        yield st


def trajectory(p: MastProblem, cfg: SolverConfig, x0=None) -> np.ndarray:
    """All iterates ``x^0..x^T`` stacked row-wise."""
    return np.array([st.x for st in iterate_states(p, cfg, x0)])


def run(
    p: MastProblem,
    cfg: SolverConfig,
    x0=None,
    metrics: Optional[MetricSpec] = None,
    callback: Optional[Callable[[dict], None]] = None,
    checkpoint_every: int = 0,
) -> RunRecord:
    """Iterate the configured solver ``cfg.iterations`` times, logging metric rows.

    Divergence ends the run early and is recorded in the last row instead of
    propagating.
    """
    metrics = metrics or MetricSpec()
    header = {
        "solver": cfg.solver,
        "gamma": cfg.gamma,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "dim": p.dim,
        "l_f": p.loss.l_f,
        "mu_f": p.loss.mu_f,
        "l_d": p.constants.l_d,
        "mu_d": p.constants.mu_d,
        "l_s_max": p.constants.l_s_max,
    }
    record = RunRecord(header=header, rows=[])

    def emit(row):
        record.rows.append(row)
        if callback is not None:
            callback(row)

    states = iterate_states(p, cfg, x0)
    st = next(states)
    emit(metric_row(p, st.x, metrics, cfg.seed, 0))
    if checkpoint_every:
        record.checkpoints[0] = st.x.copy()
    while True:
        prev = st
        try:
            st = next(states, None)
        except DivergenceDetected as exc:
            record.diverged = True
            emit({"seed": cfg.seed, "t": exc.t, "diverged": True})
            record.final_x = prev.x.copy()
            return record
        if st is None:
            break
        done = st.t
        if done % metrics.cadence == 0 or done == cfg.iterations:
            row = metric_row(p, st.x, metrics, cfg.seed, done)
            if not all(math.isfinite(v) for v in row.values() if isinstance(v, float)):
                row["diverged"] = True
                record.diverged = True
                emit(row)
                record.final_x = st.x.copy()
                return record
            emit(row)
        if checkpoint_every and done % checkpoint_every == 0:
            record.checkpoints[done] = st.x.copy()
    record.final_x = prev.x.copy() if st is None else st.x.copy()
    return record
