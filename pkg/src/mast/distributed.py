"""Lockstep simulation of distributed double sketched gradient descent.

Each round the server samples one sketch per node, ships the sketched model
``y_i = s + S_i (x - s)`` to node ``i``, receives ``S_i^T grad f_i(y_i)`` and
averages. Sketches for node ``i`` at round ``t`` come from the stream keyed on
``(seed, node_id, t)``; aggregation runs in fixed node order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as streams
from . import sketch as sk
from .objective import Loss, MastProblem, exact_tilde_value
from .sketch import SketchDistribution, SketchSample
from .solvers import DIVERGENCE_NORM, DivergenceDetected, RunRecord


@dataclass(frozen=True, eq=False)
class Node:
    loss: Loss
    dist: SketchDistribution
    id: int

    @property
    def product(self) -> float:
        c = self.dist.spectral_constants()
        return self.loss.l_f**2 * c.l_d * c.l_s_max


@dataclass(frozen=True, eq=False)
class Cluster:
    nodes: tuple
    shift: np.ndarray
    problems: tuple = field(init=False, repr=False)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        if not nodes:
            raise ValueError("a cluster needs at least one node")
        s = np.array(self.shift, dtype=float).ravel()
        for n in nodes:
            if n.loss.dim != s.size or n.dist.dim != s.size:
                raise ValueError(f"node {n.id} does not match the shared dimension {s.size}")
        s.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "shift", s)
        object.__setattr__(self, "problems", tuple(MastProblem(n.loss, n.dist, s) for n in nodes))

    @property
    def dim(self) -> int:
        return self.shift.size

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def d_max(self) -> float:
        return max(n.product for n in self.nodes)

    def tilde_value(self, x) -> float:
        return float(np.mean([exact_tilde_value(p, x) for p in self.problems]))

    def tilde_gradient(self, x) -> np.ndarray:
        return np.mean([p.tilde_gradient(x) for p in self.problems], axis=0)

    def erm_value(self, x) -> float:
        return float(np.mean([n.loss.value(x) for n in self.nodes]))

    def erm_gradient(self, x) -> np.ndarray:
        return np.mean([n.loss.gradient(x) for n in self.nodes], axis=0)


@dataclass
class CommStats:
    downlink_nnz: list = field(default_factory=list)
    uplink_nnz: list = field(default_factory=list)

    @property
    def total_downlink(self) -> int:
        return int(sum(self.downlink_nnz))

    @property
    def total_uplink(self) -> int:
        return int(sum(self.uplink_nnz))


def sample_round(c: Cluster, seed: int, t: int) -> list[SketchSample]:
    return [n.dist.sample(streams.derive_stream(seed, streams.NODE, n.id, t)) for n in c.nodes]


def apply_round(c: Cluster, x, gamma: float, sketches: Sequence[SketchSample], t: int = 0):
    """One aggregation step with explicit per-node sketches."""
    x = np.asarray(x, dtype=float)
    if x.shape != (c.dim,):
        raise ValueError(f"dimension mismatch: cluster dim {c.dim}, got {x.shape}")
    total = np.zeros(c.dim)
    stats = CommStats()
    for node, s in zip(c.nodes, sketches):
        y = c.shift + sk.apply(s, x - c.shift)
        msg = sk.apply_transpose(s, node.loss.gradient(y))
        # sparse payloads: the changed coordinates of y go down, nonzeros of msg come up
        stats.downlink_nnz.append(int(np.count_nonzero(y - c.shift)))
        stats.uplink_nnz.append(int(np.count_nonzero(msg)))
        total += msg
    x_next = x - gamma / c.size * total
    norm = float(np.linalg.norm(x_next))
    if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
        raise DivergenceDetected(t + 1, norm)
    return x_next, stats


def distributed_round(c: Cluster, x, gamma: float, seed: int, t: int):
    return apply_round(c, x, gamma, sample_round(c, seed, t), t)


def distributed_step_size(c: Cluster, T: Optional[int] = None, rule: str = "nonconvex") -> float:
    """``1/sqrt(D_max T)`` for the nonconvex rule; ``1/max_i(L_fi L_Si^max)`` for ``strongly_convex``."""
    if rule == "nonconvex":
        if T is None or T < 1:
            raise ValueError("T must be at least 1")
        return 1.0 / math.sqrt(c.d_max * T)
    if rule == "strongly_convex":
        return 1.0 / max(n.loss.l_f * n.dist.spectral_constants().l_s_max for n in c.nodes)
    raise ValueError(f"unknown rule {rule!r}")


def run_distributed(
    c: Cluster,
    gamma: float,
    iterations: int,
    seed: int,
    x0=None,
    cadence: int = 1,
    exact_tilde: bool = True,
    callback: Optional[Callable[[dict], None]] = None,
    evaluators: Optional[dict] = None,
) -> RunRecord:
    """Run ``iterations`` rounds, logging every ``cadence`` rounds.

    ``comm_nnz`` in each row is the cumulative downlink plus uplink nonzero
    count since the start of the run.
    """
    x = np.zeros(c.dim) if x0 is None else np.array(x0, dtype=float)
    record = RunRecord(header={"solver": "distributed", "gamma": gamma, "iterations": iterations,
                               "seed": seed, "dim": c.dim, "nodes": c.size, "d_max": c.d_max}, rows=[])

    def row(t, x, comm):
        g = c.erm_gradient(x)
        r = {"seed": seed, "t": t, "erm_loss": c.erm_value(x), "grad_norm_sq_erm": float(g @ g)}
        if exact_tilde:
            gt = c.tilde_gradient(x)
            r["mast_loss"] = c.tilde_value(x)
            r["grad_norm_sq_mast"] = float(gt @ gt)
        for name, fn in (evaluators or {}).items():
            r[name] = fn(x)
        r["comm_nnz"] = comm
        r["diverged"] = False
        record.rows.append(r)
        if callback is not None:
            callback(r)

    row(0, x, 0)
    sent = 0
    for t in range(iterations):
        try:
            x, stats = distributed_round(c, x, gamma, seed, t)
        except DivergenceDetected as exc:
            record.diverged = True
            record.rows.append({"seed": seed, "t": exc.t, "diverged": True})
            break
        sent += stats.total_downlink + stats.total_uplink
        if (t + 1) % cadence == 0 or t + 1 == iterations:
            row(t + 1, x, sent)
    record.final_x = x
    return record


def distributed_trajectory(c: Cluster, gamma: float, iterations: int, seed: int, x0=None) -> np.ndarray:
    x = np.zeros(c.dim) if x0 is None else np.array(x0, dtype=float)
    out = [x]
    for t in range(iterations):
        x, _ = distributed_round(c, x, gamma, seed, t)
        out.append(x)
    return np.array(out)
