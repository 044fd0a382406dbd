"""Config-driven experiments: single runs, parameter sweeps and sparsification robustness.

Every output CSV starts with ``#`` comment lines carrying the library version,
the config hash and the dataset hash; numbers are written with ``repr`` so a
re-run with the same config reproduces the files byte for byte.
"""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import data as dd
from . import distributed as dist_mod
from . import oracle
from . import rng as streams
from . import sketch as sk
from . import solvers as sv
from .config import ExperimentConfig, validate
from .objective import AbcEstimator, LogisticLoss, MastProblem, NonconvexLogisticLoss
from .plot import line_svg

OUTPUT_ROOT_ENV = "MAST_OUTPUT_ROOT"
REFERENCE_TOL = 1e-28
COLUMNS = ("seed", "t", "erm_loss", "grad_norm_sq_erm", "mast_loss", "mast_loss_stderr", "grad_norm_sq_mast",
           "val_acc", "test_acc", "comm_nnz", "diverged")
SWEEP_AXES = {
    "gamma_multiplier": "solver.multiplier",
    "q": "sketch.q",
    "kappa": "loss.kappa",
    "p": "solver.prob",
    "b": "solver.batch",
}


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def output_dir(cfg: ExperimentConfig) -> Path:
    return output_root() / (cfg["output"]["dir"] or Path(cfg.source).stem or "experiment")


# --------------------------------------------------------------------------- setup


def sketch_from_config(spec: dict, dim: int) -> sk.SketchDistribution:
    s = {k: v for k, v in spec.items() if v is not None}
    if s["kind"] == "bernoulli" and "q" in s:
        s["p"] = s.pop("q")
    try:
        return sk.distribution_from_spec(s, dim)
    except ValueError as exc:
        raise sv.ConfigError(f"sketch: {exc}") from None


@dataclass
class Setup:
    cfg: ExperimentConfig
    dataset: dd.Dataset
    split: dd.Split
    loss: object
    dist: sk.SketchDistribution
    shift: np.ndarray
    problem: MastProblem
    gamma: float
    estimator: Optional[AbcEstimator]
    cluster: Optional[dist_mod.Cluster] = None
    header: dict = field(default_factory=dict)

    def evaluators(self) -> dict:
        out = {}
        if not self.cfg["metrics"]["accuracy"]:
            return out
        ds, spl = self.dataset, self.split
        if spl.has_validation:
            out["val_acc"] = lambda x: dd.accuracy(ds, spl.validation, x)
        if spl.has_test:
            out["test_acc"] = lambda x: dd.accuracy(ds, spl.test, x)
        return out

    def initial_point(self, seed: int) -> np.ndarray:
        init = self.cfg["init"]
        if init["kind"] == "zero":
            return np.zeros(self.problem.dim)
        return init["scale"] * streams.derive_stream(seed, streams.START).standard_normal(self.problem.dim)


def load_dataset(cfg: ExperimentConfig) -> dd.Dataset:
    ds_cfg = cfg["dataset"]
    ds = dd.load_fixture(ds_cfg["fixture"]) if ds_cfg["fixture"] else dd.load_libsvm(ds_cfg["path"])
    return ds.with_intercept() if ds_cfg["intercept"] else ds


def build_loss(cfg: ExperimentConfig, train: dd.Dataset):
    lc = cfg["loss"]
    if lc["kind"] == "logistic":
        if lc["kappa"] is not None:
            return LogisticLoss.with_condition_number(train.rows, train.labels, float(lc["kappa"]))
        return LogisticLoss(train.rows, train.labels, float(lc["lam"]))
    if lc["lam"] is None:
        raise sv.ConfigError("loss.lam: the nonconvex loss has no condition number; give lam")
    return NonconvexLogisticLoss(train.rows, train.labels, float(lc["lam"]))


def reference_solution(loss) -> oracle.ReferenceSolution:
    return oracle.solve_reference(loss, tol_grad_sq=REFERENCE_TOL)


def build_shift(cfg: ExperimentConfig, loss) -> np.ndarray:
    kind = cfg["shift"]["kind"]
    if kind == "zero":
        return np.zeros(loss.dim)
    if kind == "reference":
        return reference_solution(loss).x
    s = np.atleast_1d(np.loadtxt(cfg["shift"]["path"], dtype=float))
    if s.shape != (loss.dim,):
        raise sv.ConfigError(f"shift.path: expected {loss.dim} values, found {s.size}")
    return s


def choose_step(cfg: ExperimentConfig, problem: MastProblem, estimator, cluster=None) -> float:
    sol = cfg["solver"]
    if sol["gamma"] is not None:
        return float(sol["gamma"]) * sol["multiplier"]
    T = max(sol["iterations"], 1)
    if cluster is not None:
        rule = "strongly_convex" if sol["rule"] == "thm2" else "nonconvex"
        return dist_mod.distributed_step_size(cluster, T, rule) * sol["multiplier"]
    kw = {"T": T, "eps": sol["eps"], "gap": sol["gap"], "p": sol["prob"], "small_batch": sol["small_batch"]}
    if sol["rule"] == "thm4":
        est = estimator or AbcEstimator()
        abc = est.abc_constants(problem.loss)
        kw.update(a=abc.a, b=abc.b)
    try:
        gamma = sv.step_size(sv.StepSizeRule(sol["rule"], **kw), problem.constants, problem.loss)
    except sv.MissingConstant as exc:
        raise sv.ConfigError(f"solver: rule {sol['rule']} needs {exc}") from None
    return gamma * sol["multiplier"]


def build_cluster(cfg: ExperimentConfig, train: dd.Dataset, shift) -> dist_mod.Cluster:
    nodes_cfg = cfg["cluster"]["nodes"]
    shards = np.array_split(np.arange(train.n), len(nodes_cfg))
    nodes = []
    for i, (spec, idx) in enumerate(zip(nodes_cfg, shards)):
        if idx.size == 0:
            raise sv.ConfigError(f"cluster.nodes[{i}]: no training rows left for this node")
        part = train.subset(idx)
        nodes.append(dist_mod.Node(build_loss(cfg, part), sketch_from_config(spec["sketch"], train.d), i))
    return dist_mod.Cluster(tuple(nodes), shift)


def prepare(cfg: ExperimentConfig) -> Setup:
    ds = load_dataset(cfg)
    spl = dd.split(ds, cfg["split"]["fractions"], cfg["split"]["seed"])
    train = ds.subset(spl.train)
    loss = build_loss(cfg, train)
    shift = build_shift(cfg, loss)
    dist = sketch_from_config(cfg["sketch"], ds.d)
    problem = MastProblem(loss, dist, shift)
    est_cfg = cfg["solver"]["estimator"]
    estimator = None if est_cfg["mode"] == "exact" else AbcEstimator(est_cfg["mode"], est_cfg["sigma2"], est_cfg["batch"])
    cluster = build_cluster(cfg, train, shift) if cfg["solver"]["name"] == "distributed" else None
    gamma = choose_step(cfg, problem, estimator, cluster)
    c = problem.constants
    header = {
        "version": __version__,
        "config_hash": cfg.hash,
        "dataset_hash": f"{ds.content_hash:016x}",
        "n": ds.n,
        "d": ds.d,
        "train_rows": len(spl.train),
        "solver": cfg["solver"]["name"],
        "gamma": gamma,
        "l_f": loss.l_f,
        "mu_f": loss.mu_f,
        "l_d": c.l_d,
        "mu_d": c.mu_d,
        "l_s_max": c.l_s_max,
    }
    if cluster is not None:
        header["d_max"] = cluster.d_max
    return Setup(cfg, ds, spl, loss, dist, shift, problem, gamma, estimator, cluster, header)


# --------------------------------------------------------------------------- runs


def solver_config(setup: Setup, seed: int) -> sv.SolverConfig:
    sol = setup.cfg["solver"]
    return sv.SolverConfig(sol["name"], setup.gamma, sol["iterations"], seed, setup.estimator,
                           sol["prob"], sol["batch"], sol["small_batch"])


def metric_spec(setup: Setup) -> sv.MetricSpec:
    m = setup.cfg["metrics"]
    return sv.MetricSpec(m["cadence"], m["mast"], m["mc_samples"], m["support_limit"], setup.evaluators())


def run_seed(setup: Setup, seed: int, checkpoint_every: int = 0) -> sv.RunRecord:
    x0 = setup.initial_point(seed)
    if setup.cluster is not None:
        c = setup.cluster
        limit = setup.cfg["metrics"]["support_limit"]
        exact = setup.cfg["metrics"]["mast"] != "none" and all(n.dist.support_size() <= limit for n in c.nodes)
        return dist_mod.run_distributed(c, setup.gamma, setup.cfg["solver"]["iterations"], seed, x0,
                                        cadence=setup.cfg["metrics"]["cadence"], exact_tilde=exact,
                                        evaluators=setup.evaluators())
    return sv.run(setup.problem, solver_config(setup, seed), x0, metric_spec(setup), checkpoint_every=checkpoint_every)


def _run_seed_job(args):
    setup, seed = args
    return run_seed(setup, seed)


def run_all_seeds(setup: Setup, jobs: int = 1) -> list[sv.RunRecord]:
    seeds = setup.cfg["seeds"]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_seed_job, [(setup, s) for s in seeds]))
    return [run_seed(setup, s) for s in seeds]


# --------------------------------------------------------------------------- CSV output


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header: dict, columns, rows) -> str:
    buf = io.StringIO()
    for k, v in header.items():
        buf.write(f"# {k}={fmt(v)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def present_columns(rows, prefix=()) -> list[str]:
    seen = {k for r in rows for k in r}
    return list(prefix) + [c for c in COLUMNS if c in seen] + sorted(seen - set(COLUMNS) - set(prefix))


def summarize(rows, keys=("t",)) -> list[dict]:
    """Mean and population std of each numeric metric per group, over non-diverged rows."""
    metrics = [c for c in COLUMNS if c not in ("seed", "t", "diverged")]
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key in sorted(groups):
        members = groups[key]
        row = dict(zip(keys, key))
        row["n_seeds"] = len({r["seed"] for r in members})
        row["n_diverged"] = sum(bool(r["diverged"]) for r in members)
        for m in metrics:
            vals = [r[m] for r in members if m in r and r[m] is not None and not r["diverged"]]
            if vals:
                arr = np.array(vals, dtype=float)
                row[f"{m}_mean"] = float(np.mean(arr))
                row[f"{m}_std"] = float(np.std(arr))
        out.append(row)
    return out


def _summary_columns(summary, keys) -> list[str]:
    seen = {k for r in summary for k in r}
    cols = list(keys) + ["n_seeds", "n_diverged"]
    for m in COLUMNS:
        for suffix in ("_mean", "_std"):
            if m + suffix in seen:
                cols.append(m + suffix)
    return cols


def cmd_run(cfg: ExperimentConfig, out: Optional[Path] = None, jobs: int = 1) -> dict:
    out = out or output_dir(cfg)
    setup = prepare(cfg)
    records = run_all_seeds(setup, jobs)
    rows = [r for rec in records for r in rec.rows]
    write_text(out / "runs.csv", csv_text(setup.header, present_columns(rows), rows))
    summary = summarize(rows)
    write_text(out / "summary.csv", csv_text(setup.header, _summary_columns(summary, ("t",)), summary))
    metric = cfg["output"]["plot_metric"]
    if cfg["output"]["svg"] and any(f"{metric}_mean" in s for s in summary):
        pts = [s for s in summary if f"{metric}_mean" in s]
        svg = line_svg([(metric, [s["t"] for s in pts], [s[f"{metric}_mean"] for s in pts],
                         [s[f"{metric}_std"] for s in pts])], title=f"{cfg['solver']['name']} ({cfg.hash})",
                       ylabel=metric, log_y=metric.startswith("grad"))
        write_text(out / "plot.svg", svg)
    return {"dir": out, "records": records, "setup": setup}


def parse_axis_values(axis: str, values) -> list:
    if axis not in SWEEP_AXES:
        raise sv.ConfigError(f"sweep axis {axis!r}: expected one of {sorted(SWEEP_AXES)}")
    if not values:
        raise sv.ConfigError("sweep values: need at least one value")
    out = []
    for v in values:
        try:
            out.append(int(v) if axis == "b" else float(v))
        except (TypeError, ValueError):
            raise sv.ConfigError(f"sweep values: {v!r} is not a number") from None
    return out


def _with_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "q":
        if cfg["sketch"]["kind"] == "identity":
            raise sv.ConfigError("sweep axis q: the identity sketch has no keep ratio")
        return ExperimentConfig(validate({**cfg.data, "sketch": {**cfg["sketch"], "k": None, "p": None, "q": value}}),
                                cfg.source)
    if axis == "kappa":
        return ExperimentConfig(validate({**cfg.data, "loss": {**cfg["loss"], "lam": None, "kappa": value}}), cfg.source)
    return cfg.with_value(SWEEP_AXES[axis], value)


def cmd_sweep(cfg: ExperimentConfig, axis: str, values, out: Optional[Path] = None, jobs: int = 1) -> dict:
    values = parse_axis_values(axis, values)
    out = out or output_dir(cfg)
    cells, all_rows, series = [], [], []
    for v in values:
        cell_cfg = _with_axis(cfg, axis, v)
        setup = prepare(cell_cfg)
        records = run_all_seeds(setup, jobs)
        rows = [{"axis": axis, "value": v, "gamma": setup.gamma, **r} for rec in records for r in rec.rows]
        all_rows.extend(rows)
        cells.append({"value": v, "records": records, "setup": setup})
        summ = [s for s in summarize(rows) if f"{cfg['output']['plot_metric']}_mean" in s]
        metric = cfg["output"]["plot_metric"]
        series.append((f"{axis}={v:g}", [s["t"] for s in summ], [s[f"{metric}_mean"] for s in summ], None))
    header = {"version": __version__, "config_hash": cfg.hash, "axis": axis,
              "values": " ".join(fmt(v) for v in values), "dataset_hash": cells[0]["setup"].header["dataset_hash"]}
    write_text(out / "sweep.csv", csv_text(header, present_columns(all_rows, ("axis", "value", "gamma")), all_rows))
    summary = summarize(all_rows, ("value", "t"))
    write_text(out / "sweep_summary.csv", csv_text(header, _summary_columns(summary, ("value", "t")), summary))
    if cfg["output"]["svg"]:
        metric = cfg["output"]["plot_metric"]
        write_text(out / "sweep.svg", line_svg(series, title=f"sweep over {axis}", ylabel=metric,
                                               log_y=metric.startswith("grad")))
    return {"dir": out, "cells": cells}


# --------------------------------------------------------------------------- robustness


def select_mast_model(setup: Setup, seed: int) -> tuple[np.ndarray, int]:
    """Train with the configured solver and keep the checkpoint with the best validation accuracy."""
    every = setup.cfg["checkpoint_every"]
    rec = run_seed(setup, seed, checkpoint_every=every or setup.cfg["solver"]["iterations"] or 1)
    if rec.diverged:
        raise sv.DivergenceDetected(rec.rows[-1]["t"], float("inf"))
    if setup.cfg["robustness"]["select"] == "final" or not setup.split.has_validation or not rec.checkpoints:
        return rec.final_x, setup.cfg["solver"]["iterations"]
    best_t, best_acc = None, -1.0
    for t in sorted(rec.checkpoints):
        acc = dd.accuracy(setup.dataset, setup.split.validation, rec.checkpoints[t])
        if acc > best_acc:
            best_t, best_acc = t, acc
    return rec.checkpoints[best_t], best_t


def sparsified_accuracies(setup: Setup, model: np.ndarray, diagonals: np.ndarray) -> np.ndarray:
    models = setup.shift + diagonals * (model - setup.shift)
    return dd.batch_accuracy(setup.dataset, setup.split.test, models)


def sample_diagonals(dist: sk.SketchDistribution, n: int, seed: int) -> np.ndarray:
    g = streams.derive_stream(seed, streams.ROBUSTNESS)
    return dist.sample_diagonals(g, n)


QUANTILES = (("min", 0.0), ("q25", 0.25), ("median", 0.5), ("q75", 0.75), ("max", 1.0))


def cmd_robustness(cfg: ExperimentConfig, n_sketches: Optional[int] = None, out: Optional[Path] = None) -> dict:
    out = out or output_dir(cfg)
    setup = prepare(cfg)
    if not setup.split.has_test:
        raise sv.ConfigError("split.fractions: robustness needs a test part")
    rob = cfg["robustness"]
    n = n_sketches or rob["n_sketches"]
    if rob["model_path"]:
        mast_x = np.atleast_1d(np.loadtxt(rob["model_path"], dtype=float))
        if mast_x.shape != (setup.problem.dim,):
            raise sv.ConfigError(f"robustness.model_path: expected {setup.problem.dim} weights, found {mast_x.size}")
        picked = -1
    else:
        mast_x, picked = select_mast_model(setup, cfg["seeds"][0])
    erm_x = reference_solution(setup.loss).x
    diags = sample_diagonals(setup.dist, n, rob["seed"])
    acc = {"mast": sparsified_accuracies(setup, mast_x, diags), "erm": sparsified_accuracies(setup, erm_x, diags)}
    full = {"mast": dd.accuracy(setup.dataset, setup.split.test, mast_x),
            "erm": dd.accuracy(setup.dataset, setup.split.test, erm_x)}
    header = {**setup.header, "n_sketches": n, "robustness_seed": rob["seed"], "mast_checkpoint": picked}
    samples = [{"sketch": i, "mast": float(acc["mast"][i]), "erm": float(acc["erm"][i])} for i in range(n)]
    write_text(out / "robustness.csv", csv_text(header, ("sketch", "mast", "erm"), samples))
    summary = []
    for model in ("mast", "erm"):
        row = {"model": model, "unsketched": full[model]}
        row.update({name: float(np.quantile(acc[model], q)) for name, q in QUANTILES})
        summary.append(row)
    write_text(out / "robustness_summary.csv",
               csv_text(header, ("model", "unsketched") + tuple(n for n, _ in QUANTILES), summary))
    write_text(out / "mast_model.txt", "\n".join(fmt(float(v)) for v in mast_x) + "\n")
    write_text(out / "erm_model.txt", "\n".join(fmt(float(v)) for v in erm_x) + "\n")
    return {"dir": out, "accuracies": acc, "unsketched": full, "summary": summary, "checkpoint": picked}
