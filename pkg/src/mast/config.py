"""Experiment configuration: strict YAML schema with field-path error messages."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .data import fnv1a_64
from .solvers import RULES, SOLVERS, ConfigError

_REQUIRED = object()

# Each schema node is either a dict of child schemas or a leaf (types, default, check).
# Leaves: (accepted python types, default or _REQUIRED, optional validator returning an error or None).


def _positive(v):
    return None if v > 0 else "must be positive"


def _non_negative(v):
    return None if v >= 0 else "must be non-negative"


def _unit_open(v):
    return None if 0 < v <= 1 else "must lie in (0, 1]"


def _one_of(*options):
    return lambda v: None if v in options else f"must be one of {list(options)}"


NUM = (int, float)
OPT_NUM = (int, float, type(None))
OPT_STR = (str, type(None))

SKETCH = {
    "kind": ((str,), "randk", _one_of("identity", "randk", "bernoulli")),
    "k": ((int, type(None)), None, None),
    "q": (OPT_NUM, None, None),
    "p": ((int, float, list, type(None)), None, None),
}

SCHEMA = {
    "dataset": {
        "fixture": (OPT_STR, None, None),
        "path": (OPT_STR, None, None),
        "intercept": ((bool,), False, None),
    },
    "split": {
        "fractions": ((list,), [0.7, 0.18, 0.12], None),
        "seed": ((int,), 0, _non_negative),
    },
    "loss": {
        "kind": ((str,), "logistic", _one_of("logistic", "nonconvex_logistic")),
        "kappa": (OPT_NUM, None, None),
        "lam": (OPT_NUM, None, None),
    },
    "shift": {
        "kind": ((str,), "zero", _one_of("zero", "file", "reference")),
        "path": (OPT_STR, None, None),
    },
    "sketch": SKETCH,
    "solver": {
        "name": ((str,), "dsgd", _one_of(*SOLVERS, "distributed")),
        "iterations": ((int,), 100, _non_negative),
        "gamma": (OPT_NUM, None, None),
        "rule": ((str,), "thm2", _one_of(*RULES)),
        "multiplier": (NUM, 1.0, _positive),
        "eps": (OPT_NUM, None, None),
        "gap": (OPT_NUM, None, None),
        "prob": (NUM, 1.0, _unit_open),
        "batch": ((int,), 1, _positive),
        "small_batch": ((int,), 1, _positive),
        "estimator": {
            "mode": ((str,), "exact", _one_of("exact", "bounded_variance", "uniform_subsample")),
            "batch": ((int,), 1, _positive),
            "sigma2": (NUM, 0.0, _non_negative),
        },
    },
    "cluster": {
        "nodes": ((list,), [], None),
    },
    "init": {
        "kind": ((str,), "zero", _one_of("zero", "gaussian")),
        "scale": (NUM, 1.0, _non_negative),
    },
    "seeds": ((list,), [0, 1, 2, 3, 4], None),
    "metrics": {
        "cadence": ((int,), 10, _positive),
        "mast": ((str,), "auto", _one_of("auto", "exact", "mc", "none")),
        "mc_samples": ((int,), 1000, _positive),
        "support_limit": ((int,), 10_000, _positive),
        "accuracy": ((bool,), True, None),
    },
    "checkpoint_every": ((int,), 50, _non_negative),
    "robustness": {
        "n_sketches": ((int,), 1000, _positive),
        "seed": ((int,), 0, _non_negative),
        "model_path": (OPT_STR, None, None),
        "select": ((str,), "peak_validation", _one_of("peak_validation", "final")),
    },
    "output": {
        "dir": (OPT_STR, None, None),
        "svg": ((bool,), True, None),
        "plot_metric": ((str,), "erm_loss", None),
    },
}


def _validate(node, schema, path: str):
    if isinstance(schema, dict):
        if node is None:
            node = {}
        if not isinstance(node, dict):
            raise ConfigError(f"{path or '<root>'}: expected a mapping")
        unknown = sorted(set(node) - set(schema))
        if unknown:
            raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown key")
        return {k: _validate(node.get(k), sub, f"{path}.{k}" if path else k) for k, sub in schema.items()}
    types, default, check = schema
    if node is None:
        if default is _REQUIRED:
            raise ConfigError(f"{path}: required")
        return copy.deepcopy(default)
    if isinstance(node, bool) and bool not in types:
        raise ConfigError(f"{path}: expected {_type_names(types)}, got a boolean")
    if not isinstance(node, types):
        raise ConfigError(f"{path}: expected {_type_names(types)}, got {type(node).__name__}")
    if check is not None:
        err = check(node)
        if err:
            raise ConfigError(f"{path}: {err}")
    return node


def _type_names(types) -> str:
    return " or ".join(sorted(t.__name__ for t in types))


def _cross_checks(cfg: dict):
    ds = cfg["dataset"]
    if (ds["fixture"] is None) == (ds["path"] is None):
        raise ConfigError("dataset: give exactly one of fixture or path")
    fr = cfg["split"]["fractions"]
    if len(fr) not in (1, 2, 3) or not all(isinstance(f, NUM) and not isinstance(f, bool) and f > 0 for f in fr):
        raise ConfigError("split.fractions: need one to three positive numbers")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"split.fractions: sum to {sum(fr)!r}, expected 1")
    loss = cfg["loss"]
    if (loss["kappa"] is None) == (loss["lam"] is None):
        raise ConfigError("loss: give exactly one of kappa or lam")
    if loss["kappa"] is not None and loss["kappa"] <= 1:
        raise ConfigError("loss.kappa: must exceed 1")
    if loss["lam"] is not None and loss["lam"] < 0:
        raise ConfigError("loss.lam: must be non-negative")
    if cfg["shift"]["kind"] == "file" and not cfg["shift"]["path"]:
        raise ConfigError("shift.path: required when shift.kind is file")
    seeds = cfg["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError("seeds: need a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicates")
    _check_sketch(cfg["sketch"], "sketch")
    if cfg["solver"]["name"] == "distributed":
        nodes = cfg["cluster"]["nodes"]
        if not nodes:
            raise ConfigError("cluster.nodes: required for the distributed solver")
        for i, node in enumerate(nodes):
            path = f"cluster.nodes[{i}]"
            node = _validate(node, {"sketch": SKETCH}, path)
            _check_sketch(node["sketch"], f"{path}.sketch")
            nodes[i] = node
    elif cfg["cluster"]["nodes"]:
        raise ConfigError("cluster.nodes: only used by the distributed solver")
    sol = cfg["solver"]
    if sol["gamma"] is not None and not sol["gamma"] > 0:
        raise ConfigError("solver.gamma: must be positive")


def _check_sketch(sk: dict, path: str):
    kind = sk["kind"]
    given = [k for k in ("k", "q", "p") if sk[k] is not None]
    if kind == "identity" and given:
        raise ConfigError(f"{path}.{given[0]}: not used by the identity sketch")
    if kind == "randk" and given not in (["k"], ["q"]):
        raise ConfigError(f"{path}: randk needs exactly one of k or q")
    if kind == "randk" and sk["q"] is not None and not 0 < sk["q"] <= 1:
        raise ConfigError(f"{path}.q: must lie in (0, 1]")
    if kind == "randk" and sk["k"] is not None and sk["k"] < 1:
        raise ConfigError(f"{path}.k: must be positive")
    if kind == "bernoulli" and given not in (["p"], ["q"]):
        raise ConfigError(f"{path}: bernoulli needs exactly one of p or q")


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict
    source: str = "<memory>"

    def __getitem__(self, key):
        return self.data[key]

    @property
    def hash(self) -> str:
        return f"{fnv1a_64(canonical_json(self.data).encode()):016x}"

    def with_value(self, dotted: str, value: Any) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        node = data
        *parents, leaf = dotted.split(".")
        for i, p in enumerate(parents):
            node = node.get(p) if isinstance(node, dict) else None
            if not isinstance(node, dict):
                raise ConfigError(f"{'.'.join(parents[: i + 1])}: not a config section")
        node[leaf] = value
        return ExperimentConfig(validate(data), self.source)


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def validate(raw) -> dict:
    cfg = _validate(raw, SCHEMA, "")
    _cross_checks(cfg)
    return cfg


def parse_config(text: str, source: str = "<memory>") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML ({exc})") from None
    return ExperimentConfig(validate(raw), source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
