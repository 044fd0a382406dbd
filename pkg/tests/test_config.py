import pytest

from mast.config import ExperimentConfig, load_config, parse_config
from mast.solvers import ConfigError

BASE = """
dataset: {fixture: mixed}
loss: {kind: logistic, kappa: 100}
sketch: {kind: randk, q: 0.5}
"""


def test_defaults_fill_in():
    cfg = parse_config(BASE)
    assert cfg["seeds"] == [0, 1, 2, 3, 4]
    assert cfg["split"]["fractions"] == [0.7, 0.18, 0.12]
    assert cfg["checkpoint_every"] == 50
    assert cfg["metrics"]["support_limit"] == 10_000
    assert cfg["robustness"]["n_sketches"] == 1000


@pytest.mark.parametrize("extra, path", [
    ("solver: {nmae: dsgd}", "solver.nmae"),
    ("sovler: {name: dsgd}", "sovler"),
    ("solver: {iterations: ten}", "solver.iterations"),
    ("solver: {iterations: -1}", "solver.iterations"),
    ("solver: {name: adam}", "solver.name"),
    ("solver: {prob: 0}", "solver.prob"),
    ("metrics: {accuracy: 1}", "metrics.accuracy"),
    ("split: {fractions: [0.5, 0.4]}", "split.fractions"),
    ("seeds: [1, 1]", "seeds"),
    ("seeds: []", "seeds"),
    ("shift: {kind: file}", "shift.path"),
    ("cluster: {nodes: [{sketch: {kind: identity}}]}", "cluster.nodes"),
])
def test_errors_name_the_field(extra, path):
    with pytest.raises(ConfigError) as info:
        parse_config(BASE + extra)
    assert str(info.value).startswith(path)


def test_loss_needs_exactly_one_strength():
    with pytest.raises(ConfigError, match="exactly one of kappa or lam"):
        parse_config("dataset: {fixture: mixed}\nloss: {kind: logistic, kappa: 10, lam: 0.1}\nsketch: {kind: identity}")
    with pytest.raises(ConfigError, match="kappa: must exceed 1"):
        parse_config("dataset: {fixture: mixed}\nloss: {kappa: 1}\nsketch: {kind: identity}")


def test_dataset_needs_exactly_one_source():
    with pytest.raises(ConfigError, match="^dataset"):
        parse_config("loss: {kappa: 10}\nsketch: {kind: identity}")


@pytest.mark.parametrize("sketch", ["{kind: randk}", "{kind: randk, k: 2, q: 0.5}", "{kind: identity, k: 1}",
                                    "{kind: bernoulli}", "{kind: randk, q: 1.5}", "{kind: gauss}"])
def test_sketch_specs_are_checked(sketch):
    with pytest.raises(ConfigError):
        parse_config("dataset: {fixture: mixed}\nloss: {kappa: 10}\nsketch: " + sketch)


def test_distributed_nodes_are_validated():
    text = BASE + "solver: {name: distributed}\ncluster: {nodes: [{sketch: {kind: randk, k: 1}}, {sketch: {kind: oops}}]}"
    with pytest.raises(ConfigError, match=r"cluster.nodes\[1\].sketch.kind"):
        parse_config(text)


def test_invalid_yaml_is_a_config_error():
    with pytest.raises(ConfigError):
        parse_config("dataset: [unclosed")


def test_hash_is_stable_and_sensitive():
    a = parse_config(BASE)
    b = parse_config(BASE.replace("kappa: 100", "kappa: 100"))
    assert a.hash == b.hash and len(a.hash) == 16
    assert a.with_value("solver.iterations", 7).hash != a.hash


def test_with_value_revalidates():
    cfg = parse_config(BASE)
    assert cfg.with_value("solver.multiplier", 10.0)["solver"]["multiplier"] == 10.0
    with pytest.raises(ConfigError):
        cfg.with_value("solver.multiplier", -1.0)


def test_load_config_reads_file(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(BASE)
    cfg = load_config(path)
    assert isinstance(cfg, ExperimentConfig) and cfg.source == str(path)


@pytest.mark.parametrize("name", ["dsgd_trajectory", "gamma_sweep", "robustness", "distributed", "lsvrdsg", "spage"])
def test_shipped_configs_validate(name):
    from pathlib import Path

    load_config(Path(__file__).resolve().parents[1] / "configs" / f"{name}.yaml")
