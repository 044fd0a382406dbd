import csv
import io

import numpy as np
import pytest

from mast import checks
from mast.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_OK, main

SMALL = """
dataset: {fixture: mixed}
split: {fractions: [0.7, 0.18, 0.12], seed: 0}
loss: {kind: logistic, kappa: 100}
sketch: {kind: randk, k: 1}
solver: {name: dsgd, iterations: 40, rule: thm2}
seeds: [0, 1, 2]
metrics: {cadence: 10, mast: exact}
checkpoint_every: 10
output: {plot_metric: erm_loss}
"""


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("MAST_OUTPUT_ROOT", str(tmp_path / "out"))
    return tmp_path


def write_config(root, text, name="small"):
    path = root / f"{name}.yaml"
    path.write_text(text)
    return str(path)


def read_csv(path):
    text = path.read_text()
    header = dict(line[2:].split("=", 1) for line in text.splitlines() if line.startswith("# "))
    body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
    return header, list(csv.DictReader(io.StringIO(body)))


def test_run_writes_rows_summary_and_plot(root):
    assert main(["run", write_config(root, SMALL)]) == EXIT_OK
    out = root / "out" / "small"
    header, rows = read_csv(out / "runs.csv")
    assert header["config_hash"] and header["dataset_hash"] == "25bed905c278f38c" and header["version"]
    assert sorted({r["seed"] for r in rows}) == ["0", "1", "2"]
    assert [r["t"] for r in rows if r["seed"] == "0"] == ["0", "10", "20", "30", "40"]
    _, summary = read_csv(out / "summary.csv")
    for s in summary:
        vals = [float(r["erm_loss"]) for r in rows if r["t"] == s["t"]]
        assert float(s["erm_loss_mean"]) == pytest.approx(np.mean(vals), abs=1e-12)
        assert s["n_seeds"] == "3"
    assert (out / "plot.svg").read_text().startswith("<svg")


def test_zero_iterations_give_one_row_per_seed(root):
    cfg = write_config(root, SMALL.replace("iterations: 40", "iterations: 0"))
    assert main(["run", cfg]) == EXIT_OK
    _, rows = read_csv(root / "out" / "small" / "runs.csv")
    assert [(r["seed"], r["t"]) for r in rows] == [("0", "0"), ("1", "0"), ("2", "0")]


def test_run_is_byte_identical_across_reruns_and_jobs(root):
    cfg = write_config(root, SMALL)
    main(["run", cfg, "--out", str(root / "a")])
    main(["run", cfg, "--out", str(root / "b"), "--jobs", "2"])
    for name in ("runs.csv", "summary.csv"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_sweep_writes_one_block_per_value(root):
    cfg = write_config(root, SMALL)
    assert main(["sweep", cfg, "--axis", "gamma_multiplier", "--values", "1,2", "--out", str(root / "a")]) == EXIT_OK
    assert main(["sweep", cfg, "--axis", "gamma_multiplier", "--values", "1", "2", "--out", str(root / "b")]) == EXIT_OK
    _, rows = read_csv(root / "a" / "sweep.csv")
    assert {r["value"] for r in rows} == {"1.0", "2.0"}
    g = {r["value"]: float(r["gamma"]) for r in rows}
    assert g["2.0"] == pytest.approx(2 * g["1.0"], rel=1e-15)
    for name in ("sweep.csv", "sweep_summary.csv"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


@pytest.mark.parametrize("args", [["--axis", "gamma_multiplier", "--values"],
                                  ["--axis", "learning_rate", "--values", "1"],
                                  ["--axis", "q", "--values", "1.5"]])
def test_bad_sweeps_are_config_errors(root, args):
    assert main(["sweep", write_config(root, SMALL)] + args) == EXIT_CONFIG


def test_q_sweep_changes_sketch(root):
    cfg = write_config(root, SMALL.replace("{kind: randk, k: 1}", "{kind: randk, q: 0.5}")
                       .replace("mast: exact", "mast: none"))
    assert main(["sweep", cfg, "--axis", "q", "--values", "0.25", "1.0"]) == EXIT_OK
    _, rows = read_csv(root / "out" / "small" / "sweep.csv")
    gammas = {r["value"]: float(r["gamma"]) for r in rows}
    # keeping fewer coordinates raises L_S^max and so shrinks the step
    assert gammas["0.25"] < gammas["1.0"]


def test_config_errors_exit_2(root):
    assert main(["run", write_config(root, SMALL + "bogus: 1\n")]) == EXIT_CONFIG
    assert main(["run", write_config(root, "dataset: [\n")]) == EXIT_CONFIG
    assert main(["run", write_config(root, SMALL.replace("mast: exact", "mast: exact, support_limit: 10")
                                     .replace("k: 1", "q: 0.5"))]) == EXIT_CONFIG


def test_io_errors_exit_3(root):
    missing = SMALL.replace("{fixture: mixed}", f"{{path: {root / 'nope.libsvm'}}}")
    assert main(["run", write_config(root, missing)]) == EXIT_IO
    assert main(["run", str(root / "absent.yaml")]) == EXIT_IO
    bad_model = SMALL + f"robustness: {{n_sketches: 3, model_path: {root / 'none.txt'}}}\n"
    assert main(["robustness", write_config(root, bad_model)]) == EXIT_IO


def test_robustness_with_identity_sketch_reproduces_unsketched_accuracy(root):
    cfg = write_config(root, SMALL.replace("{kind: randk, k: 1}", "{kind: identity}").replace("mast: exact", "mast: none"))
    assert main(["robustness", cfg, "--n", "1"]) == EXIT_OK
    out = root / "out" / "small"
    _, rows = read_csv(out / "robustness.csv")
    _, summary = read_csv(out / "robustness_summary.csv")
    assert len(rows) == 1
    by_model = {s["model"]: s for s in summary}
    assert float(rows[0]["mast"]) == float(by_model["mast"]["unsketched"])
    assert float(rows[0]["erm"]) == float(by_model["erm"]["unsketched"])


def test_robustness_is_byte_identical(root):
    cfg = write_config(root, SMALL.replace("k: 1", "q: 0.5").replace("mast: exact", "mast: none"))
    main(["robustness", cfg, "--n", "50", "--out", str(root / "a")])
    main(["robustness", cfg, "--n", "50", "--out", str(root / "b")])
    for name in ("robustness.csv", "robustness_summary.csv", "mast_model.txt"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_robustness_loads_a_saved_model(root):
    cfg = SMALL.replace("k: 1", "q: 0.5").replace("mast: exact", "mast: none")
    model = root / "model.txt"
    np.savetxt(model, np.zeros(100))
    path = write_config(root, cfg + f"robustness: {{n_sketches: 5, model_path: {model}}}\n")
    assert main(["robustness", path]) == EXIT_OK
    _, rows = read_csv(root / "out" / "small" / "robustness.csv")
    # the zero model has zero margin everywhere, which counts as an error
    assert all(float(r["mast"]) == 0.0 for r in rows)
    np.savetxt(model, np.zeros(7))
    assert main(["robustness", path]) == EXIT_CONFIG


def test_verify_lemmas_pass(root, capsys):
    assert main(["verify", "--filter", "lemma"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert all(line.startswith("PASS") for line in lines[:-1])
    _, rows = read_csv(root / "out" / "verify" / "report.csv")
    assert [r["check"] for r in rows] == checks.registered_ids("lemma")


def test_verify_injected_fault_is_caught(root, capsys):
    assert main(["verify", "--filter", "lemma1", "--inject-fault"]) == EXIT_CHECK
    out = capsys.readouterr().out
    assert "FAIL lemma1.ii" in out


def test_verify_unknown_filter(root):
    assert main(["verify", "--filter", "nothing-here"]) == EXIT_CONFIG


def test_set_overrides_fields(root):
    cfg = write_config(root, SMALL.replace("k: 1", "q: 0.5").replace("mast: exact", "mast: none"))
    assert main(["run", cfg, "--set", "solver.iterations=0", "--set", "seeds=[4]"]) == EXIT_OK
    _, rows = read_csv(root / "out" / "small" / "runs.csv")
    assert [(r["seed"], r["t"]) for r in rows] == [("4", "0")]
    assert main(["robustness", cfg, "--n", "3", "--set", "sketch.q=0.7"]) == EXIT_OK
    for bad in ("solver.iterations", "nosuch.field=1", "solver.iterations=-3", "solver.speed=2"):
        assert main(["run", cfg, "--set", bad]) == EXIT_CONFIG
