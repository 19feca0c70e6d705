"""End-to-end command tests driven through the in-process entrypoint."""
import hashlib
import json

import numpy as np
import pytest

from rlhmm.cli import entrypoint


def write_json(path, doc):
    path.write_text(json.dumps(doc) + "\n")
    return path


def sim_config_doc(**over):
    doc = {"version": 1, "kind": "case1", "n": 4, "T": 12, "seed": 7}
    doc.update(over)
    return doc


def fit_config_doc(**over):
    doc = {"version": 1,
           "penalty": {"r": 0, "lambda0": "inf", "lambda1": "inf"},
           "max_em_iters": 300,
           "em_tolerance": 1e-5,
           "rl_step_iters": 2,
           "init": {"n_starts": 1},
           "seed": 3}
    doc.update(over)
    return doc


def run_simulate(out_dir, cfg_doc, extra=()):
    cfg = write_json(out_dir.parent / f"{out_dir.name}_scn.json", cfg_doc)
    return entrypoint(["simulate", "--config", str(cfg),
                       "--out", str(out_dir), *extra])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "sim"
    assert run_simulate(out, sim_config_doc()) == 0
    return out


@pytest.fixture(scope="module")
def fit_dir(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_fit")
    cfg = write_json(out / "fit.json.in", fit_config_doc())
    code = entrypoint(["fit", "--data", str(sim_dir / "dataset.csv"),
                       "--basis", str(sim_dir / "basis.json"),
                       "--config", str(cfg), "--out", str(out / "fit")])
    assert code == 0
    return out / "fit"


def tree_hashes(out_dir, skip=("manifest.json",)):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out_dir.iterdir()) if p.name not in skip}


def test_simulate_artifacts_and_manifest(sim_dir):
    names = sorted(p.name for p in sim_dir.iterdir())
    assert names == ["basis.json", "dataset.csv", "hidden_strategies.csv",
                     "manifest.json", "schema.json", "truth.json"]
    rows = (sim_dir / "dataset.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 4 * 12
    man = json.loads((sim_dir / "manifest.json").read_text())
    assert man["command"] == "simulate"
    assert man["seed"] == 7
    assert set(man["inputs"]) == {"config"}
    assert len(man["inputs"]["config"]["sha256"]) == 64
    assert man["outputs"]["dataset"] == "dataset.csv"
    assert man["seconds"] >= 0.0


def test_simulate_seed_flows_and_repeats(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert run_simulate(a, sim_config_doc()) == 0
    assert run_simulate(b, sim_config_doc()) == 0
    assert tree_hashes(a) == tree_hashes(b)
    # --seed overrides the config seed and changes the draw
    assert run_simulate(c, sim_config_doc(), extra=["--seed", "8"]) == 0
    assert json.loads((c / "manifest.json").read_text())["seed"] == 8
    hc = tree_hashes(c)
    ha = tree_hashes(a)
    assert hc["dataset.csv"] != ha["dataset.csv"]
    assert hc["schema.json"] == ha["schema.json"]


def test_simulate_config_errors(tmp_path, capsys):
    # PRT horizon must be a whole number of blocks
    bad = {"version": 1, "kind": "prt", "n": 2, "T": 90, "seed": 0}
    assert run_simulate(tmp_path / "p", bad) == 2
    assert "error:" in capsys.readouterr().err
    # wrong config version
    assert run_simulate(tmp_path / "v", sim_config_doc(version=2)) == 2
    # unknown key for the scenario kind
    assert run_simulate(tmp_path / "k", sim_config_doc(pi2=0.5)) == 2
    # missing file
    assert entrypoint(["simulate", "--config",
                       str(tmp_path / "nope.json"),
                       "--out", str(tmp_path / "m")]) == 2


def test_fit_artifacts(fit_dir):
    names = sorted(p.name for p in fit_dir.iterdir())
    assert names == ["engagement.json", "engagement_group.csv",
                     "engagement_individual.csv", "engagement_scores.csv",
                     "fit.json", "loglik.csv", "manifest.json",
                     "posteriors.csv"]
    doc = json.loads((fit_dir / "fit.json").read_text())
    assert doc["model"] == "switching"
    assert doc["converged"] is True
    # saturating penalty forces constant transition curves
    z0 = doc["params"]["zeta0"]
    z1 = doc["params"]["zeta1"]
    assert max(z0) - min(z0) < 1e-8
    assert max(z1) - min(z1) < 1e-8
    # accepted sweeps never decrease the penalized objective
    trace = doc["objective_trace"]["observed"]
    assert all(b >= a - 1e-8 for a, b in zip(trace, trace[1:]))
    man = json.loads((fit_dir / "manifest.json").read_text())
    assert set(man["inputs"]) == {"data", "schema", "basis", "config"}
    post = (fit_dir / "posteriors.csv").read_text().strip().splitlines()
    assert len(post) == 1 + 4 * 12


def test_fit_nonconvergence_exit_code(sim_dir, tmp_path):
    cfg = write_json(tmp_path / "cfg.json",
                     fit_config_doc(max_em_iters=1, em_tolerance=1e-12))
    code = entrypoint(["fit", "--data", str(sim_dir / "dataset.csv"),
                       "--basis", str(sim_dir / "basis.json"),
                       "--config", str(cfg), "--out", str(tmp_path / "f")])
    assert code == 3


def test_fit_config_errors(sim_dir, tmp_path, capsys):
    def run(doc):
        cfg = write_json(tmp_path / "cfg.json", doc)
        return entrypoint(["fit", "--data", str(sim_dir / "dataset.csv"),
                           "--basis", str(sim_dir / "basis.json"),
                           "--config", str(cfg),
                           "--out", str(tmp_path / "f")])

    assert run(fit_config_doc(bogus=1)) == 2
    assert run(fit_config_doc(model="both")) == 2
    doc = fit_config_doc()
    del doc["penalty"]
    assert run(doc) == 2
    assert "missing config key" in capsys.readouterr().err
    # dataset path that does not exist
    cfg = write_json(tmp_path / "cfg.json", fit_config_doc())
    assert entrypoint(["fit", "--data", str(tmp_path / "none.csv"),
                       "--basis", str(sim_dir / "basis.json"),
                       "--config", str(cfg),
                       "--out", str(tmp_path / "f")]) == 2


def cv_args(sim_dir, cfg, grid, out):
    return ["cv", "--data", str(sim_dir / "dataset.csv"),
            "--basis", str(sim_dir / "basis.json"),
            "--config", str(cfg), "--grid", str(grid),
            "--folds", "2", "--out", str(out)]


@pytest.fixture(scope="module")
def cheap_cv_config():
    return fit_config_doc(max_em_iters=40, em_tolerance=1e-4,
                          rl_step_iters=1)


def test_cv_cross_product_grid(sim_dir, tmp_path, cheap_cv_config):
    cfg = write_json(tmp_path / "cfg.json", cheap_cv_config)
    grid = write_json(tmp_path / "grid.json",
                      {"version": 1, "lambda0": [0, 1.0, "inf"],
                       "lambda1": [0, 1.0, "inf"]})
    assert entrypoint(cv_args(sim_dir, cfg, grid, tmp_path / "cv")) == 0
    scores = (tmp_path / "cv" / "cv_scores.csv").read_text() \
        .strip().splitlines()
    assert scores[0] == "lambda0,lambda1,score"
    assert len(scores) == 1 + 3 * 3
    doc = json.loads((tmp_path / "cv" / "cv.json").read_text())
    assert doc["K"] == 2
    assert len(doc["grid"]) == 9
    man = json.loads((tmp_path / "cv" / "manifest.json").read_text())
    assert "grid" in man["inputs"]


def test_cv_explicit_grid_and_errors(sim_dir, tmp_path, cheap_cv_config,
                                     capsys):
    cfg = write_json(tmp_path / "cfg.json", cheap_cv_config)
    grid = write_json(tmp_path / "grid.json",
                      {"version": 1, "grid": [[1.0, 1.0], ["inf", "inf"]]})
    assert entrypoint(cv_args(sim_dir, cfg, grid, tmp_path / "cv")) == 0
    doc = json.loads((tmp_path / "cv" / "cv.json").read_text())
    assert len(doc["grid"]) == 2

    both = write_json(tmp_path / "both.json",
                      {"version": 1, "grid": [[1.0, 1.0]],
                       "lambda0": [1.0], "lambda1": [1.0]})
    assert entrypoint(cv_args(sim_dir, cfg, both, tmp_path / "cv2")) == 2
    assert "not both" in capsys.readouterr().err

    neither = write_json(tmp_path / "none.json", {"version": 1})
    assert entrypoint(cv_args(sim_dir, cfg, neither, tmp_path / "cv3")) == 2

    shape = write_json(tmp_path / "shape.json",
                       {"version": 1, "grid": [[1.0]]})
    assert entrypoint(cv_args(sim_dir, cfg, shape, tmp_path / "cv4")) == 2


def test_cv_rejects_rl_only_model(sim_dir, tmp_path, cheap_cv_config):
    cfg = write_json(tmp_path / "cfg.json",
                     dict(cheap_cv_config, model="rl_only"))
    grid = write_json(tmp_path / "grid.json",
                      {"version": 1, "grid": [[1.0, 1.0]]})
    assert entrypoint(cv_args(sim_dir, cfg, grid, tmp_path / "cv")) == 2


def test_fit_rl_only_model(sim_dir, tmp_path):
    cfg = write_json(tmp_path / "cfg.json", fit_config_doc(model="rl_only"))
    out = tmp_path / "rl"
    assert entrypoint(["fit", "--data", str(sim_dir / "dataset.csv"),
                       "--basis", str(sim_dir / "basis.json"),
                       "--config", str(cfg), "--out", str(out)]) == 0
    doc = json.loads((out / "fit.json").read_text())
    assert doc["model"] == "rl_only"
    # pinned engaged posteriors make every engagement probability one
    gamma = np.array(json.loads(
        (out / "engagement.json").read_text())["group_rate"])
    assert np.all(gamma > 0.999)


def test_bootstrap_cli(sim_dir, tmp_path):
    cfg = write_json(tmp_path / "cfg.json",
                     fit_config_doc(max_em_iters=60, em_tolerance=1e-4))
    out = tmp_path / "boot"
    code = entrypoint(["bootstrap", "--data", str(sim_dir / "dataset.csv"),
                       "--basis", str(sim_dir / "basis.json"),
                       "--config", str(cfg), "--replicates", "2",
                       "--targets", "3,9", "--out", str(out)])
    assert code == 0
    doc = json.loads((out / "bootstrap.json").read_text())
    assert doc["B"] == 2
    assert doc["targets"] == [3, 9]
    assert "zeta0_t3" in doc["param_names"]
    reps = (out / "bootstrap_replicates.csv").read_text() \
        .strip().splitlines()
    assert len(reps) == 1 + 2 * len(doc["param_names"])


def test_engage_cli_default_quartiles(fit_dir, tmp_path):
    out = tmp_path / "eng"
    assert entrypoint(["engage", "--fit-dir", str(fit_dir),
                       "--out", str(out)]) == 0
    doc = json.loads((out / "engagement.json").read_text())
    assert [len(w) for w in doc["windows"]] == [3, 3, 3, 3]
    assert len(doc["scores"]) == 4  # one row per subject
    # matches the engagement files the fit itself wrote
    assert (out / "engagement_scores.csv").read_text() == \
        (fit_dir / "engagement_scores.csv").read_text()


def test_engage_cli_custom_windows_and_bands(fit_dir, tmp_path):
    out = tmp_path / "eng"
    code = entrypoint(["engage", "--fit-dir", str(fit_dir),
                       "--windows", "1-6,7-12", "--band-replicates", "25",
                       "--seed", "4", "--out", str(out)])
    assert code == 0
    doc = json.loads((out / "engagement.json").read_text())
    assert doc["windows"] == [list(range(1, 7)), list(range(7, 13))]
    assert "band_lower" in doc
    group = (out / "engagement_group.csv").read_text().strip().splitlines()
    assert group[0] == "trial,rate,lower,upper"
    # malformed window text
    assert entrypoint(["engage", "--fit-dir", str(fit_dir),
                       "--windows", "1-x", "--out", str(out)]) == 2


def test_engage_cli_missing_fit_dir(tmp_path):
    assert entrypoint(["engage", "--fit-dir", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "eng")]) == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        entrypoint(["--version"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert out.startswith("rlhmm ")
