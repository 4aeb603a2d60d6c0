import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from shapprop.cli import main
from shapprop.graph import chain, linear_node, save_model
from shapprop.reports import read_table, write_table

from factories import random_mlp


@pytest.fixture
def linear_files(tmp_path):
    g = chain(3, linear_node("l", [[1.5, -2.0, 0.25]], [0.5]))
    (tmp_path / "model.json").write_bytes(save_model(g))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 3))
    write_table(tmp_path / "data.csv", ["a", "b", "c", "y"], np.column_stack([X, g(X)]).tolist())
    write_table(tmp_path / "bg.csv", ["a", "b", "c"], rng.normal(size=(2, 3)).tolist())
    return tmp_path


@pytest.fixture
def mlp_files(tmp_path):
    g = random_mlp(np.random.default_rng(4), 5, max_layers=2)
    (tmp_path / "mlp.json").write_bytes(save_model(g))
    write_table(tmp_path / "mlp.csv", [f"f{i}" for i in range(5)],
                np.random.default_rng(5).normal(size=(3, 5)).tolist())
    return tmp_path


def explain(d, method, out, *extra, model="model.json", data="data.csv", background="bg.csv"):
    args = ["explain", "--model", str(d / model), "--data", str(d / data), "--method", method,
            "--out", str(d / out)]
    if background is not None:
        args += ["--background", background if background.startswith("kmeans") else str(d / background)]
    return main(args + list(extra))


def test_exact_and_rescale_agree_on_linear_model(linear_files):
    d = linear_files
    assert explain(d, "exact", "exact.csv") == 0
    assert explain(d, "rescale", "rescale.csv") == 0
    h1, a = read_table(d / "exact.csv")
    h2, b = read_table(d / "rescale.csv")
    assert h1 == h2 == ["a", "b", "c"]
    np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("method", ["kernel", "ime"])
def test_sampler_output_is_seed_deterministic(mlp_files, method):
    d = mlp_files
    kw = dict(model="mlp.json", data="mlp.csv", background="kmeans:2")
    assert explain(d, method, "a.csv", "--seed", "3", "--n-samples", "40", **kw) == 0
    assert explain(d, method, "b.csv", "--seed", "3", "--n-samples", "40", **kw) == 0
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()


def test_threads_do_not_change_output(mlp_files):
    d = mlp_files
    kw = dict(model="mlp.json", data="mlp.csv", background="kmeans:3")
    assert explain(d, "revealcancel", "one.csv", "--threads", "1", **kw) == 0
    assert explain(d, "revealcancel", "four.csv", "--threads", "4", **kw) == 0
    assert (d / "one.csv").read_bytes() == (d / "four.csv").read_bytes()


def test_missing_background_is_usage_error(linear_files, capsys):
    assert explain(linear_files, "rescale", "x.csv", background=None) == 2
    assert "usage:" in capsys.readouterr().err


def test_bad_method_and_missing_file(linear_files):
    assert explain(linear_files, "magic", "x.csv") == 2
    assert explain(linear_files, "rescale", "x.csv", data="nope.csv") == 2


def test_feature_count_mismatch_names_file(linear_files, capsys):
    write_table(linear_files / "wide.csv", ["a", "b", "c", "d"], [[1, 2, 3, 4]])
    assert explain(linear_files, "rescale", "x.csv", data="wide.csv") == 3
    assert "wide.csv" in capsys.readouterr().err


def test_malformed_model_is_invalid_input(linear_files):
    (linear_files / "model.json").write_text("{broken")
    assert explain(linear_files, "rescale", "x.csv") == 1


def test_manifest_cites_inputs(linear_files):
    d = linear_files
    explain(d, "rescale", "phi.csv")
    man = json.loads((d / "phi.csv.manifest.json").read_text())
    assert man["command"] == "explain"
    assert {"model.json", "data.csv", "bg.csv"} <= {p.rsplit("/", 1)[-1] for p in man["inputs"]}


def test_gen_defaults_and_round_trip_into_explain(tmp_path):
    out = tmp_path / "cg.csv"
    assert main(["gen", "--out", str(out)]) == 0
    header, data = read_table(out)
    assert data.shape == (1000, 61) and header[-1] == "y"
    g = chain(60, linear_node("l", [np.arange(60) % 3 == 0]))
    (tmp_path / "m.json").write_bytes(save_model(g))
    assert main(["explain", "--model", str(tmp_path / "m.json"), "--data", str(out),
                 "--background", "kmeans:5", "--method", "rescale", "--out",
                 str(tmp_path / "phi.csv")]) == 0
    assert read_table(tmp_path / "phi.csv")[1].shape == (1000, 60)


def test_toy_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["toy", "--seed", "7", "--n", "20", "--out", str(tmp_path / f"{name}.csv")]) == 0
    # manifests name their own output path, so only the data files are compared
    for suffix in (".csv", ".csv.json"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()
    header, data = read_table(tmp_path / "a.csv")
    assert data.shape == (20, 8)
    report = json.loads((tmp_path / "a.csv.json").read_text())
    assert set(report["mean_abs_error"]) == {"rescale", "revealcancel", "revealcancel-mean"}


def test_ablate_pipeline_and_row_mismatch(tmp_path):
    d = tmp_path
    assert main(["gen", "--n", "200", "--d", "9", "--seed", "1", "--out", str(d / "train.csv")]) == 0
    assert main(["gen", "--n", "40", "--d", "9", "--seed", "2", "--out", str(d / "test.csv")]) == 0
    assert main(["fit-stack", "--data", str(d / "train.csv"), "--hidden", "3", "--trees", "10",
                 "--out", str(d / "stack.json")]) == 0
    assert main(["explain", "--model", str(d / "stack.json"), "--data", str(d / "test.csv"),
                 "--background", "kmeans:5", "--method", "rescale", "--out", str(d / "phi.csv")]) == 0
    base = ["ablate", "--model", str(d / "stack.json"), "--data", str(d / "test.csv"),
            "--train-data", str(d / "train.csv")]
    assert main(base + ["--attributions", str(d / "phi.csv"), "--out", str(d / "curve.csv")]) == 0
    header, curve = read_table(d / "curve.csv")
    assert header == ["features_kept", "r_squared"] and curve[:, 0].tolist() == list(range(10))
    report = json.loads((d / "curve.csv.json").read_text())
    assert report["schema"] == "shapprop.ablation/1" and len(report["train_means"]) == 9

    _, phi = read_table(d / "phi.csv")
    write_table(d / "short.csv", [f"x{i}" for i in range(9)], phi[:-1].tolist())
    assert main(base + ["--attributions", str(d / "short.csv"), "--out", str(d / "bad.csv")]) == 3


def test_threads_env_fallback(mlp_files, monkeypatch):
    monkeypatch.setenv("SHAPPROP_THREADS", "two")
    assert explain(mlp_files, "rescale", "x.csv", model="mlp.json", data="mlp.csv",
                   background="kmeans:2") == 2


@pytest.mark.skipif(shutil.which("shapprop") is None, reason="console script not installed")
def test_console_script(tmp_path):
    r = subprocess.run(["shapprop", "toy", "--n", "3", "--out", str(tmp_path / "t.csv")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "shapprop.cli", "explain"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage:" in r.stderr
