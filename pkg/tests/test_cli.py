import csv

import numpy as np
import pytest

from restt import cli, data
from restt.model import Topology, init_params, save_checkpoint

from helpers import three_input_topology


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def manifest_extras(path):
    out = {}
    for line in path.read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            out[k] = v
    return out


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("gen-synth", "--d", 2, "--n-train", 300, "--n-test", 100, "--seed", 4, "--out-dir", out) == 0
    return out


# -- gen-synth -----------------------------------------------------------------------


def test_gen_synth_row_counts(tmp_path):
    assert run("gen-synth", "--d", 10, "--n-train", 10000, "--n-test", 10000, "--out-dir", tmp_path) == 0
    for name in ("train.csv", "test.csv"):
        lines = (tmp_path / name).read_text().splitlines()
        assert len(lines) == 10001
        assert len(lines[0].split(",")) == 31  # three nodes of width 10 plus the target
    assert data.read_sidecar(tmp_path / "synth_meta.txt")["d"] == "10"


def test_gen_synth_parses_back_and_repeats(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("gen-synth", "--d", 1, "--n-train", 20, "--n-test", 5, "--seed", 3, "--out-dir", out) == 0
    for name in ("train.csv", "test.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    tr, _, w = data.synth_generate(data.SynthSpec(d=1, n_train=20, n_test=5, seed=3))
    back = data.load_csv(a / "train.csv", "y")
    np.testing.assert_array_equal(back.x, tr.x.reshape(20, -1))
    np.testing.assert_array_equal(back.y, tr.y)
    np.testing.assert_array_equal(np.load(a / "weights.npz")["w3"], w.w3)


# -- train ---------------------------------------------------------------------------


def test_tt_auto_sigma_on_trig_inputs_is_one(tmp_path, synth_dir):
    out = tmp_path / "run"
    assert run("train", "--dataset", "csv", "--train-csv", synth_dir / "train.csv", "--model", "tt", "--r", 3,
               "--epochs", 1, "--quiet", "true", "--out-dir", out) == 0
    extras = manifest_extras(out / "manifest.txt")
    assert float(extras["sigma_w2"]) == 1.0
    assert extras["verdict"] == "stable"
    for name in ("runlog.csv", "checkpoint.npz", "metrics.csv"):
        assert (out / name).exists()


def test_tt_auto_sigma_on_mnist_is_one(tmp_path, mnist_dir, monkeypatch):
    monkeypatch.setenv(cli.DATA_DIR_ENV, str(mnist_dir.parent))
    out = tmp_path / "run"
    assert run("train", "--dataset", "mnist", "--fraction", 0.002, "--model", "tt", "--r", 2, "--epochs", 1,
               "--quiet", "true", "--out-dir", out) == 0
    assert float(manifest_extras(out / "manifest.txt")["sigma_w2"]) == 1.0


def test_fc_underfits_relative_to_restt(tmp_path):
    rmse = {}
    for model in ("fc", "restt"):
        out = tmp_path / model
        assert run("train", "--dataset", "synth", "--d", 3, "--n-train", 2000, "--n-test", 500, "--model", model,
                   "--r", 8, "--epochs", 40, "--quiet", "true", "--eval-every", 40, "--out-dir", out) == 0
        rmse[model] = float(read_rows(out / "runlog.csv")[-1]["eval_metric"])
    assert rmse["restt"] < rmse["fc"]


def test_manifest_rerun_reproduces_runlog(tmp_path, synth_dir):
    first, second = tmp_path / "first", tmp_path / "second"
    assert run("train", "--dataset", "csv", "--train-csv", synth_dir / "train.csv", "--test-csv",
               synth_dir / "test.csv", "--model", "restt", "--r", 3, "--epochs", 3, "--batch-size", 64,
               "--seed", 2, "--quiet", "true", "--out-dir", first) == 0
    assert run("train", "--config", first / "manifest.txt", "--out-dir", second) == 0
    strip = lambda rows: [(r["epoch"], r["train_loss"], r["eval_metric"]) for r in rows]
    assert strip(read_rows(first / "runlog.csv")) == strip(read_rows(second / "runlog.csv"))


def test_flags_override_config(tmp_path, synth_dir):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(f"# toy\ncommand=train\ndataset=csv\ntrain_csv={synth_dir / 'train.csv'}\nepochs=5\nr=2\n"
                   "quiet=true\n")
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--epochs", 2, "--out-dir", out) == 0
    assert len(read_rows(out / "runlog.csv")) == 2
    assert "r=2" in (out / "manifest.txt").read_text().splitlines()


def test_config_errors_exit_2(tmp_path, synth_dir):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("command=train\nbogus_key=1\n")
    assert run("train", "--config", cfg) == 2
    cfg.write_text("command=gen-synth\n")
    assert run("train", "--config", cfg) == 2
    assert run("train", "--config", tmp_path / "missing.txt") == 2
    assert run("train", "--model", "nope") == 2
    assert run("expand") == 2


def test_missing_dataset_exits_3(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.DATA_DIR_ENV, str(tmp_path / "empty"))
    assert run("train", "--dataset", "fashion-mnist", "--out-dir", tmp_path / "run") == 3


def test_divergence_exits_4(tmp_path, rng):
    n = 200
    x = rng.standard_normal((64, n)) * 100.0  # typical per-layer gain of thousands overflows float64
    path = tmp_path / "wide.csv"
    data.write_csv(data.Dataset(x, rng.standard_normal(64)), path)
    assert run("train", "--dataset", "csv", "--train-csv", path, "--embedding", "none", "--model", "tt",
               "--sigma-w2", 1.0, "--r", 3, "--epochs", 1, "--quiet", "true", "--out-dir", tmp_path / "run") == 4


def test_unwritable_output_exits_5(tmp_path, synth_dir):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("gen-synth", "--d", 1, "--n-train", 2, "--n-test", 2, "--out-dir", blocker / "sub") == 5


# -- probe-meanfield -----------------------------------------------------------------


@pytest.mark.parametrize("model,sigma,verdict", [("tt", 1.0, "stable"), ("tt", 4.0, "exploding"),
                                                 ("restt", 0.01, "stable")])
def test_probe_meanfield_verdicts(tmp_path, capsys, model, sigma, verdict):
    out = tmp_path / "mf.csv"
    assert run("probe-meanfield", "--model", model, "--N", 10, "--r", 4, "--sigma-w2", sigma, "--trials", 2000,
               "--out", out) == 0
    assert f"verdict={verdict}" in capsys.readouterr().out
    rows = read_rows(out)
    assert len(rows) == 10
    if model == "restt":
        ratios = [float(r["ratio_meas"]) for r in rows[1:-1]]
        np.testing.assert_allclose(ratios, 1.01, rtol=0.02)


# -- expand --------------------------------------------------------------------------


def family_count(text):
    return int(text.splitlines()[0].split("families=")[1])


def test_expand_three_input_checkpoint(tmp_path, capsys):
    top = three_input_topology()
    save_checkpoint(tmp_path / "c.npz", init_params(top, 0.5, 0), top)
    assert run("expand", "--checkpoint", tmp_path / "c.npz") == 0
    assert family_count(capsys.readouterr().out) == 7
    assert run("expand", "--checkpoint", tmp_path / "c.npz", "--out", tmp_path / "e.txt") == 0
    assert family_count((tmp_path / "e.txt").read_text()) == 7


def test_expand_plain_tt_has_one_family(tmp_path, capsys):
    top = Topology.plain_tt((2, 2, 2), 2, 1)
    save_checkpoint(tmp_path / "c.npz", init_params(top, 1.0, 0), top)
    assert run("expand", "--checkpoint", tmp_path / "c.npz") == 0
    assert family_count(capsys.readouterr().out) == 1


def test_expand_oversize_is_clean_error(tmp_path, capsys):
    top = Topology.restt((2,) * 10, 2, 1)
    save_checkpoint(tmp_path / "c.npz", init_params(top, 0.1, 0), top)
    assert run("expand", "--checkpoint", tmp_path / "c.npz") == 2
    assert "smaller model" in capsys.readouterr().err


# -- eval ----------------------------------------------------------------------------


def test_eval_regression_emits_rmse_and_r2(tmp_path, synth_dir, capsys):
    out = tmp_path / "run"
    assert run("train", "--dataset", "csv", "--train-csv", synth_dir / "train.csv", "--r", 3, "--epochs", 2,
               "--quiet", "true", "--out-dir", out) == 0
    capsys.readouterr()
    assert run("eval", "--checkpoint", out / "checkpoint.npz", "--out", tmp_path / "m.csv") == 0
    printed = capsys.readouterr().out
    assert "rmse=" in printed and "r2=" in printed
    metrics = {r["metric"]: float(r["value"]) for r in read_rows(tmp_path / "m.csv")}
    assert set(metrics) == {"rmse", "r2"} and all(np.isfinite(v) for v in metrics.values())
    saved = {r["metric"]: float(r["value"]) for r in read_rows(out / "metrics.csv")}
    assert metrics == saved
    assert run("eval", "--checkpoint", out / "checkpoint.npz", "--split", "train") == 0


def test_eval_mismatched_dims_exits_3(tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", "--dataset", "synth", "--d", 2, "--n-train", 50, "--n-test", 20, "--r", 2, "--epochs", 1,
               "--quiet", "true", "--out-dir", out) == 0
    assert run("eval", "--checkpoint", out / "checkpoint.npz", "--d", 3) == 3
    assert "input_dims" in capsys.readouterr().err


def test_threads_flag(tmp_path):
    assert run("gen-synth", "--d", 1, "--n-train", 2, "--n-test", 2, "--threads", 1, "--out-dir", tmp_path) == 0
