import json

import numpy as np
import pytest

from groupface.cli import main, split_sections
from groupface.data import load_dataset, read_matrix

DATA_CFG = """
num_identities = 30
num_eval_identities = 6
samples_per_identity = 8
input_dim = 8
num_latent_groups = 4
"""

TRAIN_CFG = """
# tiny model for fast runs
shared_dim = 16
embed_dim = 8
K = 4
gdn_hidden_dim = 8
backbone_layers = 16
phase1_steps = 10
phase2_steps = 10
batch_size = 24
lambda = 0.1
lr_schedule = 0:0.005, 15:0.0005
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "data.cfg").write_text(DATA_CFG)
    (tmp_path / "train.cfg").write_text(TRAIN_CFG)
    assert main(["--seed", "3", "gen-data", "--config", str(tmp_path / "data.cfg"), "--out", str(tmp_path / "data")]) == 0
    return tmp_path


def _train(ws, out="run"):
    return main(["--seed", "0", "--threads", "1", "train", "--config", str(ws / "train.cfg"),
                 "--data", str(ws / "data"), "--out", str(ws / out)])


def test_gen_data_writes_dataset(workspace):
    data = load_dataset(workspace / "data")
    assert len(data) == 240 and data.input_dim == 8
    side = json.loads((workspace / "data" / "dataset.json").read_text())
    assert side["generator"]["seed"] == 3


def test_train_outputs(workspace):
    assert _train(workspace) == 0
    run = workspace / "run"
    for name in ("config.json", "model.ckpt", "loss_curve.csv", "label_trace.csv", "report.json"):
        assert (run / name).exists(), name
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["model"]["num_groups"] == 4 and cfg["loss"]["lam"] == 0.1
    assert cfg["train"]["lr_schedule"] == [[0, 0.005], [15, 0.0005]]
    assert len((run / "loss_curve.csv").read_text().splitlines()) == 21


def test_train_twice_identical(workspace):
    assert _train(workspace, "a") == 0 and _train(workspace, "b") == 0
    for name in ("model.ckpt", "loss_curve.csv", "report.json"):
        assert (workspace / "a" / name).read_bytes() == (workspace / "b" / name).read_bytes()


def test_eval_and_export(workspace, capsys):
    assert _train(workspace) == 0
    ckpt = str(workspace / "run" / "model.ckpt")
    rc = main(["eval", "--checkpoint", ckpt, "--data", str(workspace / "data"), "--group-similarity",
               "--beta", "0.2", "--roc", str(workspace / "roc.csv"), "--out", str(workspace / "eval.json")])
    assert rc == 0
    report = json.loads((workspace / "eval.json").read_text())
    assert sum(report["label_histogram"]) == 48
    assert (workspace / "roc.csv").exists()

    assert main(["export", "--checkpoint", ckpt, "--data", str(workspace / "data"), "--out", str(workspace / "emb")]) == 0
    mat = read_matrix(workspace / "emb" / "embeddings.bin")
    assert mat.shape == (240, 8 + 8 + 8 + 4)
    np.testing.assert_allclose(mat[:, -4:].sum(axis=1), 1.0, atol=1e-9)


def test_ablate(workspace):
    suite = workspace / "suite.cfg"
    suite.write_text(
        "configs = baseline, s_groupface\nseeds = 0, 1\ndata = data\n"
        + TRAIN_CFG.replace("lr_schedule = 0:0.005, 15:0.0005\n", "")
    )
    out = workspace / "table.csv"
    assert main(["ablate", "--suite", str(suite), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 4 + 2
    assert lines[-1].startswith("s_groupface,mean,")


def test_unknown_key_is_an_error(workspace, capsys):
    (workspace / "bad.cfg").write_text("wobble = 3\n")
    rc = main(["train", "--config", str(workspace / "bad.cfg"), "--data", str(workspace / "data"),
               "--out", str(workspace / "x")])
    assert rc == 1
    assert "wobble" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["eval", "--checkpoint", "missing.ckpt", "--data", "nowhere", "--out", "r.json"],
        ["export", "--checkpoint", "missing.ckpt", "--data", "nowhere", "--out", "e"],
        ["train", "--data", "nowhere", "--out", "r"],
    ],
)
def test_missing_inputs_fail_cleanly(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_bad_values_rejected(workspace):
    (workspace / "bad.cfg").write_text("batch_size = 1\n")
    assert main(["train", "--config", str(workspace / "bad.cfg"), "--data", str(workspace / "data"),
                 "--out", str(workspace / "x")]) == 1


def test_suite_rejects_single_seed(workspace):
    (workspace / "s.cfg").write_text("seed = 4\n")
    assert main(["ablate", "--suite", str(workspace / "s.cfg"), "--out", str(workspace / "t.csv")]) == 1


def test_threads_must_be_positive(workspace):
    assert main(["--threads", "0", "gen-data", "--out", str(workspace / "d2")]) == 2


def test_split_sections_routes_aliases():
    model, loss, train = split_sections({"K": "4", "lambda": "0.5", "B": "32", "margin_mode": "cosface"})
    assert model == {"num_groups": "4"}
    assert loss == {"lam": "0.5", "margin_mode": "cosface"}
    assert train == {"window": "32"}
