import csv
import importlib
import json
import subprocess
import sys

import numpy as np
import pytest

from logos_gpo.cli import main
from logos_gpo.data import read_dataset
from logos_gpo.evaluation import read_metrics
from logos_gpo.exceptions import TrainingAborted
from logos_gpo.serialization import load_checkpoint
from logos_gpo.train import TrainHistory

cli_mod = importlib.import_module("logos_gpo.cli")

TINY = dict(width=4, layers=2, levels=2, proj_width=8, latent_dim=4, batch_size=4)


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "tiny.json").write_text(json.dumps(TINY))
    assert main(["generate", "advection", "--out", str(tmp_path / "adv.bin"), "--grid", "64", "--n", "12",
                 "--seed", "1"]) == 0
    return tmp_path


def train_args(w, out="m.ckpt", *extra):
    return ["train", "--data", str(w / "adv.bin"), "--out", str(w / out), "--config", str(w / "tiny.json"),
            "--epochs", "2", "--n-train", "8", "--inducing", "4", "--neighbors", "4", *extra]


def test_generate_writes_a_dataset(workdir):
    data = read_dataset(workdir / "adv.bin")
    assert len(data) == 12 and data.grid.size == 64 and data.problem == "advection" and data.seed == 1


def test_generate_with_parameter_file(tmp_path, capsys):
    (tmp_path / "p.json").write_text(json.dumps({"nu": 0.05, "n_steps": 200}))
    assert main(["generate", "burgers", "--out", str(tmp_path / "b.bin"), "--grid", "32", "--n", "2",
                 "--config", str(tmp_path / "p.json")]) == 0
    assert json.loads(capsys.readouterr().out)["params"]["nu"] == 0.05


def test_full_round_trip(workdir, capsys):
    w = workdir
    assert main(train_args(w)) == 0
    model, header = load_checkpoint(w / "m.ckpt")
    assert header["train_config"]["epochs"] == 2 and model.state.num_inducing == 4
    assert model.state.neighbor_count == 4
    assert len(TrainHistory.from_csv(w / "m.ckpt.history.csv")) == 2

    assert main(["predict", "--checkpoint", str(w / "m.ckpt"), "--data", str(w / "adv.bin"),
                 "--out", str(w / "pred.csv")]) == 0
    with open(w / "pred.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12 * 64
    assert all(float(r["variance"]) > 0 for r in rows)

    assert main(["evaluate", "--checkpoint", str(w / "m.ckpt"), "--data", str(w / "adv.bin"),
                 "--out", str(w / "metrics.csv"), "--n-train", "8"]) == 0
    rec = read_metrics(w / "metrics.csv")[0]
    assert rec.n_train == 8 and rec.grid_size == 64 and 0 <= rec.coverage_95 <= 1
    assert "rel_l2" in capsys.readouterr().out


def test_flags_override_config_file(workdir):
    w = workdir
    assert main(train_args(w, "m.ckpt", "--seed", "9")) == 0
    cfg = load_checkpoint(w / "m.ckpt")[1]["train_config"]
    assert cfg["seed"] == 9 and cfg["width"] == 4 and cfg["epochs"] == 2
    # problem defaults fill whatever neither source sets
    assert cfg["learning_rate"] == 2e-2


def test_train_is_byte_reproducible(workdir):
    w = workdir
    assert main(train_args(w, "a.ckpt")) == 0
    assert main(train_args(w, "b.ckpt")) == 0
    assert (w / "a.ckpt").read_bytes() == (w / "b.ckpt").read_bytes()
    assert (w / "a.ckpt.history.csv").read_bytes() == (w / "b.ckpt.history.csv").read_bytes()


def test_oversized_batch_is_reduced(workdir, caplog):
    w = workdir
    (w / "big.json").write_text(json.dumps({**TINY, "batch_size": 64}))
    args = train_args(w)
    args[args.index("--config") + 1] = str(w / "big.json")
    assert main(args) == 0
    assert "full batches" in caplog.text


def test_unknown_problem_is_a_usage_error(tmp_path, capsys):
    assert main(["generate", "heat", "--out", str(tmp_path / "x")]) == 2
    assert "unknown problem" in capsys.readouterr().err


def test_bad_grid_is_a_usage_error(tmp_path):
    assert main(["generate", "advection", "--out", str(tmp_path / "x"), "--grid", "100"]) == 2


def test_bad_flag_exits_with_usage_code():
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus"])
    assert info.value.code == 2


def test_missing_dataset_is_a_usage_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.bin"), "--out", str(tmp_path / "m")]) == 2


def test_bad_config_value_is_a_usage_error(workdir):
    w = workdir
    (w / "bad.json").write_text(json.dumps({"epochs": 0}))
    args = train_args(w)
    args[args.index("--config") + 1] = str(w / "bad.json")
    args.remove("--epochs")
    args.remove("2")
    assert main(args) == 2


def test_n_train_out_of_range(workdir):
    args = train_args(workdir)
    args[args.index("--n-train") + 1] = "50"
    assert main(args) == 2


def test_grid_mismatch_exits_4(workdir):
    w = workdir
    assert main(train_args(w)) == 0
    assert main(["generate", "advection", "--out", str(w / "other.bin"), "--grid", "32", "--n", "2"]) == 0
    for cmd in ("predict", "evaluate"):
        assert main([cmd, "--checkpoint", str(w / "m.ckpt"), "--data", str(w / "other.bin"),
                     "--out", str(w / "o.csv")]) == 4


def test_corrupt_checkpoint_is_a_usage_error(workdir):
    w = workdir
    (w / "junk.ckpt").write_bytes(b"garbage!" * 4)
    assert main(["predict", "--checkpoint", str(w / "junk.ckpt"), "--data", str(w / "adv.bin"),
                 "--out", str(w / "o.csv")]) == 2


def test_training_abort_exits_3_and_keeps_last_good(workdir, monkeypatch):
    w = workdir
    real_train = cli_mod.train

    def aborting(grid, a, y, config, **kw):
        good = real_train(grid, a, y, config).model
        raise TrainingAborted("objective is not finite", good)

    monkeypatch.setattr(cli_mod, "train", aborting)
    assert main(train_args(w)) == 3
    assert (w / "m.ckpt").exists()
    load_checkpoint(w / "m.ckpt")


def test_thread_cap_validation(workdir, monkeypatch):
    monkeypatch.setenv("LOGOS_THREADS", "zero")
    assert main(train_args(workdir)) == 2
    monkeypatch.setenv("LOGOS_THREADS", "0")
    assert main(train_args(workdir)) == 2
    monkeypatch.setenv("LOGOS_THREADS", "1")
    assert main(train_args(workdir)) == 0


def test_bench_writes_one_row_per_cell(tmp_path):
    (tmp_path / "tiny.json").write_text(json.dumps({**TINY, "epochs": 1, "inducing": 4, "neighbors": 4}))
    out = tmp_path / "bench.csv"
    assert main(["bench", "advection", "--out", str(out), "--grid", "32,64", "--n-train", "4,8",
                 "--n-test", "2", "--config", str(tmp_path / "tiny.json")]) == 0
    rows = read_metrics(out)
    assert [(r.grid_size, r.n_train) for r in rows] == [(32, 4), (32, 8), (64, 4), (64, 8)]
    assert all(r.status == "ok" and r.epoch_wall_seconds_mean > 0 for r in rows)


def test_bench_rejects_bad_list(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["bench", "advection", "--out", str(tmp_path / "b.csv"), "--grid", "a,b"])
    assert info.value.code == 2


def test_module_entry_point(workdir):
    proc = subprocess.run([sys.executable, "-m", "logos_gpo", "generate", "nope", "--out",
                           str(workdir / "x")], capture_output=True, text=True)
    assert proc.returncode == 2 and "unknown problem" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "logos_gpo", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert all(cmd in proc.stdout for cmd in ("generate", "train", "predict", "evaluate", "bench"))


def test_predictions_match_the_library(workdir):
    w = workdir
    assert main(train_args(w)) == 0
    assert main(["predict", "--checkpoint", str(w / "m.ckpt"), "--data", str(w / "adv.bin"),
                 "--out", str(w / "pred.csv")]) == 0
    with open(w / "pred.csv") as fh:
        rows = list(csv.DictReader(fh))
    mean = np.array([float(r["mean"]) for r in rows]).reshape(12, 64)
    model, _ = load_checkpoint(w / "m.ckpt")
    np.testing.assert_array_equal(mean, model.predict(read_dataset(w / "adv.bin").flat()[0]).mean)
