import json
import logging

import numpy as np
import pytest
import yaml

from augref import checks, cli, trainer
from augref.gradcheck import GradCheckReport

SMALL = {"image_size": 24, "channels": [4, 4, 8], "P": 2, "Q": 4, "epochs": 2, "warmup_epochs": 1}


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.tns"))}


@pytest.fixture(autouse=True)
def _info_logs(caplog):
    caplog.set_level(logging.INFO, logger="augref")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "data"
    argv = ["gen-data", "--classes", "2", "--train-per-class", "4", "--test-per-class", "3", "--size", "24",
            "--seed", "1", "--out", str(root)]
    assert cli.main(argv) == 0
    return root


def _config(tmp_path, dataset, name="run", **extra):
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump({"data": str(dataset), "out": str(tmp_path / name), **SMALL, **extra}))
    return path


def test_gen_data_default_counts_and_determinism(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "a")]) == 0
    assert "wrote 280 files" in capsys.readouterr().out
    assert len(list((tmp_path / "a").rglob("*.tns"))) == 280
    assert cli.main(["gen-data", "--out", str(tmp_path / "b")]) == 0
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_gen_data_needs_two_classes(tmp_path, caplog):
    assert cli.main(["gen-data", "--classes", "1", "--out", str(tmp_path)]) == 2
    assert "need at least 2 classes" in caplog.text


def test_bad_flags_exit_2(capsys):
    assert cli.main(["train"]) == 2
    assert cli.main(["nonsense"]) == 2


def test_train_smoke(dataset, tmp_path, capsys, caplog):
    cfg = _config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("final_accuracy=")
    assert "epoch 0 " in caplog.text and "epoch 1 " in caplog.text
    run = tmp_path / "run"
    assert (run / "checkpoint" / "manifest.json").exists()
    assert len((run / "metrics.csv").read_text().splitlines()) == 3
    resolved = yaml.safe_load((run / "resolved_config.yaml").read_text())
    assert resolved["epochs"] == 2 and resolved["lambda2"] == 0.8


def test_train_lambda2_zero_logs_zero_adaptive_loss(dataset, tmp_path, caplog):
    cfg = _config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg), "--set", "lambda2=0"]) == 0
    epochs = [r.getMessage() for r in caplog.records if r.getMessage().startswith("epoch")]
    assert len(epochs) == 2
    assert all("l_ada=0.000000" in m for m in epochs)


def test_train_missing_data_names_path(tmp_path, caplog):
    missing = tmp_path / "no_such_dir"
    cfg = _config(tmp_path, missing)
    assert cli.main(["train", "--config", str(cfg)]) == 1
    assert str(missing) in caplog.text


def test_config_errors_exit_2(dataset, tmp_path, caplog):
    cfg = _config(tmp_path, dataset, bogus_key=1)
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "bogus_key" in caplog.text
    cfg = _config(tmp_path, dataset, name="typed", epochs="many")
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert cli.main(["train", "--config", str(_config(tmp_path, dataset)), "--set", "rho"]) == 2


def test_missing_config_exit_1(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope.yaml")]) == 1


def test_nonfinite_loss_exit_3(dataset, tmp_path, caplog):
    cfg = _config(tmp_path, dataset, base_lr=1e300, warmup_epochs=0)
    assert cli.main(["train", "--config", str(cfg)]) == 3
    assert "non-finite loss at epoch" in caplog.text


def test_resolved_config_replays_identically(dataset, tmp_path, capsys):
    cfg = _config(tmp_path, dataset, seed=5)
    assert cli.main(["train", "--config", str(cfg), "--set", "rho=2"]) == 0
    first = capsys.readouterr().out
    resolved = tmp_path / "run" / "resolved_config.yaml"
    replay = yaml.safe_load(resolved.read_text())
    replay["out"] = str(tmp_path / "replay")
    (tmp_path / "replay.yaml").write_text(yaml.safe_dump(replay))
    assert cli.main(["train", "--config", str(tmp_path / "replay.yaml")]) == 0
    assert capsys.readouterr().out == first
    assert (tmp_path / "run" / "metrics.csv").read_bytes() == (tmp_path / "replay" / "metrics.csv").read_bytes()


def test_eval_reproduces_training_accuracy(dataset, tmp_path, capsys):
    cfg = _config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    acc = float(capsys.readouterr().out.strip().split("=")[1])
    ckpt = tmp_path / "run" / "checkpoint"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(dataset)]) == 0
    out = capsys.readouterr().out
    assert f"accuracy={acc:.6f}" in out
    rows = (tmp_path / "run" / "confusion.csv").read_text().splitlines()
    counts = [list(map(int, r.split(",")[1:])) for r in rows[1:]]
    assert [sum(r) for r in counts] == [3, 3]
    assert sum(counts[i][i] for i in range(2)) / 6 == acc


def test_eval_corrupt_manifest_names_parameter(dataset, tmp_path, caplog):
    cfg = _config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    manifest_path = tmp_path / "run" / "checkpoint" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    victim = manifest["params"][3]["name"]
    manifest["params"][3]["shape"] = [1, 2, 3]
    manifest_path.write_text(json.dumps(manifest))
    assert cli.main(["eval", "--checkpoint", str(manifest_path.parent), "--data", str(dataset)]) == 1
    assert victim in caplog.text


def test_eval_class_mismatch_exit_2(dataset, tmp_path):
    cfg = _config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    other = tmp_path / "other"
    assert cli.main(["gen-data", "--classes", "3", "--train-per-class", "4", "--test-per-class", "1",
                     "--size", "24", "--out", str(other)]) == 0
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint"), "--data", str(other)]) == 2


def test_ablate_writes_rows_and_resumes(dataset, tmp_path, capsys, monkeypatch):
    cfg = _config(tmp_path, dataset, epochs=1)
    argv = ["ablate", "--config", str(cfg), "--seeds", "0,1", "--configs", "V0,full"]
    assert cli.main(argv) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 2 and all("runs=2" in line for line in out)
    csv_path = tmp_path / "run" / "ablation.csv"
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "config,seed,accuracy,class_0,class_1"
    assert [tuple(line.split(",")[:2]) for line in lines[1:]] == [("V0", "0"), ("V0", "1"), ("full", "0"), ("full", "1")]
    assert (tmp_path / "run" / "runs" / "full_seed1" / "metrics.csv").exists()

    # a completed grid is not retrained
    def refuse(*a, **k):
        raise AssertionError("retrained a finished run")

    monkeypatch.setattr(trainer, "fit", refuse)
    assert cli.main(argv) == 0
    assert csv_path.read_text().splitlines() == lines


def test_ablate_bad_seeds_exit_2(dataset, tmp_path):
    cfg = _config(tmp_path, dataset)
    assert cli.main(["ablate", "--config", str(cfg), "--seeds", "a,b"]) == 2
    assert cli.main(["ablate", "--config", str(cfg), "--seeds", "0", "--configs", "V7"]) == 2


def test_gradcheck_exit_codes(monkeypatch, capsys):
    good = GradCheckReport(1e-9, True, np.zeros(1), np.zeros(1))
    bad = GradCheckReport(0.5, False, np.zeros(1), np.ones(1))
    monkeypatch.setattr(checks, "run_suite", lambda seed: [("matmul", good), ("conv2d", good)])
    assert cli.main(["gradcheck"]) == 0
    assert capsys.readouterr().out.splitlines()[0].startswith("PASS matmul")
    monkeypatch.setattr(checks, "run_suite", lambda seed: [("matmul", good), ("conv2d", bad)])
    assert cli.main(["gradcheck", "--seed", "3"]) == 4
    assert "FAIL conv2d" in capsys.readouterr().out


def test_ablate_parallel_matches_serial(dataset, tmp_path, capsys):
    serial = _config(tmp_path, dataset, name="serial", epochs=1)
    parallel = _config(tmp_path, dataset, name="parallel", epochs=1)
    assert cli.main(["ablate", "--config", str(serial), "--seeds", "0,1", "--configs", "V0,V1"]) == 0
    assert cli.main(["ablate", "--config", str(parallel), "--seeds", "0,1", "--configs", "V0,V1", "--jobs", "2"]) == 0
    assert (tmp_path / "serial" / "ablation.csv").read_bytes() == (tmp_path / "parallel" / "ablation.csv").read_bytes()
