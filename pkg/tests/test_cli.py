import csv

import pytest

from cec_cnn.checkpoint import read_manifest
from cec_cnn.cli import main
from cec_cnn.config import RESOLVED_NAME, RunConfig

SMALL = """
[data]
num_patients = 4
rois_per_patient = 4
[train]
epochs = 2
batch_size = 4
checkpoint_every = 1
[eval]
repeats = 3
[erf]
runs = 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.ini"
    cfg.write_text(SMALL)
    data, run = root / "data", root / "run"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data), "--deterministic"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run), "--deterministic"]) == 0
    return root, cfg, data, run


def test_gen_data_outputs(workspace):
    _, _, data, _ = workspace
    report = dict(line.split(" ", 1) for line in (data / "generation_report.txt").read_text().splitlines())
    assert report["rois"] == "16" and report["patients"] == "4"
    assert float(report["oracle_accuracy"]) >= 0.5
    assert (data / "manifest.csv").read_text().startswith("patient_id,path,label")
    assert (data / RESOLVED_NAME).is_file()


def test_train_outputs(workspace):
    _, _, _, run = workspace
    rows = list(csv.reader(open(run / "history.csv")))
    assert rows[0] == ["epoch", "loss", "lr", "seconds"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    for name in ("model_e001", "model_e002", "model"):
        assert (run / f"{name}.manifest").is_file() and (run / f"{name}.bin").is_file()
    assert (run / "history.png").stat().st_size > 0
    assert (run / "split.csv").is_file()
    header, _ = read_manifest(run / "model")
    assert header["meta.epoch"] == "2"


def test_resolved_config_round_trips(workspace):
    _, _, _, run = workspace
    text = (run / RESOLVED_NAME).read_text()
    cfg = RunConfig.from_ini(text)
    assert cfg.num_patients == 4 and cfg.train.epochs == 2 and cfg.deterministic
    assert RunConfig.from_ini(cfg.to_ini()).to_ini() == text


def test_eval_writes_table(workspace, capsys):
    _, cfg, data, run = workspace
    out = run / "eval"
    code = main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint", str(run / "model"),
                 "--out", str(out)])
    assert code == 0
    rows = list(csv.reader(open(out / "table.csv", encoding="utf-8")))
    assert rows[0] == ["CNN", "Input", "Recall", "Precision", "F1", "Accuracy"]
    assert rows[1][:2] == ["CEC-CNN", "32x32"]
    for cell in rows[1][2:]:
        mean, std = cell.split(" ±")
        assert 0.0 <= float(mean) <= 100.0 and float(std) >= 0.0
    metrics = list(csv.reader(open(out / "metrics.csv")))
    assert metrics[0] == ["metric", "mean", "std"] and len(metrics) == 5
    assert len(list(csv.reader(open(out / "runs.csv")))) == 1 + 3
    assert (out / "metrics.png").stat().st_size > 0
    assert "CEC-CNN" in capsys.readouterr().out


def test_erf_outputs(workspace):
    _, cfg, _, run = workspace
    out = run / "erfout"
    code = main(["erf", "--config", str(cfg), "--checkpoint", str(run / "model"), "--channel", "0",
                 "--channel", "230", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(open(out / "erf" / "erf_report.csv")))
    assert [r["channel"] for r in rows] == ["0", "230"]
    assert all(r["within_theoretical_rf"] == "true" for r in rows)
    for ch in (0, 230):
        for ext in ("png", "f64", "txt"):
            assert (out / "erf" / f"p5.d8.concat_c{ch}.{ext}").is_file()
    assert (out / "erf" / "erf_panel.png").is_file()


def test_missing_manifest_exit_code(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r"), "--epochs", "1"]) == 2


def test_spec_hash_mismatch_exit_code(workspace, tmp_path):
    _, cfg, data, run = workspace
    code = main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint", str(run / "model"),
                 "--input-size", "64", "--out", str(tmp_path)])
    assert code == 4


def test_unknown_layer_and_channel_exit_code(workspace, tmp_path, capsys):
    _, cfg, _, run = workspace
    ck = str(run / "model")
    assert main(["erf", "--config", str(cfg), "--checkpoint", ck, "--layer", "nope", "--out", str(tmp_path)]) == 5
    assert "p5.d8.concat" in capsys.readouterr().err
    assert main(["erf", "--config", str(cfg), "--checkpoint", ck, "--channel", "999", "--out", str(tmp_path)]) == 5


def test_non_finite_loss_exit_code(workspace, tmp_path):
    _, _, data, _ = workspace
    bad = tmp_path / "bad.ini"
    bad.write_text(SMALL.replace("epochs = 2", "epochs = 2\nlearning_rate = 1e30"))
    assert main(["train", "--config", str(bad), "--data", str(data), "--out", str(tmp_path / "r")]) == 3


def test_train_is_reproducible(workspace, tmp_path):
    _, cfg, data, run = workspace
    again = tmp_path / "again"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(again), "--deterministic"]) == 0
    strip = lambda p: [r[:3] for r in csv.reader(open(p))]
    assert strip(again / "history.csv") == strip(run / "history.csv")
    assert (again / "model.bin").read_bytes() == (run / "model.bin").read_bytes()
