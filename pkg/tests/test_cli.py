import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from cov3d.cli import main, read_config_file, resolve_settings
from cov3d.dataio import read_volume_file, scan_dataset
from cov3d.errors import ConfigError
from cov3d.inference import predict_volume, read_predictions
from cov3d.network import load_checkpoint

TRAIN_CONFIG = """
# desk-scale run
epochs = 2
batch_size = 2
max_lr = 2e-3
lambda = 0.5
eps_p = 0.1
eps_s = 0.1
preset = small
stage_widths = 2,2,2,2
blocks_per_stage = 1,1,1,1
stage_dropout = 0.0,0.0,0.0,0.0
head_hidden = 8
head_dropout = 0.0
seed = 4
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(root), "--n-per-class", "3",
                 "--n-test", "2", "--seed", "5"]) == 0
    return root


@pytest.fixture(scope="module")
def volumes(dataset, tmp_path_factory):
    out = dataset.parent / "volumes"
    assert main(["preprocess", "--dataset-root", str(dataset), "--out", str(out),
                 "--preset", "small"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, volumes, tmp_path_factory):
    out = dataset.parent / "run"
    config = dataset.parent / "train.cfg"
    config.write_text(TRAIN_CONFIG)
    assert main(["train", "--config", str(config), "--dataset-root", str(dataset),
                 "--volumes", str(volumes), "--out", str(out)]) == 0
    return out


def tree_digest(root: Path, pattern: str = "*.c3d") -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob(pattern)):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def test_synth_writes_manifest_and_layout(dataset):
    manifest = json.loads((dataset / "run_manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["exit_status"] == 0
    assert manifest["seed"] == 5
    annotations = scan_dataset(dataset)
    assert len(annotations) == 17  # 5 classes x 3 + 2 test scans


def test_preprocess_outputs(dataset, volumes):
    files = sorted(volumes.glob("*.c3d"))
    assert len(files) == 17
    sizes = {f.stat().st_size for f in files}
    assert len(sizes) == 1  # fixed dims -> fixed byte length
    volume = read_volume_file(files[0])
    assert volume.dims == (64, 128, 128)


def test_preprocess_idempotent_and_force(dataset, volumes, capsys):
    assert main(["preprocess", "--dataset-root", str(dataset), "--out", str(volumes),
                 "--preset", "small"]) == 0
    out = capsys.readouterr().out
    assert "preprocessed 0 scans, skipped 17" in out
    before = tree_digest(volumes)
    assert main(["preprocess", "--dataset-root", str(dataset), "--out", str(volumes),
                 "--preset", "small", "--force"]) == 0
    out = capsys.readouterr().out
    assert "preprocessed 17 scans" in out
    assert tree_digest(volumes) == before  # resampler is deterministic


def test_train_outputs(trained):
    assert (trained / "history.csv").is_file()
    assert (trained / "best_task1.ckpt").is_file()
    assert (trained / "best_task2.ckpt").is_file()
    assert (trained / "last.ckpt").is_file()
    assert (trained / "config_echo.cfg").is_file()
    echo = read_config_file(trained / "config_echo.cfg")
    assert echo["lambda"] == "0.5" and echo["epochs"] == "2"
    manifest = json.loads((trained / "run_manifest.json").read_text())
    assert manifest["exit_status"] == 0 and manifest["seed"] == 4
    history = (trained / "history.csv").read_text().strip().splitlines()
    assert len(history) == 3  # header + 2 epochs
    assert history[0] == "epoch,train_loss,f1_task1,f1_task2,lr_last"


def test_train_deterministic_history(dataset, volumes, trained, tmp_path):
    config = tmp_path / "train.cfg"
    config.write_text(TRAIN_CONFIG)
    rerun = tmp_path / "rerun"
    assert main(["train", "--config", str(config), "--dataset-root", str(dataset),
                 "--volumes", str(volumes), "--out", str(rerun)]) == 0
    assert (rerun / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()


def test_train_lambda_zero_covid_only(dataset, volumes, tmp_path):
    out = tmp_path / "covid_only"
    assert main(["train", "--dataset-root", str(dataset), "--volumes", str(volumes),
                 "--out", str(out), "--set", "lambda=0", "--set", "epochs=1",
                 "--set", "stage_widths=2,2,2,2", "--set", "blocks_per_stage=1,1,1,1",
                 "--set", "head_hidden=8", "--seed", "3"]) == 0
    lines = (out / "history.csv").read_text().strip().splitlines()
    assert len(lines) == 2
    # task-2 column is empty for a presence-only run
    assert lines[1].split(",")[3] == ""
    network, _ = load_checkpoint(out / "best_task1.ckpt")
    assert network.config.head_mode == "covid_only"


def test_train_invalid_lambda_named(dataset, volumes, tmp_path, capsys):
    status = main(["train", "--dataset-root", str(dataset), "--volumes", str(volumes),
                   "--out", str(tmp_path / "x"), "--set", "lambda=1.5",
                   "--set", "epochs=1"])
    assert status == 1
    assert "lambda" in capsys.readouterr().err


def test_train_unknown_key_named(dataset, volumes, tmp_path, capsys):
    status = main(["train", "--dataset-root", str(dataset), "--volumes", str(volumes),
                   "--out", str(tmp_path / "x"), "--set", "epocks=3"])
    assert status == 1
    assert "epocks" in capsys.readouterr().err


def test_predict_single_model_matches_library(trained, volumes, tmp_path):
    out = tmp_path / "preds.csv"
    checkpoint = trained / "best_task1.ckpt"
    assert main(["predict", str(checkpoint), "--volumes", str(volumes),
                 "--out", str(out), "--tta"]) == 0
    table = {p.scan_id: p for p in read_predictions(out)}
    network, _ = load_checkpoint(checkpoint)
    for path in sorted(volumes.glob("*.c3d"))[:3]:
        volume = read_volume_file(path)
        direct = predict_volume(network, volume, tta=True)
        assert abs(table[volume.scan_id].p_covid - direct.p_covid) <= 5e-7
        np.testing.assert_allclose(table[volume.scan_id].severity_probs,
                                   direct.severity_probs, atol=5e-7)


def test_predict_ensemble_is_mean_of_members(trained, volumes, tmp_path):
    members = [trained / "best_task1.ckpt", trained / "best_task2.ckpt",
               trained / "last.ckpt", trained / "best_task1.ckpt"]
    single_tables = []
    for i, member in enumerate(members):
        out = tmp_path / f"m{i}.csv"
        assert main(["predict", str(member), "--volumes", str(volumes),
                     "--out", str(out)]) == 0
        single_tables.append({p.scan_id: p for p in read_predictions(out)})
    out = tmp_path / "ensemble.csv"
    assert main(["predict", *[str(m) for m in members], "--volumes", str(volumes),
                 "--out", str(out)]) == 0
    assert (tmp_path / "ensemble.csv.members.txt").is_file()
    for pred in read_predictions(out):
        mean_p = np.mean([t[pred.scan_id].p_covid for t in single_tables])
        assert abs(pred.p_covid - mean_p) <= 2e-6  # members already rounded to 6dp
        mean_s = np.mean([t[pred.scan_id].severity_probs for t in single_tables], axis=0)
        np.testing.assert_allclose(pred.severity_probs, mean_s, atol=2e-6)


def test_predict_preset_mismatch_no_partial_output(trained, dataset, tmp_path):
    mismatched = tmp_path / "volumes_tiny"
    assert main(["preprocess", "--dataset-root", str(dataset), "--out", str(mismatched),
                 "--preset", "medium"]) == 0
    out = tmp_path / "preds.csv"
    status = main(["predict", str(trained / "best_task1.ckpt"),
                   "--volumes", str(mismatched), "--out", str(out)])
    assert status == 1
    assert not out.exists()  # atomic output: nothing partial on failure


def test_evaluate_tasks(trained, volumes, dataset, tmp_path, capsys):
    preds = tmp_path / "preds.csv"
    assert main(["predict", str(trained / "best_task1.ckpt"), "--volumes", str(volumes),
                 "--out", str(preds), "--tta"]) == 0
    capsys.readouterr()
    report_out = tmp_path / "report.kv"
    assert main(["evaluate", "--predictions", str(preds), "--dataset-root", str(dataset),
                 "--task", "1", "--report-out", str(report_out)]) == 0
    out = capsys.readouterr().out
    assert "macro_f1" in out and "presence" in out
    assert report_out.is_file()
    assert main(["evaluate", "--predictions", str(preds), "--dataset-root", str(dataset),
                 "--task", "2"]) == 0
    out = capsys.readouterr().out
    assert "severity" in out and "items: 4" in out  # 1 annotated val scan per class


def test_evaluate_coverage_error(trained, dataset, volumes, tmp_path, capsys):
    preds = tmp_path / "preds.csv"
    assert main(["predict", str(trained / "best_task1.ckpt"), "--volumes", str(volumes),
                 "--out", str(preds)]) == 0
    table = preds.read_text().splitlines()
    # drop one validation scan from the table
    annotations = scan_dataset(dataset)
    victim = annotations.partition("validation")[0].scan_id
    thinned = [line for line in table if not line.startswith(victim)]
    preds.write_text("\n".join(thinned) + "\n")
    status = main(["evaluate", "--predictions", str(preds), "--dataset-root", str(dataset),
                   "--task", "1"])
    assert status == 2
    assert victim in capsys.readouterr().err


def test_manifest_written_on_failure(tmp_path):
    out = tmp_path / "nosuch"
    status = main(["preprocess", "--dataset-root", str(tmp_path / "missing"),
                   "--out", str(out), "--preset", "small"])
    assert status == 2
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["exit_status"] == 2
    assert manifest["finished"] is not None


def test_usage_error_exits_one(capsys):
    assert main(["train", "--nonsense"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_seed_recorded_when_omitted(tmp_path):
    root = tmp_path / "d"
    assert main(["synth", "--out", str(root), "--n-per-class", "2"]) == 0
    manifest = json.loads((root / "run_manifest.json").read_text())
    assert isinstance(manifest["seed"], int)
    assert manifest["config"]["seed_given"] is False


def test_resolve_settings_overrides():
    settings = resolve_settings({"epochs": "7", "lambda": "0.2"}, {"epochs": "9"})
    assert settings["epochs"] == 9 and settings["lambda"] == 0.2
    with pytest.raises(ConfigError, match="epochs"):
        resolve_settings({"epochs": "seven"}, {})
