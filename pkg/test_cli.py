import json
import struct

import pytest

from cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_FORMAT, EXIT_OK, main, parse_dataset_spec
from config import load_run_config
from data import Cifar10Spec, SyntheticSpec, load_dataset
from errors import ConfigError
from models import build_model
from train import METRICS_HEADER, evaluate


def write_config(tmp_path, name="run.json", **overrides):
    config = {
        "model": "FCNN1",
        "n_values": 5,
        "epochs": 5,
        "batch_size": 20,
        "dataset": {"kind": "synthetic", "n_per_class": 4, "test_per_class": 2, "seed": 1},
        "output_dir": str(tmp_path / "run"),
    }
    config.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return path


def eval_output(capsys):
    line = capsys.readouterr().out.strip().splitlines()[-1]
    fields = dict(part.split("=") for part in line.split())
    return float(fields["loss"]), float(fields["accuracy"])


def test_train_writes_all_artifacts(tmp_path):
    config = write_config(tmp_path)
    assert main(["train", "--config", str(config)]) == EXIT_OK
    run = tmp_path / "run"
    lines = (run / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert len(lines) == 6
    assert (run / "model.lbq").stat().st_size > 0
    resolved = json.loads((run / "config.resolved.json").read_text())
    assert resolved["lr"] == 0.001
    assert resolved["seed"] == 0


def test_resolved_config_reproduces_the_run(tmp_path):
    config = write_config(tmp_path, epochs=1)
    assert main(["train", "--config", str(config)]) == EXIT_OK
    first = tmp_path / "run"
    resolved = load_run_config(first / "config.resolved.json")
    assert resolved.output_dir == str(first)
    assert main(["train", "--config", str(first / "config.resolved.json"), "--out", str(tmp_path / "again")]) == EXIT_OK
    assert (tmp_path / "again" / "model.lbq").read_bytes() == (first / "model.lbq").read_bytes()


def test_same_seed_gives_byte_identical_artifacts(tmp_path):
    config = write_config(tmp_path, epochs=2, augment=True)
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "a"), "--seed", "7"]) == EXIT_OK
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "7"]) == EXIT_OK
    for name in ("metrics.csv", "model.lbq"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_invalid_momentum_is_a_config_error(tmp_path, capsys):
    config = write_config(tmp_path, momentum=1.5)
    assert main(["train", "--config", str(config)]) == EXIT_CONFIG
    assert "momentum" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_divergence_on_a_single_batch_epoch_exits_3(tmp_path, capsys):
    config = write_config(tmp_path, lr=1e30, batch_size=100, epochs=1)
    assert main(["train", "--config", str(config)]) == EXIT_DIVERGED
    assert "diverged at epoch 1, batch 0" in capsys.readouterr().err


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    config = write_config(tmp_path, learning_rate=0.1)
    assert main(["train", "--config", str(config)]) == EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG


def test_missing_cifar_directory_is_a_config_error(tmp_path, monkeypatch):
    monkeypatch.setattr("config.Config.DATA_DIR", None)
    config = write_config(tmp_path, dataset={"kind": "cifar10"})
    assert main(["train", "--config", str(config)]) == EXIT_CONFIG


def test_pack_and_inspect(tmp_path, capsys):
    config = write_config(tmp_path, n_values=3)
    assert main(["pack", "--config", str(config)]) == EXIT_OK
    capsys.readouterr()
    assert main(["inspect", str(tmp_path / "run" / "model.lbq")]) == EXIT_OK
    report = capsys.readouterr().out
    assert "model: FCNN1" in report
    assert "1,738,890" in report
    assert "20x" in report


def test_packed_model_evaluates_like_the_in_memory_one(tmp_path, capsys):
    config_path = write_config(tmp_path)
    assert main(["pack", "--config", str(config_path)]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "run" / "model.lbq"), "--config", str(config_path)]) == EXIT_OK
    loss, accuracy = eval_output(capsys)

    config = load_run_config(config_path)
    _, test_ds = load_dataset(config.dataset)
    expected_loss, expected_accuracy = evaluate(build_model(config.model_settings()), test_ds, config.batch_size)
    assert loss == pytest.approx(expected_loss, abs=1e-8)
    assert accuracy == pytest.approx(expected_accuracy, abs=1e-8)


def test_eval_with_dataset_spec(tmp_path, capsys):
    config = write_config(tmp_path)
    main(["pack", "--config", str(config)])
    capsys.readouterr()
    model = str(tmp_path / "run" / "model.lbq")
    assert main(["eval", model, "--dataset", "synthetic:n_per_class=2,test_per_class=3"]) == EXIT_OK
    loss, accuracy = eval_output(capsys)
    assert loss > 0
    assert 0.0 <= accuracy <= 1.0


def test_eval_on_truncated_file_is_a_format_error(tmp_path, capsys):
    config = write_config(tmp_path)
    main(["pack", "--config", str(config)])
    path = tmp_path / "run" / "model.lbq"
    path.write_bytes(path.read_bytes()[:100])
    assert main(["eval", str(path), "--dataset", "synthetic"]) == EXIT_FORMAT
    assert "TruncatedFile" in capsys.readouterr().err


def test_inspect_missing_file_is_a_format_error(tmp_path):
    assert main(["inspect", str(tmp_path / "nothing.lbq")]) == EXIT_FORMAT


def test_inspect_bad_magic(tmp_path):
    path = tmp_path / "junk.lbq"
    path.write_bytes(b"not a model at all")
    assert main(["inspect", str(path)]) == EXIT_FORMAT


@pytest.mark.parametrize("header_n", [0, 1])
def test_inspect_header_n_values_disagreeing_with_records(tmp_path, capsys, header_n):
    config = write_config(tmp_path, n_values=3)
    main(["pack", "--config", str(config)])
    path = tmp_path / "run" / "model.lbq"
    raw = bytearray(path.read_bytes())
    raw[7:9] = struct.pack("<H", header_n)
    path.write_bytes(bytes(raw))
    assert main(["inspect", str(path)]) == EXIT_FORMAT
    assert "CorruptPayload" in capsys.readouterr().err


def test_parse_dataset_spec():
    assert parse_dataset_spec("synthetic") == SyntheticSpec()
    spec = parse_dataset_spec("synthetic:n_per_class=3, seed=9")
    assert (spec.n_per_class, spec.seed) == (3, 9)
    assert parse_dataset_spec("cifar10:/data/cifar").path == "/data/cifar"
    assert parse_dataset_spec("cifar10") == Cifar10Spec()
    with pytest.raises(ConfigError):
        parse_dataset_spec("mnist")
    with pytest.raises(ConfigError):
        parse_dataset_spec("synthetic:seed")
