from pathlib import Path

import pandas as pd
import pytest
import yaml

from src.cli import main
from src.training import Trainer
from src.utils.data_formats import DataLoader
from src.utils.errors import EXIT_CONFIG, EXIT_IO, EXIT_OK


@pytest.fixture
def config_file(tiny_config, tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_config.to_dict()), encoding="utf-8")
    return path


def run(*argv):
    return main(["--log-level", "WARNING", *map(str, argv)])


def test_train_then_eval_and_export(config_file, tiny_config):
    out = Path(tiny_config.output_dir)
    assert run("train", "--config", config_file, "--train.epochs", "1") == EXIT_OK
    checkpoint = out / "checkpoint_tiny.pvlr"
    assert checkpoint.exists()
    assert len(pd.read_csv(out / "epochs_tiny.csv")) == 1

    assert run("eval", "--checkpoint", checkpoint, "--per-class") == EXIT_OK
    assert (out / "metrics_tiny_eval.csv").exists()
    assert (out / "per_class_ap_tiny_eval.csv").exists()

    assert run("export-maps", "--checkpoint", checkpoint, "--samples", "0", "2", "--out", out / "maps") == EXIT_OK
    for name in ("M_ka", "M_ca", "M_blend", "v2s", "s2v"):
        assert (out / "maps" / f"map_{name}_2.csv").exists(), name
    v2s = pd.read_csv(out / "maps" / "map_v2s_0.csv")
    assert v2s.shape == (tiny_config.dataset.C, tiny_config.dataset.M + 1)
    assert v2s.drop(columns="row").sum(axis=1).round(9).eq(1.0).all()


def test_resume_continues_to_the_end(config_file, tiny_config):
    out = Path(tiny_config.output_dir)
    assert run("train", "--config", config_file) == EXIT_OK
    assert run("train", "--resume", out / "checkpoint_tiny.pvlr") == EXIT_OK


def test_eval_from_csv_files(tmp_path):
    pd.DataFrame({"dog": [0.9, 0.2, 0.6], "cat": [0.1, 0.8, 0.3]}).to_csv(tmp_path / "scores.csv", index=False)
    pd.DataFrame({"dog": [1, 0, 1], "cat": [0, 1, 0]}).to_csv(tmp_path / "targets.csv", index=False)
    assert run("eval", "--scores", tmp_path / "scores.csv", "--targets", tmp_path / "targets.csv",
               "--out", tmp_path / "out") == EXIT_OK
    metrics = pd.read_csv(tmp_path / "out" / "metrics_scores.csv")
    assert metrics["map"].iloc[0] == 1.0


def test_gen_data(config_file, tiny_config):
    assert run("gen-data", "--config", config_file) == EXIT_OK
    data_dir = Path(tiny_config.output_dir) / "data"
    for name in ("split_train.bin", "targets_train.csv", "split_test.bin", "targets_test.csv"):
        assert (data_dir / name).exists(), name
    assert len(pd.read_csv(data_dir / "targets_test.csv")) == tiny_config.dataset.n_test


def test_gradcheck_command(config_file, tiny_config):
    assert run("gradcheck", "--config", config_file, "--variants", "label_rep") == EXIT_OK
    assert (Path(tiny_config.output_dir) / "gradcheck_label_rep.csv").exists()


def test_config_errors_exit_with_two(config_file):
    assert run("train", "--config", config_file, "--train.epoch", "1") == EXIT_CONFIG
    assert run("train", "--config", config_file, "--head.head_mode", "mlp") == EXIT_CONFIG
    assert run("train", "--config", config_file, "stray") == EXIT_CONFIG
    assert run("eval") == EXIT_CONFIG
    assert run("sweep-lambda", "--config", config_file, "--values", "-1") == EXIT_CONFIG


def test_io_errors_exit_with_four(tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "missing.pvlr") == EXIT_IO
    broken = tmp_path / "broken.pvlr"
    broken.write_bytes(b"NOPE" + b"\x00" * 16)
    assert run("eval", "--checkpoint", broken) == EXIT_IO
    assert run("train", "--config", tmp_path / "missing.yaml") == EXIT_IO


@pytest.fixture
def half_trained(tiny_config):
    out = Path(tiny_config.output_dir)
    trainer = Trainer(tiny_config)
    DataLoader(out).save_epoch_log(trainer.fit(max_steps=trainer.steps_per_epoch, progress=False), "tiny")
    return trainer.save(out / "checkpoint_tiny.pvlr")


def test_resume_extends_the_epoch_log(half_trained, tiny_config):
    assert run("train", "--resume", half_trained) == EXIT_OK
    log = pd.read_csv(Path(tiny_config.output_dir) / "epochs_tiny.csv")
    assert list(log["epoch"]) == [0, 1]
    assert list(log["step"]) == [3, 6]


def test_resume_rejects_field_overrides(half_trained):
    assert run("train", "--resume", half_trained, "--train.epochs", "5") == EXIT_CONFIG
