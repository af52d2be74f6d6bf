from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.training.config import ABLATION_STUDIES
from src.training.experiments import (
    DataCache,
    ablate,
    cell_config,
    run_gradcheck,
    study_modes,
    sweep_lambda,
)
from src.utils.data_formats import METRIC_COLUMNS
from src.utils.errors import ConfigError


def test_ladder_rows():
    modes = dict(study_modes("ladder"))
    assert list(modes) == ["baseline", "+kap", "+cap", "+ifm", "+dma"]
    assert modes["baseline"] == {"head.head_mode": "label_rep"}
    assert modes["+kap"]["head.use_cap"] is False and modes["+kap"]["head.use_v2s"] is False
    assert modes["+dma"]["head.use_kap"] and modes["+dma"]["head.use_cap"]
    assert "head.use_v2s" not in modes["+dma"]


def test_every_study_has_rows():
    for study in ABLATION_STUDIES:
        assert len(study_modes(study)) >= 2
    assert [m for m, _ in study_modes("prompting", [4, 8])] == ["hard", "pre_L4", "soft_L4", "soft_L8"]
    assert [m for m, _ in study_modes("centers")] == ["classifier_learning", "label_rep", "label_rep_dma", "pvlr"]
    with pytest.raises(ConfigError):
        study_modes("everything")


def test_visual_study_keeps_cap_and_toggles_its_cross_attention():
    modes = dict(study_modes("visual"))
    assert list(modes) == ["implicit=0,explicit=0", "implicit=0,explicit=1",
                           "implicit=1,explicit=0", "implicit=1,explicit=1"]
    for name, overrides in modes.items():
        assert overrides.get("head.use_cap", True) is True, name
        assert overrides["head.use_cap_visual"] is name.startswith("implicit=1")
    assert modes["implicit=1,explicit=0"]["head.use_v2s"] is False


def test_cell_config_ties_dataset_and_training_seed(tiny_config):
    config = cell_config(tiny_config, {"head.use_kap": False}, 7, "cell")
    assert config.train.seed == config.dataset.seed == 7
    assert config.head.use_kap is False
    assert tiny_config.head.use_kap is True


def test_data_cache_shares_splits(tiny_config):
    cache = DataCache()
    a = cache.get(cell_config(tiny_config, {"head.use_kap": False}, 0, "a"))
    b = cache.get(cell_config(tiny_config, {"head.use_cap": False}, 0, "b"))
    c = cache.get(cell_config(tiny_config, {}, 1, "c"))
    assert a is b
    assert a is not c


def test_small_ladder_ablation(tiny_config):
    config = tiny_config.replace(**{"train.epochs": 1})
    results = ablate(config, studies=["ladder"], seeds=[0, 1], progress=False)
    runs, summary = results["ladder"]
    assert len(runs) == 10
    assert (runs["status"] == "ok").all()
    assert runs[METRIC_COLUMNS].notna().all().all()
    assert (runs["sec_per_batch"] > 0).all()
    assert list(summary["mode"]) == ["baseline", "+kap", "+cap", "+ifm", "+dma"]
    assert (summary["n_runs"] == 2).all()
    saved = pd.read_csv(f"{config.output_dir}/ablation_ladder.csv")
    assert len(saved) == 10
    assert (Path(config.output_dir) / "ablation_ladder_summary.csv").exists()


def test_failing_cell_is_recorded_and_the_study_continues(tiny_config):
    # pre-interaction prompting needs d_tok == d, so that cell alone fails
    config = tiny_config.replace(**{"train.epochs": 1, "head.d_tok": 6})
    config.experiments.prompt_lengths = [2]
    runs, summary = ablate(config, studies=["prompting"], seeds=[0], save=False, progress=False)["prompting"]
    status = dict(zip(runs["mode"], runs["status"]))
    assert status["hard"] == "ok" and status["soft_L2"] == "ok"
    assert status["pre_L4"].startswith("failed: ConfigError")
    assert np.isnan(runs.loc[runs["mode"] == "pre_L4", "map"]).all()
    assert "pre_L4" not in set(summary["mode"])


def test_lambda_sweep(tiny_config):
    config = tiny_config.replace(**{"train.epochs": 1})
    runs, summary = sweep_lambda(config, values=[0.0, 4.0], seeds=[0], progress=False)
    assert list(runs["lambda_kcr"]) == [0.0, 4.0]
    assert (runs["status"] == "ok").all()
    assert list(summary["lambda_kcr"]) == [0.0, 4.0]
    assert not (runs.iloc[0][METRIC_COLUMNS] == runs.iloc[1][METRIC_COLUMNS]).all()
    with pytest.raises(ConfigError):
        sweep_lambda(config, values=[-1.0], seeds=[0], progress=False)


def test_gradcheck_report_files(tmp_path):
    reports = run_gradcheck(["label_rep"], output_dir=str(tmp_path), progress=False)
    assert reports["label_rep"].passed(1e-4)
    frame = pd.read_csv(tmp_path / "gradcheck_label_rep.csv")
    assert list(frame["parameter"]) == ["label_rep.w_vis"]
