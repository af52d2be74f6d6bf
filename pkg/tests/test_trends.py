"""
Desk-scale reproduction of the ablation trends. Each study trains many
configurations over five seeds, so these only run with ``--runslow``.
"""

from pathlib import Path

import pytest

from src.training.config import load_config
from src.training.experiments import DataCache, ablate, cell_config, sweep_lambda
from src.training.trainer import Trainer

pytestmark = pytest.mark.slow

DESK_CONFIG = Path(__file__).resolve().parent.parent / "config" / "desk.yaml"


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return load_config(DESK_CONFIG, {"output_dir": str(tmp_path_factory.mktemp("desk"))})


@pytest.fixture(scope="module")
def cache():
    return DataCache()


@pytest.fixture(scope="module")
def studies(desk, cache):
    return ablate(desk, studies=["ladder", "centers", "dma"], progress=False, cache=cache)


def mean_map(summary, mode):
    return float(summary.loc[summary["mode"] == mode, "map_mean"].iloc[0])


def test_ladder_is_non_decreasing(studies):
    runs, summary = studies["ladder"]
    assert (runs["status"] == "ok").all()
    ladder = [mean_map(summary, mode) for mode in ("baseline", "+kap", "+cap", "+ifm", "+dma")]
    assert all(a <= b for a, b in zip(ladder, ladder[1:])), ladder
    assert ladder[-1] - ladder[0] >= 0.02


def test_label_representations_beat_learned_classifiers(studies):
    _, summary = studies["centers"]
    assert mean_map(summary, "pvlr") >= mean_map(summary, "classifier_learning")
    assert mean_map(summary, "label_rep_dma") >= mean_map(summary, "label_rep")


def test_bidirectional_dma_is_not_worse_than_one_direction(studies):
    _, summary = studies["dma"]
    single = max(mean_map(summary, "v2s=1,s2v=0"), mean_map(summary, "v2s=0,s2v=1"))
    assert mean_map(summary, "v2s=1,s2v=1") >= single - 0.005


def test_pre_interaction_prompting_is_slower(desk, cache):
    timings = {}
    for mode in ("pre", "post"):
        config = cell_config(desk, {"head.prompting_mode": mode}, 0, f"timing_{mode}")
        timings[mode] = Trainer(config, cache.get(config)).time_batches(3)
    assert timings["pre"] > timings["post"]


def test_lambda_grid_is_stable(desk, cache):
    runs, summary = sweep_lambda(desk, progress=False, cache=cache)
    assert (runs["status"] == "ok").all()
    assert summary["map_mean"].max() - summary["map_mean"].min() <= 0.03
