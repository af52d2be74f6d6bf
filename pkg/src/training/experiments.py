"""
Experiment runners: ablation studies over head toggles, the KCR weight
sweep, and the full-head gradient check.

Every ablation cell is an independent training run. A failing cell is
logged and recorded with its error status; the remaining cells still run.
"""

import json
import logging
from dataclasses import dataclass
from functools import reduce
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.autodiff.gradcheck import GradCheckReport, finite_diff_check
from src.autodiff.tensor import Parameter, Tensor, add, mul
from src.data.synthdata import DatasetSpec, DatasetSplits, make_dataset, text_world
from src.evaluation.metrics import aggregate_reports
from src.head.config import HeadConfig
from src.head.pvlr_head import PvlrHead
from src.objective.losses import LossConfig
from src.training.config import TrainConfig
from src.training.trainer import Trainer, build_data, sample_objective
from src.utils.data_formats import METRIC_COLUMNS, DataLoader
from src.utils.errors import ConfigError, PvlrError

logger = logging.getLogger(__name__)

Overrides = Dict[str, Any]

_NO_DMA = {"head.use_v2s": False, "head.use_s2v": False}


def _pvlr(**toggles: Any) -> Overrides:
    return {"head.head_mode": "pvlr", **{f"head.{k}": v for k, v in toggles.items()}}


def study_modes(study: str, prompt_lengths: Sequence[int] = (4, 8, 12)) -> List[Tuple[str, Overrides]]:
    """(mode name, config overrides) rows of one ablation study."""
    if study == "ladder":
        return [
            ("baseline", {"head.head_mode": "label_rep"}),
            ("+kap", {**_pvlr(use_kap=True, use_cap=False), **_NO_DMA}),
            ("+cap", {**_pvlr(use_kap=False, use_cap=True), **_NO_DMA}),
            ("+ifm", {**_pvlr(use_kap=True, use_cap=True), **_NO_DMA}),
            ("+dma", _pvlr(use_kap=True, use_cap=True)),
        ]
    if study == "centers":
        return [(mode, {"head.head_mode": mode})
                for mode in ("classifier_learning", "label_rep", "label_rep_dma", "pvlr")]
    if study == "dma":
        return [(f"v2s={int(v2s)},s2v={int(s2v)}", _pvlr(use_v2s=v2s, use_s2v=s2v))
                for v2s in (False, True) for s2v in (False, True)]
    if study == "visual":
        # implicit clues come through CAP's cross-attention with X, explicit ones through DMA
        return [(f"implicit={int(cap)},explicit={int(dma)}",
                 {**_pvlr(use_cap_visual=cap), **({} if dma else _NO_DMA)})
                for cap in (False, True) for dma in (False, True)]
    if study == "ifm":
        return [
            ("full", _pvlr()),
            ("no_kcr", {**_pvlr(), "loss.lambda_kcr": 0.0}),
            ("no_channel", _pvlr(use_channel_interaction=False)),
            ("neither", {**_pvlr(use_channel_interaction=False), "loss.lambda_kcr": 0.0}),
        ]
    if study == "prompting":
        rows = [("hard", _pvlr(cap_prompts="hard")),
                ("pre_L4", _pvlr(prompting_mode="pre", cap_prompts="soft", L=4))]
        rows += [(f"soft_L{L}", _pvlr(prompting_mode="post", cap_prompts="soft", L=L)) for L in prompt_lengths]
        return rows
    raise ConfigError(f"unknown ablation study {study!r}")


class DataCache:
    """Datasets keyed by their spec and token width, so cells sharing a seed train on the same data."""

    def __init__(self):
        self._splits: Dict[str, DatasetSplits] = {}

    def get(self, config: TrainConfig) -> DatasetSplits:
        key = json.dumps([config.dataset.to_dict(), config.head.d_tok], sort_keys=True)
        if key not in self._splits:
            self._splits[key] = build_data(config)
        return self._splits[key]


def cell_config(base: TrainConfig, overrides: Overrides, seed: int, run_name: str) -> TrainConfig:
    return base.replace(**{**overrides, "train.seed": seed, "dataset.seed": seed, "run_name": run_name})


def run_cell(config: TrainConfig, data: DatasetSplits, timing_batches: int = 0) -> Dict[str, Any]:
    """Train one configuration; returns metrics, seconds per batch and a status string."""
    row: Dict[str, Any] = {"status": "ok", "sec_per_batch": np.nan, **{col: np.nan for col in METRIC_COLUMNS}}
    try:
        trainer = Trainer(config, data)
        if timing_batches:
            row["sec_per_batch"] = trainer.time_batches(timing_batches)
        trainer.fit(progress=False)
        report, _ = trainer.evaluate()
        row.update({k: v for k, v in report.as_row().items() if k in METRIC_COLUMNS})
    except (PvlrError, ArithmeticError) as e:
        logger.error(f"Run {config.run_name} failed: {e}")
        row["status"] = f"failed: {type(e).__name__}: {e}"
    return row


def ablate(base: TrainConfig, studies: Optional[Sequence[str]] = None, seeds: Optional[Sequence[int]] = None,
           save: bool = True, progress: bool = True,
           cache: Optional[DataCache] = None) -> Dict[str, Tuple[pd.DataFrame, pd.DataFrame]]:
    """Run every (study, mode, seed) cell; returns per-study (runs, mean/std summary) frames."""
    exp = base.experiments
    studies = list(studies if studies is not None else exp.studies)
    seeds = list(seeds if seeds is not None else exp.seeds)
    cache = cache or DataCache()
    results: Dict[str, Tuple[pd.DataFrame, pd.DataFrame]] = {}
    for study in studies:
        modes = study_modes(study, exp.prompt_lengths)
        rows = []
        cells = [(mode, overrides, seed) for mode, overrides in modes for seed in seeds]
        for mode, overrides, seed in tqdm(cells, desc=f"ablation {study}", disable=not progress):
            config = cell_config(base, overrides, seed, f"{study}_{mode}_s{seed}")
            row = run_cell(config, cache.get(config), exp.timing_batches)
            rows.append({"study": study, "mode": mode, "seed": seed, **row})
        runs = pd.DataFrame(rows, columns=["study", "mode", "seed", "status", "sec_per_batch"] + METRIC_COLUMNS)
        summary = aggregate_reports(runs, by=["study", "mode"], extra_columns=["sec_per_batch"])
        failed = int((runs["status"] != "ok").sum())
        logger.info(f"Ablation {study}: {len(runs) - failed} runs ok, {failed} failed")
        if save:
            DataLoader(base.output_dir).save_ablation(runs, summary, study)
        results[study] = (runs, summary)
    return results


def sweep_lambda(base: TrainConfig, values: Optional[Sequence[float]] = None,
                 seeds: Optional[Sequence[int]] = None, save: bool = True, progress: bool = True,
                 cache: Optional[DataCache] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """One training run per (λ, seed); returns the runs and the per-λ mean/std summary."""
    values = list(values if values is not None else base.experiments.lambda_values)
    seeds = list(seeds if seeds is not None else base.experiments.seeds)
    if not values or any(v < 0 for v in values):
        raise ConfigError(f"lambda values must be a non-empty list of values >= 0, got {values}")
    cache = cache or DataCache()
    rows = []
    cells = [(value, seed) for value in values for seed in seeds]
    for value, seed in tqdm(cells, desc="lambda sweep", disable=not progress):
        config = cell_config(base, {"loss.lambda_kcr": float(value)}, seed, f"lambda{value:g}_s{seed}")
        row = run_cell(config, cache.get(config))
        row.pop("sec_per_batch")
        rows.append({"lambda_kcr": float(value), "seed": seed, **row})
    runs = pd.DataFrame(rows, columns=["lambda_kcr", "seed", "status"] + METRIC_COLUMNS)
    summary = aggregate_reports(runs, by=["lambda_kcr"])
    if not summary.empty:
        spread = summary["map_mean"].max() - summary["map_mean"].min()
        logger.info(f"mAP spread across lambda grid: {100 * spread:.2f} points")
    if save:
        DataLoader(base.output_dir).save_sweep(runs, summary)
    return runs, summary


# --- gradient check ---

GRADCHECK_DATASET = DatasetSpec(C=4, d=8, M=4, K=2, n_train=3, n_test=1, n_pl=1, core_labels=2)
GRADCHECK_ATTENTION_GAIN = 4.0

GRADCHECK_VARIANTS: Dict[str, Overrides] = {
    "pvlr_post": {},
    "pvlr_pre": {"prompting_mode": "pre"},
    "pvlr_hard_cap": {"cap_prompts": "hard"},
    "pvlr_residual": {"attention_residual": True},
    "classifier_learning": {"head_mode": "classifier_learning"},
    "label_rep": {"head_mode": "label_rep"},
    "label_rep_dma": {"head_mode": "label_rep_dma"},
}


@dataclass
class GradCheckCase:
    """A tiny head with a fixed batch; ``objective`` is the mean composite loss over the batch."""

    head: PvlrHead
    data: DatasetSplits
    loss_cfg: LossConfig

    def objective(self, params: Sequence[Parameter]) -> Tensor:
        shared = self.head.prepare()
        batch = self.data.train
        totals = [sample_objective(self.head, batch.features(i), batch.y[i], self.loss_cfg, shared)[0]
                  for i in range(len(batch))]
        return mul(reduce(add, totals), 1.0 / len(totals))


def gradcheck_case(variant: str, L: int = 2, seed: int = 0, loss_cfg: Optional[LossConfig] = None,
                   spec: DatasetSpec = GRADCHECK_DATASET) -> GradCheckCase:
    head_cfg = HeadConfig(C=spec.C, d=spec.d, M=spec.M, L=L, **GRADCHECK_VARIANTS[variant])
    table, encoder = text_world(spec)
    data = make_dataset(spec, table=table, encoder=encoder)
    head = PvlrHead(head_cfg, data.vocabulary, table, encoder, seed=seed)
    for block in head.attention_blocks():
        # peaked maps, so M_ka and M_ca differ and the α gradient is well above round-off
        block.W_Q.data *= GRADCHECK_ATTENTION_GAIN
        block.W_K.data *= GRADCHECK_ATTENTION_GAIN
    if head.alpha is not None:
        # off the symmetric starting point so the α gradient is not special
        head.alpha.raw.data = np.array(0.3)
    return GradCheckCase(head=head, data=data, loss_cfg=loss_cfg or LossConfig())


def run_gradcheck(variants: Optional[Sequence[str]] = None, tolerance: float = 1e-4,
                  output_dir: Optional[str] = None, seed: int = 0,
                  progress: bool = True) -> Dict[str, GradCheckReport]:
    """Finite-difference check of every parameter of each head variant under the composite loss."""
    variants = list(variants if variants is not None else GRADCHECK_VARIANTS)
    reports: Dict[str, GradCheckReport] = {}
    for variant in tqdm(variants, desc="gradcheck", disable=not progress):
        case = gradcheck_case(variant, seed=seed)
        report = finite_diff_check(case.objective, case.head.parameters())
        name, err = report.worst()
        status = "passed" if report.passed(tolerance) else "FAILED"
        logger.info(f"Gradient check {variant}: {status} (worst {name} {err:.2e}, tolerance {tolerance:g})")
        if output_dir is not None:
            DataLoader(output_dir).save_gradcheck(report.to_frame(), variant)
        reports[variant] = report
    return reports
