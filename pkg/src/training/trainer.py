"""
Training loop: per-sample head forwards summed into one batch objective,
AdamW under a cosine schedule, EMA shadows for evaluation, per-epoch logs
and checkpoints.

Batch composition is a pure function of (seed, step): epoch e uses the
permutation drawn from ``default_rng([seed, e])`` and global step s trains
batch ``s % steps_per_epoch`` of epoch ``s // steps_per_epoch``. Resuming
from a checkpoint therefore replays exactly the batches an uninterrupted
run would have seen.
"""

import logging
import math
import time
from dataclasses import dataclass
from functools import reduce
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.autodiff.tensor import Tensor, add, backward, mul, no_grad, zero_grads
from src.data.synthdata import DatasetSplits, SyntheticBatch, make_dataset, text_world
from src.evaluation.metrics import MetricsReport, ScoreMatrix, evaluate, per_class_ap
from src.head.pvlr_head import HeadOutput, PvlrHead, SharedState
from src.objective.losses import LossConfig, asl_loss, kcr_loss, total_loss
from src.training.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.training.config import TrainConfig
from src.training.optim import AdamWState, EmaState, adamw_step, cosine_lr, ema_update
from src.utils.data_formats import METRIC_COLUMNS, DataLoader, FileNamingConventions, RunConfigManager
from src.utils.errors import ContractError, NumericError

logger = logging.getLogger(__name__)


@dataclass
class StepResult:
    step: int
    loss: float
    cls_loss: float
    kcr_loss: float
    lr: float


@dataclass
class TrainResult:
    report: MetricsReport
    epoch_log: pd.DataFrame
    checkpoint_path: Optional[Path]
    scores: ScoreMatrix


def sample_objective(head: PvlrHead, X: Tensor, y: np.ndarray, loss_cfg: LossConfig,
                     shared: Optional[SharedState] = None) -> Tuple[Tensor, Tensor, Optional[Tensor], HeadOutput]:
    """(cls + λ·kcr, cls, kcr, output) for one sample; kcr is None without both prompting branches."""
    output = head.forward(X, shared)
    cls = asl_loss(output.probs, y, loss_cfg)
    kcr = None
    if output.T_ka is not None and output.T_ca is not None:
        kcr = kcr_loss(output.T_ka, output.T_ca)
    return total_loss(cls, kcr, loss_cfg), cls, kcr, output


def build_data(config: TrainConfig) -> DatasetSplits:
    """The dataset a config trains on, generated with the head's token width."""
    table, encoder = text_world(config.dataset, config.head.d_tok)
    return make_dataset(config.dataset, table=table, encoder=encoder)


class Trainer:
    """Owns one head, its optimizer and EMA state, and the dataset it trains on."""

    def __init__(self, config: TrainConfig, data: Optional[DatasetSplits] = None):
        self.config = config.resolve()
        self.data = data if data is not None else build_data(self.config)
        table, encoder = text_world(self.config.dataset, self.config.head.d_tok)
        self.head = PvlrHead(self.config.head, self.data.vocabulary, table, encoder, seed=self.config.train.seed)
        self.params = self.head.parameters()
        opt = self.config.train
        self.adam = AdamWState.zeros(self.params)
        self.ema = EmaState.from_params(self.params, opt.ema_decay)
        self.step = 0
        self.steps_per_epoch = math.ceil(len(self.data.train) / opt.batch_size)
        self.total_steps = opt.epochs * self.steps_per_epoch

    # --- batching ---

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.train.seed, epoch]).permutation(len(self.data.train))

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, within = divmod(step, self.steps_per_epoch)
        size = self.config.train.batch_size
        return self.epoch_order(epoch)[within * size:(within + 1) * size]

    # --- optimisation ---

    def batch_objective(self, batch: SyntheticBatch) -> Tuple[Tensor, float, float]:
        """Mean per-sample objective over ``batch`` as one graph, with mean cls/kcr values for logging."""
        shared = self.head.prepare()
        totals, cls_values, kcr_values = [], [], []
        for i in range(len(batch)):
            total, cls, kcr, _ = sample_objective(self.head, batch.features(i), batch.y[i], self.config.loss, shared)
            totals.append(total)
            cls_values.append(cls.item())
            kcr_values.append(kcr.item() if kcr is not None else 0.0)
        loss = mul(reduce(add, totals), 1.0 / len(totals))
        return loss, float(np.mean(cls_values)), float(np.mean(kcr_values))

    def train_step(self) -> StepResult:
        if self.step >= self.total_steps:
            raise ContractError(f"training already finished ({self.total_steps} steps)")
        opt = self.config.train
        step = self.step
        lr = cosine_lr(step, self.total_steps, opt.lr_max, opt.lr_min)
        batch = self.data.train.subset(self.batch_indices(step))

        zero_grads(self.params)
        loss, cls_value, kcr_value = self.batch_objective(batch)
        if not np.isfinite(loss.data).all():
            epoch, within = divmod(step, self.steps_per_epoch)
            logger.error(f"Non-finite loss at step {step} (epoch {epoch}, batch {within})")
            raise NumericError(f"loss is {loss.item()} at step {step} (epoch {epoch}, batch {within})")
        backward(loss)
        for p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for {p.name} at step {step}")
        adamw_step(self.params, self.adam, lr, (opt.beta1, opt.beta2), opt.eps, opt.weight_decay)
        ema_update(self.ema, self.params)
        self.step += 1
        return StepResult(step=step, loss=loss.item(), cls_loss=cls_value, kcr_loss=kcr_value, lr=lr)

    # --- evaluation ---

    def predict_scores(self, split: SyntheticBatch, use_ema: Optional[bool] = None) -> ScoreMatrix:
        """Probabilities for every sample of ``split``, with EMA weights unless disabled."""
        use_ema = self.config.train.eval_with_ema if use_ema is None else use_ema

        def run() -> np.ndarray:
            with no_grad():
                shared = self.head.prepare()
                return np.stack([self.head.forward(split.features(i), shared).probs.data
                                 for i in range(len(split))])

        if use_ema:
            with self.ema.swapped_in(self.params):
                scores = run()
        else:
            scores = run()
        return ScoreMatrix(scores, split.y, self.data.vocabulary.names)

    def evaluate(self, split: Optional[SyntheticBatch] = None,
                 use_ema: Optional[bool] = None) -> Tuple[MetricsReport, ScoreMatrix]:
        matrix = self.predict_scores(split if split is not None else self.data.test, use_ema)
        opt = self.config.train
        return evaluate(matrix, opt.threshold, opt.top_k), matrix

    def time_batches(self, n_batches: int) -> float:
        """Mean wall-clock seconds for forward + backward of one training batch."""
        elapsed = []
        for b in range(n_batches):
            batch = self.data.train.subset(self.batch_indices(b % self.steps_per_epoch))
            zero_grads(self.params)
            start = time.perf_counter()
            loss, _, _ = self.batch_objective(batch)
            backward(loss)
            elapsed.append(time.perf_counter() - start)
        zero_grads(self.params)
        return float(np.mean(elapsed))

    # --- loop ---

    def fit(self, max_steps: Optional[int] = None, progress: bool = True) -> pd.DataFrame:
        """Train to the end (or ``max_steps`` more steps); one log row per completed epoch."""
        end = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        rows: List[Dict[str, float]] = []
        epoch_steps: List[StepResult] = []
        bar = tqdm(total=end - self.step, desc=self.config.run_name, disable=not progress, leave=False)
        while self.step < end:
            epoch_steps.append(self.train_step())
            bar.update(1)
            if self.step % self.steps_per_epoch == 0:
                rows.append(self._epoch_row(epoch_steps))
                epoch_steps = []
        bar.close()
        return pd.DataFrame(rows, columns=["epoch", "step", "loss", "cls_loss", "kcr_loss", "lr", "alpha"] + METRIC_COLUMNS)

    def _epoch_row(self, steps: List[StepResult]) -> Dict[str, float]:
        epoch = self.step // self.steps_per_epoch - 1
        report, _ = self.evaluate()
        alpha = self.head.alpha.alpha if self.head.alpha is not None else float("nan")
        row = {"epoch": epoch, "step": self.step,
               "loss": float(np.mean([s.loss for s in steps])),
               "cls_loss": float(np.mean([s.cls_loss for s in steps])),
               "kcr_loss": float(np.mean([s.kcr_loss for s in steps])),
               "lr": steps[-1].lr, "alpha": alpha}
        row.update({k: v for k, v in report.as_row().items() if k in METRIC_COLUMNS})
        logger.info(f"[{self.config.run_name}] epoch {epoch}: loss {row['loss']:.4f} | {report.summary()}")
        return row

    # --- state ---

    def state(self) -> Checkpoint:
        return Checkpoint(
            config=self.config.to_dict(),
            params={p.name: p.data.copy() for p in self.params},
            ema={k: v.copy() for k, v in self.ema.shadow.items()},
            adam_m={k: v.copy() for k, v in self.adam.m.items()},
            adam_v={k: v.copy() for k, v in self.adam.v.items()},
            step=self.step, adam_step=self.adam.step,
        )

    def load_state(self, state: Checkpoint) -> None:
        named = self.head.named_parameters()
        if set(state.params) != set(named):
            missing, extra = set(named) - set(state.params), set(state.params) - set(named)
            raise ContractError(f"checkpoint does not fit this head (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, p in named.items():
            if state.params[name].shape != p.data.shape:
                raise ContractError(f"checkpoint shape {state.params[name].shape} for {name}, head has {p.shape}")
            p.data = state.params[name].copy()
        self.ema.shadow = {k: v.copy() for k, v in state.ema.items()} or {p.name: p.data.copy() for p in self.params}
        if state.adam_m:
            self.adam = AdamWState(m={k: v.copy() for k, v in state.adam_m.items()},
                                   v={k: v.copy() for k, v in state.adam_v.items()}, step=state.adam_step)
        self.step = state.step

    def save(self, path) -> Path:
        return save_checkpoint(path, self.state())

    @classmethod
    def from_checkpoint(cls, path, data: Optional[DatasetSplits] = None) -> "Trainer":
        state = load_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(state.config), data)
        trainer.load_state(state)
        return trainer


def train(config: TrainConfig, data: Optional[DatasetSplits] = None, save: bool = True,
          progress: bool = True) -> TrainResult:
    """Train, evaluate and (with ``save``) write the epoch log, metrics, per-class AP and checkpoint."""
    trainer = Trainer(config, data)
    logger.info(f"Training {config.run_name}: {trainer.total_steps} steps "
                f"({trainer.steps_per_epoch} per epoch, {len(trainer.params)} parameter tensors)")
    epoch_log = trainer.fit(progress=progress)
    report, matrix = trainer.evaluate()
    logger.info(f"[{config.run_name}] final: {report.summary()}")

    checkpoint_path = None
    if save:
        store = DataLoader(config.output_dir)
        store.save_epoch_log(epoch_log, config.run_name)
        store.save_metrics(report.to_frame(), config.run_name)
        store.save_per_class_ap(per_class_ap(matrix), config.run_name)
        RunConfigManager(config.output_dir).save_run_config(config.to_dict(), config.run_name)
        checkpoint_path = trainer.save(Path(config.output_dir) / FileNamingConventions.get_checkpoint_filename(config.run_name))
    return TrainResult(report=report, epoch_log=epoch_log, checkpoint_path=checkpoint_path, scores=matrix)
