"""
Multi-label evaluation: mAP and class-wise / overall precision, recall and F1,
for thresholded ("ALL") and top-k predictions.

Ranking ties are broken by ascending original index everywhere (AP ranking
and top-k selection), so every metric is deterministic.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.utils.data_formats import METRIC_COLUMNS, DataFormatValidator
from src.utils.errors import DimensionError, FormatError, LabelError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
DEFAULT_TOP_K = 3


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den > 0 else 0.0


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def ranking(scores) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def average_precision(scores, targets) -> Optional[float]:
    """
    Mean of precision@r over the ranks r that hold a positive.

    Returns ``None`` when there are no positives (the class is skipped).
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if scores.shape != targets.shape or scores.ndim != 1:
        raise DimensionError(f"scores {scores.shape} and targets {targets.shape} must be matching vectors")
    n_pos = targets.sum()
    if n_pos == 0:
        return None
    hits = targets[ranking(scores)]
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float((precision_at * hits).sum() / n_pos)


def _predictions_at_threshold(scores: np.ndarray, threshold: float) -> np.ndarray:
    return (scores >= threshold).astype(np.float64)


def _topk_predictions(scores: np.ndarray, k: int) -> np.ndarray:
    pred = np.zeros_like(scores)
    for i, row in enumerate(scores):
        pred[i, ranking(row)[:k]] = 1.0
    return pred


def _class_prf_from_predictions(pred: np.ndarray, targets: np.ndarray) -> Tuple[float, float, float]:
    tp = (pred * targets).sum(axis=0)
    n_pred = pred.sum(axis=0)
    n_true = targets.sum(axis=0)
    cp = float(np.mean([_ratio(t, p) for t, p in zip(tp, n_pred)]))
    cr = float(np.mean([_ratio(t, g) for t, g in zip(tp, n_true)]))
    return cp, cr, _f1(cp, cr)


def _overall_prf_from_predictions(pred: np.ndarray, targets: np.ndarray) -> Tuple[float, float, float]:
    tp = (pred * targets).sum()
    op = _ratio(tp, pred.sum())
    or_ = _ratio(tp, targets.sum())
    return op, or_, _f1(op, or_)


def _as_matrices(scores, targets) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if scores.ndim != 2 or scores.shape != targets.shape:
        raise DimensionError(f"scores {scores.shape} and targets {targets.shape} must be matching N×C matrices")
    return scores, targets


def class_prf(scores, targets, threshold: float = DEFAULT_THRESHOLD) -> Tuple[float, float, float]:
    """(CP, CR, CF1) with a class predicted positive iff score ≥ threshold."""
    scores, targets = _as_matrices(scores, targets)
    return _class_prf_from_predictions(_predictions_at_threshold(scores, threshold), targets)


def overall_prf(scores, targets, threshold: float = DEFAULT_THRESHOLD) -> Tuple[float, float, float]:
    """(OP, OR, OF1) from counts pooled over every (sample, class) pair."""
    scores, targets = _as_matrices(scores, targets)
    return _overall_prf_from_predictions(_predictions_at_threshold(scores, threshold), targets)


def topk_prf(scores, targets, k: int = DEFAULT_TOP_K) -> Dict[str, float]:
    """Class-wise and overall P/R/F1 when exactly the k best-scored classes of each sample are predicted."""
    scores, targets = _as_matrices(scores, targets)
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k must lie in [1, {scores.shape[1]}], got {k}")
    pred = _topk_predictions(scores, k)
    cp, cr, cf1 = _class_prf_from_predictions(pred, targets)
    op, or_, of1 = _overall_prf_from_predictions(pred, targets)
    return {"cp": cp, "cr": cr, "cf1": cf1, "op": op, "or": or_, "of1": of1}


@dataclass
class ScoreMatrix:
    """Scores and 0/1 targets for N samples × C classes."""

    scores: np.ndarray
    targets: np.ndarray
    label_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        self.scores, self.targets = _as_matrices(self.scores, self.targets)
        if not np.isin(self.targets, (0.0, 1.0)).all():
            raise LabelError("targets must be 0/1")
        if self.label_names is None:
            self.label_names = tuple(f"class{j}" for j in range(self.C))
        elif len(self.label_names) != self.C:
            raise DimensionError(f"{len(self.label_names)} label names for {self.C} classes")
        else:
            self.label_names = tuple(self.label_names)

    @property
    def N(self) -> int:
        return self.scores.shape[0]

    @property
    def C(self) -> int:
        return self.scores.shape[1]

    @classmethod
    def from_csv(cls, scores_path: Union[str, Path], targets_path: Union[str, Path]) -> "ScoreMatrix":
        """Read score and target CSVs (header row of class names, one row per sample)."""
        try:
            scores = pd.read_csv(scores_path)
            targets = pd.read_csv(targets_path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise FormatError(f"cannot read score matrices: {e}") from None
        if not DataFormatValidator.validate_score_frame(scores):
            raise FormatError(f"invalid score CSV {scores_path}")
        if not DataFormatValidator.validate_score_frame(targets, binary=True):
            raise FormatError(f"invalid target CSV {targets_path}")
        if list(scores.columns) != list(targets.columns):
            raise FormatError("score and target CSVs have different class headers")
        return cls(scores.to_numpy(dtype=np.float64), targets.to_numpy(dtype=np.float64),
                   tuple(str(c) for c in scores.columns))

    def to_frames(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        columns = list(self.label_names)
        return (pd.DataFrame(self.scores, columns=columns),
                pd.DataFrame(self.targets.astype(np.int64), columns=columns))


@dataclass
class MetricsReport:
    map: float
    cp: float
    cr: float
    cf1: float
    op: float
    or_: float
    of1: float
    map_top3: float
    cp_top3: float
    cr_top3: float
    cf1_top3: float
    op_top3: float
    or_top3: float
    of1_top3: float
    skipped_classes: int = 0

    def as_row(self) -> Dict[str, float]:
        """Values keyed by the fixed CSV column names."""
        values = asdict(self)
        values["or"] = values.pop("or_")
        row = {col: values[col] for col in METRIC_COLUMNS}
        row["skipped_classes"] = self.skipped_classes
        return row

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.as_row()], columns=METRIC_COLUMNS + ["skipped_classes"])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        logger.info(f"Saved metrics report: {path}")
        return path

    def summary(self) -> str:
        return (f"mAP {100 * self.map:.2f} | CF1 {100 * self.cf1:.2f} OF1 {100 * self.of1:.2f} | "
                f"top-3 CF1 {100 * self.cf1_top3:.2f} OF1 {100 * self.of1_top3:.2f}")


def per_class_ap(matrix: ScoreMatrix) -> pd.DataFrame:
    """One row per class: label, positive count and AP (NaN for classes without positives)."""
    rows = []
    for j, name in enumerate(matrix.label_names):
        ap = average_precision(matrix.scores[:, j], matrix.targets[:, j])
        rows.append({"label": name, "positives": int(matrix.targets[:, j].sum()),
                     "ap": np.nan if ap is None else ap})
    return pd.DataFrame(rows, columns=["label", "positives", "ap"])


def mean_average_precision(matrix: ScoreMatrix) -> Tuple[float, int]:
    """(mAP over classes with positives, number of skipped classes)."""
    aps: List[float] = []
    skipped = 0
    for j in range(matrix.C):
        ap = average_precision(matrix.scores[:, j], matrix.targets[:, j])
        if ap is None:
            skipped += 1
        else:
            aps.append(ap)
    if skipped:
        logger.warning(f"Skipped {skipped} of {matrix.C} classes without positives in mAP")
    return (float(np.mean(aps)) if aps else float("nan")), skipped


def evaluate(matrix: ScoreMatrix, threshold: float = DEFAULT_THRESHOLD, k: int = DEFAULT_TOP_K) -> MetricsReport:
    """Full report: mAP, thresholded P/R/F1 and top-k P/R/F1 (k clipped to C)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    mean_ap, skipped = mean_average_precision(matrix)
    cp, cr, cf1 = class_prf(matrix.scores, matrix.targets, threshold)
    op, or_, of1 = overall_prf(matrix.scores, matrix.targets, threshold)
    top = topk_prf(matrix.scores, matrix.targets, min(k, matrix.C))
    return MetricsReport(
        map=mean_ap, cp=cp, cr=cr, cf1=cf1, op=op, or_=or_, of1=of1,
        map_top3=mean_ap, cp_top3=top["cp"], cr_top3=top["cr"], cf1_top3=top["cf1"],
        op_top3=top["op"], or_top3=top["or"], of1_top3=top["of1"],
        skipped_classes=skipped,
    )


def aggregate_reports(runs: pd.DataFrame, by: Sequence[str], extra_columns: Sequence[str] = ()) -> pd.DataFrame:
    """Mean and standard deviation of every metric column (plus ``extra_columns``) grouped by ``by``; failed runs are left out."""
    ok = runs[runs["status"] == "ok"] if "status" in runs.columns else runs
    if ok.empty:
        return pd.DataFrame(columns=list(by))
    grouped = ok.groupby(list(by), sort=False)[METRIC_COLUMNS + list(extra_columns)]
    summary = grouped.agg(["mean", "std"])
    summary.columns = [f"{col}_{stat}" for col, stat in summary.columns]
    summary["n_runs"] = grouped.size()
    return summary.reset_index()
