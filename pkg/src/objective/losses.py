"""
Training objective: asymmetric classification loss, knowledge-to-context
regularisation (KCR) and their weighted sum.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Optional

import numpy as np

from src.autodiff.tensor import (
    Tensor,
    add,
    as_tensor,
    clamp_min,
    cosine_rows,
    log,
    mean_all,
    mul,
    power,
    sub,
)
from src.utils.errors import ConfigError, DimensionError, LabelError

logger = logging.getLogger(__name__)


@dataclass
class LossConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 2.0
    lambda_kcr: float = 4.0
    prob_clip_eps: float = 1e-8

    def validate(self) -> None:
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ConfigError(f"focusing exponents must be >= 0, got {self.gamma_pos}, {self.gamma_neg}")
        if self.lambda_kcr < 0:
            raise ConfigError(f"loss.lambda_kcr must be >= 0, got {self.lambda_kcr}")
        if not 0.0 < self.prob_clip_eps < 0.5:
            raise ConfigError(f"loss.prob_clip_eps must lie in (0, 0.5), got {self.prob_clip_eps}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LossConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**data)


def check_targets(y, C: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (C,):
        raise DimensionError(f"targets have shape {y.shape}, expected ({C},)")
    if not np.isin(y, (0.0, 1.0)).all():
        raise LabelError(f"targets must be 0/1, got values {np.unique(y)}")
    return y


def asl_loss(probs: Tensor, y, cfg: Optional[LossConfig] = None) -> Tensor:
    """
    Asymmetric loss averaged over the C labels:

        −(1/C) Σ_j [ y_j (1−p_j)^γ⁺ log p_j + (1−y_j) p_j^γ⁻ log(1−p_j) ]

    Log arguments are clamped at ``prob_clip_eps``. No negative probability
    shift is applied.
    """
    cfg = cfg or LossConfig()
    probs = as_tensor(probs)
    if probs.data.ndim != 1:
        raise DimensionError(f"asl_loss expects a probability vector, got shape {probs.shape}")
    y = check_targets(y, probs.shape[0])
    eps = cfg.prob_clip_eps
    complement = sub(1.0, probs)
    positive = mul(power(complement, cfg.gamma_pos), log(clamp_min(probs, eps)))
    negative = mul(power(probs, cfg.gamma_neg), log(clamp_min(complement, eps)))
    per_label = add(mul(Tensor(y), positive), mul(Tensor(1.0 - y), negative))
    return mul(mean_all(per_label), -1.0)


def kcr_loss(T_ka: Tensor, T_ca: Tensor) -> Tensor:
    """(1/C) Σ_j (1 − cos(t_j^ka, t_j^ca)); lies in [0, 2]."""
    return mean_all(sub(1.0, cosine_rows(T_ka, T_ca)))


def total_loss(cls: Tensor, kcr: Optional[Tensor], cfg: Optional[LossConfig] = None) -> Tensor:
    """cls + λ·kcr. With λ = 0 (or no KCR term) the classification loss is returned unchanged."""
    cfg = cfg or LossConfig()
    if kcr is None or cfg.lambda_kcr == 0.0:
        return cls
    return add(cls, mul(kcr, cfg.lambda_kcr))
