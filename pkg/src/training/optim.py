"""
AdamW with decoupled weight decay, the cosine learning-rate policy, and an
exponential moving average of the parameters for evaluation.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.autodiff.tensor import Parameter
from src.utils.errors import ContractError

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """First/second moment estimates per parameter name and the number of steps taken."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: Sequence[Parameter]) -> "AdamWState":
        return cls(m={p.name: np.zeros_like(p.data) for p in params},
                   v={p.name: np.zeros_like(p.data) for p in params})


def adamw_step(params: Sequence[Parameter], state: AdamWState, lr: float,
               betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-2,
               grads: Optional[Mapping[str, np.ndarray]] = None) -> AdamWState:
    """
    One AdamW update, in place.

    Weight decay is applied to θ on its own (θ ← θ·(1 − lr·wd)) before the
    bias-corrected moment step. Gradients default to each parameter's
    ``grad`` buffer; a parameter without one is a contract violation.
    """
    gradients = {}
    for p in params:
        g = grads.get(p.name) if grads is not None else p.grad
        if g is None:
            raise ContractError(f"parameter {p.name} has no gradient; call backward before adamw_step")
        if g.shape != p.data.shape or p.name not in state.m:
            raise ContractError(f"optimizer state does not match parameter {p.name} {p.shape}")
        gradients[p.name] = g

    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for p in params:
        g = gradients[p.name]
        m = state.m[p.name] = beta1 * state.m[p.name] + (1.0 - beta1) * g
        v = state.v[p.name] = beta2 * state.v[p.name] + (1.0 - beta2) * g * g
        decayed = p.data * (1.0 - lr * weight_decay)
        p.data = np.asarray(decayed - lr * (m / bias1) / (np.sqrt(v / bias2) + eps))
    return state


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total_steps))."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class EmaState:
    """Shadow copy of every parameter, decayed towards the live values after each step."""

    decay: float
    shadow: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: Sequence[Parameter], decay: float) -> "EmaState":
        return cls(decay=decay, shadow={p.name: p.data.copy() for p in params})

    @contextmanager
    def swapped_in(self, params: Sequence[Parameter]) -> Iterator[None]:
        """Temporarily load shadow values into ``params``; live values are restored exactly on exit."""
        live = {}
        for p in params:
            self._check(p)
            live[p.name] = p.data
            p.data = self.shadow[p.name].copy()
        try:
            yield
        finally:
            for p in params:
                p.data = live[p.name]

    def _check(self, p: Parameter) -> None:
        if p.name not in self.shadow or self.shadow[p.name].shape != p.data.shape:
            raise ContractError(f"EMA shadow does not mirror parameter {p.name} {p.shape}")


def ema_update(ema: EmaState, params: Sequence[Parameter]) -> EmaState:
    """shadow ← β·shadow + (1 − β)·θ, elementwise."""
    beta = ema.decay
    for p in params:
        ema._check(p)
        ema.shadow[p.name] = np.asarray(beta * ema.shadow[p.name] + (1.0 - beta) * p.data)
    return ema
