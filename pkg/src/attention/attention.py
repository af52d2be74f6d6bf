"""
Single-head scaled dot-product attention that always returns its attention map.

    Self-Attn(E)     = softmax(E W_Q (E W_K)^T / sqrt(d)) E W_V
    Cross-Attn(E, Z) = softmax(E W_Q (Z W_K)^T / sqrt(d)) Z W_V

No output projection, normalisation or residual is applied unless the block
was built with ``residual=True``.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from src.autodiff.tensor import Parameter, Tensor, add, as_tensor, matmul, softmax_rows, transpose
from src.utils.errors import ConfigError, DimensionError, EmptyInputError

logger = logging.getLogger(__name__)


@dataclass
class AttentionResult:
    """Attended values [n×d] plus the row-stochastic map [n×m] that produced them."""

    output: Tensor
    map: Tensor


ATTENTION_INITS = ("uniform", "identity")


class AttentionBlock:
    """
    Query/key/value projections of width d.

    ``init="uniform"`` draws every entry uniformly in ±1/sqrt(d). ``init="identity"``
    sets W_Q = W_K = sqrt(gain)·I, so the logits are ``gain`` times the scaled
    dot product of the raw inputs, and starts W_V at zero; with ``residual=True``
    such a block begins as the identity map on its queries.
    """

    def __init__(self, name: str, d: int, rng: Optional[np.random.Generator] = None,
                 residual: bool = False, init: str = "uniform", gain: float = 1.0):
        if d < 1:
            raise DimensionError(f"attention width must be positive, got {d}")
        if init not in ATTENTION_INITS:
            raise ConfigError(f"attention init must be one of {ATTENTION_INITS}, got {init!r}")
        if gain <= 0:
            raise ConfigError(f"attention gain must be positive, got {gain}")
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(d)
        self.name = name
        self.d = d
        self.scale = 1.0 / math.sqrt(d)
        self.residual = residual
        if init == "identity":
            W_QK = math.sqrt(gain) * np.eye(d)
            self.W_Q = Parameter(f"{name}.W_Q", W_QK)
            self.W_K = Parameter(f"{name}.W_K", W_QK.copy())
            self.W_V = Parameter(f"{name}.W_V", np.zeros((d, d)))
        else:
            self.W_Q = Parameter(f"{name}.W_Q", rng.uniform(-bound, bound, size=(d, d)))
            self.W_K = Parameter(f"{name}.W_K", rng.uniform(-bound, bound, size=(d, d)))
            self.W_V = Parameter(f"{name}.W_V", rng.uniform(-bound, bound, size=(d, d)))

    def parameters(self) -> List[Parameter]:
        return [self.W_Q, self.W_K, self.W_V]

    def _check(self, x: Tensor, role: str) -> None:
        if x.data.ndim != 2 or x.shape[1] != self.d:
            raise DimensionError(f"{self.name}: {role} has shape {x.shape}, block width is {self.d}")
        if x.shape[0] == 0:
            raise EmptyInputError(f"{self.name}: {role} has no rows")

    def attend(self, queries: Tensor, context: Tensor) -> AttentionResult:
        queries, context = as_tensor(queries), as_tensor(context)
        self._check(queries, "query input")
        self._check(context, "key/value input")
        q = matmul(queries, self.W_Q)
        k = matmul(context, self.W_K)
        v = matmul(context, self.W_V)
        attn = softmax_rows(matmul(q, transpose(k)) * self.scale)
        out = matmul(attn, v)
        if self.residual:
            out = add(out, queries)
        return AttentionResult(output=out, map=attn)


def self_attention(block: AttentionBlock, E: Tensor) -> AttentionResult:
    return block.attend(E, E)


def cross_attention(block: AttentionBlock, E: Tensor, Z: Tensor) -> AttentionResult:
    """Queries from E, keys and values from Z; the map is [len(E) × len(Z)]."""
    return block.attend(E, Z)
