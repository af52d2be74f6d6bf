"""
Finite-difference gradient oracle.

Compares central differences (f(θ+h) − f(θ−h)) / 2h against the gradients
``backward`` produces, parameter by parameter.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.autodiff.tensor import Parameter, Tensor, backward, no_grad, zero_grads
from src.utils.errors import ContractError, DeterminismError

logger = logging.getLogger(__name__)

DEFAULT_RELATIVE_STEP = 1e-5
ERROR_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    """Maximum relative error per parameter name."""

    max_rel_error: Dict[str, float] = field(default_factory=dict)
    worst_index: Dict[str, Tuple[int, ...]] = field(default_factory=dict)

    def worst(self) -> Tuple[str, float]:
        if not self.max_rel_error:
            return "", 0.0
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]

    def passed(self, tolerance: float) -> bool:
        return all(err <= tolerance for err in self.max_rel_error.values())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"parameter": name, "max_rel_error": err, "worst_index": str(self.worst_index.get(name, ()))}
             for name, err in self.max_rel_error.items()]
        )


def relative_error(numeric: float, analytic: float) -> float:
    return abs(numeric - analytic) / max(ERROR_FLOOR, abs(numeric), abs(analytic))


def finite_diff_check(f: Callable[[Sequence[Parameter]], Tensor], params: Sequence[Parameter],
                      h: Optional[float] = None,
                      relative_step: float = DEFAULT_RELATIVE_STEP) -> GradCheckReport:
    """
    Check autodiff gradients of a scalar function against central differences.

    ``f`` receives ``params`` and must return a scalar tensor built from them.
    With ``h`` unset the step is ``relative_step * max(1, |θ_i|)`` per entry.
    Raises DeterminismError when two baseline evaluations are not bit-identical.
    """
    names = [getattr(p, "name", f"param{i}") for i, p in enumerate(params)]
    if len(set(names)) != len(names):
        raise ContractError("finite_diff_check needs uniquely named parameters")
    if h is not None and h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")

    zero_grads(params)
    baseline = f(params)
    if baseline.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {baseline.shape}")
    with no_grad():
        repeat = f(params)
    if not np.array_equal(baseline.data, repeat.data):
        raise DeterminismError(
            f"function is not deterministic: {baseline.item()!r} then {repeat.item()!r}")
    backward(baseline)

    report = GradCheckReport()
    for name, param in zip(names, params):
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        worst, worst_idx = 0.0, ()
        for idx in np.ndindex(param.shape):
            original = param.data[idx]
            step = h if h is not None else relative_step * max(1.0, abs(original))
            try:
                with no_grad():
                    param.data[idx] = original + step
                    f_plus = f(params).item()
                    param.data[idx] = original - step
                    f_minus = f(params).item()
            finally:
                param.data[idx] = original
            err = relative_error((f_plus - f_minus) / (2.0 * step), float(analytic[idx]))
            if err > worst:
                worst, worst_idx = err, idx
        report.max_rel_error[name] = worst
        report.worst_index[name] = worst_idx
    name, err = report.worst()
    logger.info(f"Gradient check over {len(params)} parameters: worst {name} rel err {err:.3e}")
    return report
