"""
Checkpoints: live parameters, EMA shadows and AdamW moments in the PVLR
tensor container, with the run config and progress in the JSON header.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from src.utils.errors import FormatError
from src.utils.wire import read_tensor_file, write_tensor_file

logger = logging.getLogger(__name__)

_GROUPS = ("param", "ema", "adam.m", "adam.v")


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    params: Dict[str, np.ndarray]
    ema: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    adam_step: int = 0

    def tensors(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for group, values in zip(_GROUPS, (self.params, self.ema, self.adam_m, self.adam_v)):
            for name, array in values.items():
                out[f"{group}/{name}"] = array
        return out


def save_checkpoint(path: Union[str, Path], state: Checkpoint) -> Path:
    header = {"kind": "checkpoint", "config": state.config, "step": state.step, "adam_step": state.adam_step}
    return write_tensor_file(path, header, state.tensors())


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path} holds a {header.get('kind')!r} payload, not a checkpoint")
    groups: Dict[str, Dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    for key, array in tensors.items():
        group, _, name = key.partition("/")
        if group not in groups or not name:
            raise FormatError(f"unexpected tensor {key!r} in checkpoint {path}")
        groups[group][name] = array
    state = Checkpoint(config=header.get("config") or {}, params=groups["param"], ema=groups["ema"],
                       adam_m=groups["adam.m"], adam_v=groups["adam.v"],
                       step=int(header.get("step", 0)), adam_step=int(header.get("adam_step", 0)))
    logger.info(f"Loaded checkpoint {path} at step {state.step} ({len(state.params)} parameters)")
    return state
