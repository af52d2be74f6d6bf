"""
Head configuration: dimensions, mechanism toggles and the head mode.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Optional

from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)

HEAD_MODES = ("pvlr", "classifier_learning", "label_rep", "label_rep_dma")
PROMPTING_MODES = ("post", "pre")
CAP_PROMPT_SOURCES = ("soft", "hard")
INIT_SCHEMES = ("uniform", "identity")


@dataclass
class HeadConfig:
    """
    Dimensions and ablation toggles of the recognition head.

    ``C``, ``d`` and ``M`` are normally filled in from the dataset spec. The
    IFM toggles (channel interaction, relation aggregation) only act when both
    KAP and CAP are enabled. ``use_cap_visual=False`` keeps CAP but skips its
    cross-attention with X, so T_ca and M_ca become static.

    ``init_scheme="identity"`` starts Q/K at sqrt(attention_gain)·I and every
    value projection and the IFM output layer at zero; together with
    ``attention_residual`` each block then begins as a pass-through.
    """

    C: Optional[int] = None
    d: Optional[int] = None
    M: Optional[int] = None
    L: int = 4
    d_tok: Optional[int] = None
    use_kap: bool = True
    use_cap: bool = True
    use_channel_interaction: bool = True
    use_relation_aggregation: bool = True
    use_v2s: bool = True
    use_s2v: bool = True
    prompting_mode: str = "post"
    cap_prompts: str = "soft"
    head_mode: str = "pvlr"
    attention_residual: bool = False
    use_cap_visual: bool = True
    init_scheme: str = "uniform"
    attention_gain: float = 1.0

    @property
    def token_width(self) -> int:
        return self.d_tok if self.d_tok is not None else self.d

    @property
    def dual_prompting(self) -> bool:
        return self.use_kap and self.use_cap

    def validate(self) -> None:
        for name in ("C", "d", "M"):
            value = getattr(self, name)
            if value is None or value < 1:
                raise ConfigError(f"head.{name} must be a positive integer, got {value}")
        if self.L < 0:
            raise ConfigError(f"head.L must be non-negative, got {self.L}")
        if self.token_width < 1:
            raise ConfigError(f"head.d_tok must be positive, got {self.d_tok}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head.head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.prompting_mode not in PROMPTING_MODES:
            raise ConfigError(f"head.prompting_mode must be one of {PROMPTING_MODES}, got {self.prompting_mode!r}")
        if self.cap_prompts not in CAP_PROMPT_SOURCES:
            raise ConfigError(f"head.cap_prompts must be one of {CAP_PROMPT_SOURCES}, got {self.cap_prompts!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"head.init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")
        if self.attention_gain <= 0:
            raise ConfigError(f"head.attention_gain must be positive, got {self.attention_gain}")
        if self.head_mode == "pvlr" and not (self.use_kap or self.use_cap):
            raise ConfigError("pvlr head needs at least one of use_kap/use_cap")
        if self.prompting_mode == "pre":
            if self.cap_prompts != "soft":
                raise ConfigError("pre-interaction prompting needs soft prompts (cap_prompts=soft)")
            if self.token_width != self.d:
                raise ConfigError(
                    f"pre-interaction prompting attends tokens to visual features: d_tok ({self.token_width}) must equal d ({self.d})")
            if not self.use_cap_visual:
                raise ConfigError("pre-interaction prompting conditions on visual features; it needs use_cap_visual=true")
        if self.head_mode == "pvlr" and not self.dual_prompting and (
                self.use_channel_interaction or self.use_relation_aggregation):
            logger.debug("IFM toggles are inactive with a single prompting branch")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HeadConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown head config keys: {sorted(unknown)}")
        return cls(**data)
