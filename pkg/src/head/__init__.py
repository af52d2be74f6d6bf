from src.head.config import HEAD_MODES, HeadConfig
from src.head.pvlr_head import (
    AlphaParam,
    HeadOutput,
    IfmMlp,
    PvlrHead,
    baseline_forward,
    cap_forward,
    dma_forward,
    head_forward,
    ifm_interact,
    kap_forward,
    pre_interaction_prompts,
    predict,
    relation_aggregate,
)
