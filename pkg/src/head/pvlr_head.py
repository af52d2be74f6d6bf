"""
The PVLR recognition head.

Label representations are built from two prompting branches and refined
against the visual features of one sample:

    KAP   T_ka, M_ka = Self-Attn(T_hard)                      static per run
    CAP   T'_soft = Cross-Attn(T_soft, X); T_ca, M_ca = Self-Attn(T'_soft)
    IFM   T_ca <- T_ca + MLP([T_ka, T_ca])
          T = (α M_ka + (1 − α) M_ca) T_ca
    DMA   T_vs = Cross-Attn(T, X);  x_sv = GAP(Cross-Attn(X, T))
    p_j = sigmoid(<x_sv, T_vs[j]>)

Every mechanism can be switched off for ablations, and three reference heads
("classifier learning", "label rep.", "label rep. + DMA") share the module.
"""

import logging
import math
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.attention.attention import AttentionBlock, AttentionResult, cross_attention, self_attention
from src.autodiff.tensor import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    concat_cols,
    linear,
    matmul,
    mul,
    relu,
    row_mean,
    sigmoid,
    sub,
)
from src.head.config import HeadConfig
from src.text.text_sim import (
    LabelVocabulary,
    PseudoTextEncoder,
    SoftPromptBank,
    TokenEmbeddingTable,
    build_hard_prompts,
    build_name_embeddings,
    encode_with_prompts,
    label_word_matrix,
)
from src.utils.errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named component, so adding a component never shifts another's init."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


class AlphaParam:
    """Blend weight α = sigmoid(raw); raw starts at 0 so α starts at 0.5."""

    def __init__(self, name: str = "ifm.alpha_raw", raw: float = 0.0):
        self.raw = Parameter(name, raw)

    def value(self) -> Tensor:
        return sigmoid(self.raw)

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + math.exp(-float(self.raw.data))))

    def parameters(self) -> List[Parameter]:
        return [self.raw]


class IfmMlp:
    """Channel-interaction perceptron 2d -> d -> d with a ReLU hidden layer."""

    def __init__(self, name: str, d: int, rng: np.random.Generator, zero_output: bool = False):
        self.d = d
        b1, b2 = 1.0 / math.sqrt(2 * d), 1.0 / math.sqrt(d)
        self.W1 = Parameter(f"{name}.W1", rng.uniform(-b1, b1, size=(2 * d, d)))
        self.b1 = Parameter(f"{name}.b1", np.zeros(d))
        W2 = rng.uniform(-b2, b2, size=(d, d))
        self.W2 = Parameter(f"{name}.W2", np.zeros_like(W2) if zero_output else W2)
        self.b2 = Parameter(f"{name}.b2", np.zeros(d))

    def __call__(self, Z: Tensor) -> Tensor:
        if Z.data.ndim != 2 or Z.shape[1] != 2 * self.d:
            raise DimensionError(f"IFM MLP expects [C×{2 * self.d}], got {Z.shape}")
        return linear(relu(linear(Z, self.W1, self.b1)), self.W2, self.b2)

    def parameters(self) -> List[Parameter]:
        return [self.W1, self.b1, self.W2, self.b2]


@dataclass
class DmaResult:
    T_vs: Tensor
    x_sv: Tensor
    v2s_map: Optional[Tensor] = None
    s2v_map: Optional[Tensor] = None


@dataclass
class HeadOutput:
    """Per-sample probabilities plus every intermediate the tests and map export inspect."""

    probs: Tensor
    T: Tensor
    T_vs: Tensor
    x_sv: Tensor
    T_ka: Optional[Tensor] = None
    M_ka: Optional[Tensor] = None
    T_cap: Optional[Tensor] = None
    T_ca: Optional[Tensor] = None
    M_ca: Optional[Tensor] = None
    M_blend: Optional[Tensor] = None
    T_soft: Optional[Tensor] = None
    v2s_map: Optional[Tensor] = None
    s2v_map: Optional[Tensor] = None
    cls_map: Optional[Tensor] = None

    def maps(self) -> Dict[str, Tensor]:
        candidates = {
            "M_ka": self.M_ka, "M_ca": self.M_ca, "M_blend": self.M_blend,
            "v2s": self.v2s_map, "s2v": self.s2v_map, "cls": self.cls_map,
        }
        return {name: m for name, m in candidates.items() if m is not None}


@dataclass
class SharedState:
    """Sample-independent part of a forward pass, computed once per batch."""

    kap: Optional[AttentionResult] = None
    T_soft: Optional[Tensor] = None


# --- Head operations ---

def kap_forward(block: AttentionBlock, T_hard: Tensor) -> Tuple[Tensor, Tensor]:
    result = self_attention(block, T_hard)
    return result.output, result.map


def cap_forward(cross_block: Optional[AttentionBlock], self_block: AttentionBlock,
                T_soft: Tensor, X: Tensor) -> Tuple[Tensor, Tensor]:
    """Condition T_soft on X, then relate the labels; without a cross block T'_soft = T_soft."""
    conditioned = cross_attention(cross_block, T_soft, X).output if cross_block is not None else T_soft
    result = self_attention(self_block, conditioned)
    return result.output, result.map


def pre_interaction_prompts(block: AttentionBlock, queries: Optional[Tensor], X: Tensor) -> Optional[Tensor]:
    """Per-sample prompt tokens generated from learnable queries attending to X; None when L=0."""
    if queries is None or queries.shape[0] == 0:
        return None
    return cross_attention(block, queries, X).output


def ifm_interact(mlp: IfmMlp, T_ka: Tensor, T_ca: Tensor) -> Tensor:
    if T_ka.shape != T_ca.shape:
        raise DimensionError(f"IFM inputs differ in shape: {T_ka.shape} vs {T_ca.shape}")
    return add(T_ca, mlp(concat_cols(T_ka, T_ca)))


def relation_aggregate(alpha: AlphaParam, M_ka: Tensor, M_ca: Tensor, T_ca: Tensor) -> Tuple[Tensor, Tensor]:
    """(α M_ka + (1 − α) M_ca) T_ca; returns the representations and the blended map."""
    C = T_ca.shape[0]
    if M_ka.shape != (C, C) or M_ca.shape != (C, C):
        raise DimensionError(f"relation maps {M_ka.shape}/{M_ca.shape} do not match {C} labels")
    a = alpha.value()
    blended = add(mul(a, M_ka), mul(sub(1.0, a), M_ca))
    return matmul(blended, T_ca), blended


def dma_forward(v2s_block: AttentionBlock, s2v_block: AttentionBlock, T: Tensor, X: Tensor,
                use_v2s: bool = True, use_s2v: bool = True) -> DmaResult:
    result = DmaResult(T_vs=T, x_sv=None)
    if use_v2s:
        v2s = cross_attention(v2s_block, T, X)
        result.T_vs, result.v2s_map = v2s.output, v2s.map
    if use_s2v:
        s2v = cross_attention(s2v_block, X, T)
        result.x_sv, result.s2v_map = row_mean(s2v.output), s2v.map
    else:
        result.x_sv = row_mean(X)
    return result


def predict(x_sv: Tensor, T_vs: Tensor) -> Tensor:
    """p_j = sigmoid(<x_sv, T_vs[j]>): the label representations act as category centers."""
    x_sv, T_vs = as_tensor(x_sv), as_tensor(T_vs)
    if x_sv.data.ndim != 1 or T_vs.data.ndim != 2 or T_vs.shape[1] != x_sv.shape[0]:
        raise DimensionError(f"predict: visual vector {x_sv.shape} vs centers {T_vs.shape}")
    return sigmoid(matmul(T_vs, x_sv))


class PvlrHead:
    """
    Owns the parameters of one head configuration and runs per-sample forwards.

    Only the components the configuration uses are created; each draws its
    initial weights from a generator keyed by its own name.
    """

    def __init__(self, config: HeadConfig, vocab: LabelVocabulary, table: TokenEmbeddingTable,
                 encoder: PseudoTextEncoder, seed: int = 0):
        config.validate()
        if vocab.C != config.C:
            raise ConfigError(f"vocabulary has {vocab.C} labels, head expects {config.C}")
        if table.d_tok != config.token_width or encoder.d_tok != config.token_width or encoder.d != config.d:
            raise ConfigError("token table / encoder widths do not match the head config")
        self.config = config
        self.vocab = vocab
        self.table = table
        self.encoder = encoder
        self.seed = seed
        d, C = config.d, config.C
        identity_init = config.init_scheme == "identity"

        def block(name: str) -> AttentionBlock:
            return AttentionBlock(name, d, component_rng(seed, name), residual=config.attention_residual,
                                  init=config.init_scheme, gain=config.attention_gain)

        # static text inputs, cached for the whole run
        self.T_hard = build_hard_prompts(vocab, table, encoder)
        self.T_name = build_name_embeddings(vocab, table, encoder)
        self.words = label_word_matrix(vocab, table)

        self.kap_block = self.cap_cross = self.cap_self = self.pre_cross = None
        self.prompt_bank: Optional[SoftPromptBank] = None
        self.prompt_queries: Optional[Parameter] = None
        self.ifm: Optional[IfmMlp] = None
        self.alpha: Optional[AlphaParam] = None
        self.v2s_block = self.s2v_block = self.cls_block = None
        self.cls_W = self.cls_b = self.w_vis = None

        mode = config.head_mode
        if mode == "pvlr":
            if config.use_kap:
                self.kap_block = block("kap")
            if config.use_cap:
                if config.use_cap_visual:
                    self.cap_cross = block("cap.cross")
                self.cap_self = block("cap.self")
                if config.cap_prompts == "soft" and config.prompting_mode == "post":
                    self.prompt_bank = SoftPromptBank(config.L, config.token_width,
                                                      component_rng(seed, "cap.prompt"))
                elif config.prompting_mode == "pre" and config.L > 0:
                    self.prompt_queries = Parameter(
                        "cap.queries", component_rng(seed, "cap.queries").normal(0.0, 0.02, size=(config.L, d)))
                    self.pre_cross = block("cap.pre_cross")
            if config.dual_prompting:
                if config.use_channel_interaction:
                    self.ifm = IfmMlp("ifm.mlp", d, component_rng(seed, "ifm.mlp"), zero_output=identity_init)
                if config.use_relation_aggregation:
                    self.alpha = AlphaParam()
        if mode in ("pvlr", "label_rep_dma"):
            if config.use_v2s or mode == "label_rep_dma":
                self.v2s_block = block("dma.v2s")
            if config.use_s2v or mode == "label_rep_dma":
                self.s2v_block = block("dma.s2v")
        if mode == "classifier_learning":
            bound = 1.0 / math.sqrt(d)
            self.cls_block = block("cls.cross")
            self.cls_W = Parameter("cls.W", component_rng(seed, "cls.W").uniform(-bound, bound, size=(C, d)))
            self.cls_b = Parameter("cls.b", np.zeros(C))
        if mode == "label_rep":
            self.w_vis = Parameter("label_rep.w_vis", np.ones(d))
        logger.info(f"Built {mode} head with {sum(p.size for p in self.parameters())} parameters "
                    f"({len(self.parameters())} tensors)")

    def attention_blocks(self) -> List[AttentionBlock]:
        return [blk for blk in (self.kap_block, self.cap_cross, self.cap_self, self.pre_cross,
                                self.v2s_block, self.s2v_block, self.cls_block) if blk is not None]

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for blk in self.attention_blocks():
            params.extend(blk.parameters())
        if self.prompt_bank is not None:
            params.extend(self.prompt_bank.parameters())
        if self.prompt_queries is not None:
            params.append(self.prompt_queries)
        if self.ifm is not None:
            params.extend(self.ifm.parameters())
        if self.alpha is not None:
            params.extend(self.alpha.parameters())
        for p in (self.cls_W, self.cls_b, self.w_vis):
            if p is not None:
                params.append(p)
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    # --- forward ---

    def prepare(self) -> SharedState:
        """Compute the X-independent parts (KAP and post-mode soft prompts) once per batch."""
        cfg = self.config
        state = SharedState()
        if cfg.head_mode != "pvlr":
            return state
        if cfg.use_kap:
            state.kap = self_attention(self.kap_block, self.T_hard)
        if cfg.use_cap and cfg.prompting_mode == "post":
            if cfg.cap_prompts == "hard":
                state.T_soft = self.T_hard
            else:
                state.T_soft = encode_with_prompts(self.encoder, self.words, self.prompt_bank.as_matrix())
        return state

    def _check_features(self, X: Tensor) -> Tensor:
        X = as_tensor(X)
        if X.data.ndim != 2 or X.shape[1] != self.config.d:
            raise DimensionError(f"visual features must be [M×{self.config.d}], got {X.shape}")
        return X

    def forward(self, X: Tensor, shared: Optional[SharedState] = None) -> HeadOutput:
        """Run the configured head on one sample's feature grid X [M×d]."""
        X = self._check_features(X)
        if self.config.head_mode != "pvlr":
            return self.baseline_forward(X)
        cfg = self.config
        shared = shared if shared is not None else self.prepare()
        out: Dict[str, Optional[Tensor]] = {}

        if cfg.use_kap:
            out["T_ka"], out["M_ka"] = shared.kap.output, shared.kap.map
        if cfg.use_cap:
            if cfg.prompting_mode == "pre":
                prompts = pre_interaction_prompts(self.pre_cross, self.prompt_queries, X)
                T_soft = encode_with_prompts(self.encoder, self.words, prompts)
            else:
                T_soft = shared.T_soft
            out["T_soft"] = T_soft
            out["T_cap"], out["M_ca"] = cap_forward(self.cap_cross, self.cap_self, T_soft, X)

        if cfg.dual_prompting:
            T_ca = ifm_interact(self.ifm, out["T_ka"], out["T_cap"]) if self.ifm is not None else out["T_cap"]
            out["T_ca"] = T_ca
            if self.alpha is not None:
                T, out["M_blend"] = relation_aggregate(self.alpha, out["M_ka"], out["M_ca"], T_ca)
            else:
                T = T_ca
        elif cfg.use_kap:
            T = out["T_ka"]
        else:
            T = out["T_ca"] = out["T_cap"]

        dma = dma_forward(self.v2s_block, self.s2v_block, T, X, cfg.use_v2s, cfg.use_s2v)
        return HeadOutput(probs=predict(dma.x_sv, dma.T_vs), T=T, T_vs=dma.T_vs, x_sv=dma.x_sv,
                          v2s_map=dma.v2s_map, s2v_map=dma.s2v_map, **out)

    def baseline_forward(self, X: Tensor) -> HeadOutput:
        """Reference heads built on the bare label-name embeddings."""
        mode = self.config.head_mode
        X = self._check_features(X)
        T = self.T_name
        if mode == "classifier_learning":
            attended = cross_attention(self.cls_block, T, X)
            # C independent linear scores over the attended label queries
            scores = add(matmul(mul(attended.output, self.cls_W), Tensor(np.ones(self.config.d))), self.cls_b)
            x_mean = row_mean(X)
            return HeadOutput(probs=sigmoid(scores), T=T, T_vs=attended.output, x_sv=x_mean,
                              cls_map=attended.map)
        if mode == "label_rep":
            # one scale per channel, shared by every label
            x_sv = mul(row_mean(X), self.w_vis)
            return HeadOutput(probs=predict(x_sv, T), T=T, T_vs=T, x_sv=x_sv)
        if mode == "label_rep_dma":
            dma = dma_forward(self.v2s_block, self.s2v_block, T, X, True, True)
            return HeadOutput(probs=predict(dma.x_sv, dma.T_vs), T=T, T_vs=dma.T_vs, x_sv=dma.x_sv,
                              v2s_map=dma.v2s_map, s2v_map=dma.s2v_map)
        raise ConfigError(f"baseline_forward does not handle head mode {mode!r}")


def head_forward(head: PvlrHead, X: Tensor, shared: Optional[SharedState] = None) -> HeadOutput:
    return head.forward(X, shared)


def baseline_forward(head: PvlrHead, X: Tensor) -> HeadOutput:
    return head.baseline_forward(X)
