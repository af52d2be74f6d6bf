"""
Deterministic stand-in for a frozen text encoder.

Label names and prompt templates are tokenised, every token is mapped to a
seeded vector, and a frozen two-layer perceptron encodes the mean of a token
sequence. Taking the mean makes the encoder insensitive to token order; it is
differentiable with respect to the input vectors, which is all soft prompts
need.
"""

import hashlib
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.autodiff.tensor import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    linear,
    mul,
    reshape,
    row_mean,
    stack_rows,
    tanh,
)
from src.utils.errors import ConfigError, DimensionError, EmptyInputError

logger = logging.getLogger(__name__)

HARD_PROMPT_TEMPLATE = "This photo contains [CLS]."
CLASS_SLOT = "[CLS]"
_TOKEN_PATTERN = re.compile(r"[^\W_]+")

DEFAULT_LABEL_NAMES = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck",
    "boat", "traffic light", "fire hydrant", "stop sign", "parking meter", "bench",
    "bird", "cat", "dog", "horse", "sheep", "cow",
)


def tokenize(text: str) -> List[str]:
    """Lowercase the text and split it on whitespace and punctuation."""
    if not text or not text.strip():
        raise EmptyInputError("cannot tokenize empty text")
    tokens = _TOKEN_PATTERN.findall(text.lower())
    if not tokens:
        raise EmptyInputError(f"text {text!r} contains no tokens")
    return tokens


@dataclass(frozen=True)
class LabelVocabulary:
    """C distinct label names."""

    names: Tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 1:
            raise ConfigError("a label vocabulary needs at least one name")
        seen = set()
        for name in self.names:
            if name in seen:
                raise ConfigError(f"duplicate label name {name!r}")
            seen.add(name)

    @property
    def C(self) -> int:
        return len(self.names)

    def permuted(self, order: Sequence[int]) -> "LabelVocabulary":
        return LabelVocabulary(tuple(self.names[i] for i in order))

    @classmethod
    def default(cls, C: int) -> "LabelVocabulary":
        """The built-in object names, extended with ``label<j>`` names past 20."""
        names = list(DEFAULT_LABEL_NAMES[:C])
        names.extend(f"label{j}" for j in range(len(names), C))
        return cls(tuple(names))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "LabelVocabulary":
        """One UTF-8 label name per line; blank lines are ignored."""
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            names = tuple(line.strip() for line in f if line.strip())
        logger.info(f"Loaded {len(names)} label names from {path}")
        return cls(names)


class TokenEmbeddingTable:
    """Seeded token -> vector map; a token always gets the same vector under one seed."""

    def __init__(self, d_tok: int, seed: int = 0):
        if d_tok < 1:
            raise ConfigError(f"token embedding width must be positive, got {d_tok}")
        self.d_tok = d_tok
        self.seed = seed
        self._cache: Dict[str, np.ndarray] = {}

    def vector(self, token: str) -> np.ndarray:
        if token not in self._cache:
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            rng = np.random.default_rng([self.seed, int.from_bytes(digest, "little")])
            self._cache[token] = rng.normal(0.0, 1.0 / np.sqrt(self.d_tok), size=self.d_tok)
        return self._cache[token]

    def embed(self, tokens: Sequence[str]) -> List[Tensor]:
        return [Tensor(self.vector(t)) for t in tokens]

    def word_embedding(self, name: str) -> np.ndarray:
        """The single word vector of a (possibly multi-word) label name: mean of its tokens."""
        return np.mean([self.vector(t) for t in tokenize(name)], axis=0)


class PseudoTextEncoder:
    """Frozen perceptron d_tok -> d_tok -> d with a tanh hidden layer."""

    def __init__(self, d_tok: int, d: int, seed: int = 0):
        rng = np.random.default_rng([seed, 0x7E47])
        self.d_tok = d_tok
        self.d = d
        # constants, not Parameters: the encoder never receives gradient updates
        self.W1 = Tensor(rng.normal(0.0, 1.0, size=(d_tok, d_tok)))
        self.b1 = Tensor(rng.normal(0.0, 0.1, size=d_tok))
        self.W2 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_tok), size=(d_tok, d)))
        self.b2 = Tensor(np.zeros(d))

    def encode(self, x: Tensor) -> Tensor:
        """Encode one [d_tok] vector or a batch [n×d_tok]."""
        x = as_tensor(x)
        single = x.data.ndim == 1
        if single:
            x = reshape(x, (1, -1))
        if x.shape[1] != self.d_tok:
            raise DimensionError(f"encoder expects width {self.d_tok}, got {x.shape}")
        out = linear(tanh(linear(x, self.W1, self.b1)), self.W2, self.b2)
        return reshape(out, (self.d,)) if single else out

    def weights(self) -> List[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]


class SoftPromptBank:
    """L learnable prompt tokens shared by every label."""

    def __init__(self, L: int, d_tok: int, rng: Optional[np.random.Generator] = None,
                 prefix: str = "cap.prompt"):
        if L < 0:
            raise ConfigError(f"prompt token count must be non-negative, got {L}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.L = L
        self.d_tok = d_tok
        self.prompts = [Parameter(f"{prefix}{l}", rng.normal(0.0, 0.02, size=d_tok)) for l in range(L)]

    def parameters(self) -> List[Parameter]:
        return list(self.prompts)

    def as_matrix(self) -> Optional[Tensor]:
        return stack_rows(self.prompts) if self.prompts else None


def encode_sequence(enc: PseudoTextEncoder, seq: Sequence[Tensor]) -> Tensor:
    """Encode the mean of a token-vector sequence into one [d] embedding."""
    if len(seq) == 0:
        raise EmptyInputError("cannot encode an empty token sequence")
    return enc.encode(row_mean(stack_rows(seq)))


def label_word_matrix(vocab: LabelVocabulary, table: TokenEmbeddingTable) -> Tensor:
    """Rows s_j: the word embedding of each label name, [C×d_tok]."""
    return Tensor(np.stack([table.word_embedding(name) for name in vocab.names]))


def build_hard_prompts(vocab: LabelVocabulary, table: TokenEmbeddingTable, enc: PseudoTextEncoder,
                       template: str = HARD_PROMPT_TEMPLATE) -> Tensor:
    """T_hard [C×d]: each label's name substituted into the hand-crafted template."""
    rows = [encode_sequence(enc, table.embed(tokenize(template.replace(CLASS_SLOT, name))))
            for name in vocab.names]
    return stack_rows(rows)


def build_name_embeddings(vocab: LabelVocabulary, table: TokenEmbeddingTable,
                          enc: PseudoTextEncoder) -> Tensor:
    """Embeddings of the bare label names, no template or prompts, [C×d]."""
    return stack_rows([encode_sequence(enc, table.embed(tokenize(name))) for name in vocab.names])


def encode_with_prompts(enc: PseudoTextEncoder, words: Tensor, prompts: Optional[Tensor]) -> Tensor:
    """
    Encode ``[p_1..p_L, s_j]`` for every label row s_j of ``words`` at once.

    Row j equals encode_sequence(enc, [p_1, ..., p_L, s_j]): the sequence mean
    is (Σ_l p_l + s_j) / (L + 1).
    """
    if prompts is None or prompts.shape[0] == 0:
        return enc.encode(words)
    if prompts.data.ndim != 2 or prompts.shape[1] != words.shape[1]:
        raise DimensionError(f"prompt tokens {prompts.shape} do not match word width {words.shape}")
    L = prompts.shape[0]
    prompt_sum = mul(row_mean(prompts), float(L))
    return enc.encode(mul(add(words, prompt_sum), 1.0 / (L + 1)))


def build_soft_prompts(vocab: LabelVocabulary, table: TokenEmbeddingTable, enc: PseudoTextEncoder,
                       bank: SoftPromptBank) -> Tensor:
    """T_soft [C×d]: the shared learnable prompts prepended to every label name."""
    return encode_with_prompts(enc, label_word_matrix(vocab, table), bank.as_matrix())
