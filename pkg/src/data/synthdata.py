"""
Seeded synthetic multi-label dataset.

Labels come from a scene mixture: a latent scene is drawn from a prior and
each label switches on independently with a scene-specific probability, which
gives ground-truth co-occurrence structure. Visual feature grids plant each
positive label's prototype into a few token slots over Gaussian background
noise. Prototypes are a fixed linear image of the pseudo-text embedding of the
label name, so the language branch carries usable label semantics.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.autodiff.tensor import Tensor
from src.text.text_sim import LabelVocabulary, PseudoTextEncoder, TokenEmbeddingTable, build_name_embeddings
from src.utils.data_formats import FileNamingConventions
from src.utils.errors import CapacityError, ConfigError, UnsatisfiableError
from src.utils.wire import read_tensor_file, write_tensor_file

logger = logging.getLogger(__name__)

# Stream identifiers for SeedSequence spawning
_SCENE_STREAM, _PROTO_STREAM, _TRAIN_STREAM, _TEST_STREAM = 0, 1, 2, 3
MAX_LABEL_DRAWS = 10_000


@dataclass
class DatasetSpec:
    C: int = 20
    d: int = 32
    M: int = 16
    K: int = 5
    n_train: int = 2000
    n_test: int = 1000
    seed: int = 0
    noise_sigma: float = 0.3
    n_pl: int = 2
    core_labels: int = 4
    core_prob: float = 0.8
    background_prob: float = 0.03
    prototype_noise: float = 0.1
    mixing_scale: float = 0.5
    prototype_norm: float = 3.0
    text_seed: int = 0
    vocabulary: Optional[str] = None
    workers: int = 1

    def validate(self) -> None:
        for name in ("C", "d", "M", "K", "n_train", "n_test", "n_pl", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dataset.{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_sigma < 0 or self.prototype_noise < 0 or self.mixing_scale < 0:
            raise ConfigError("dataset noise and mixing scales must be non-negative")
        if self.prototype_norm <= 0:
            raise ConfigError(f"dataset.prototype_norm must be positive, got {self.prototype_norm}")
        for name in ("core_prob", "background_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"dataset.{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 1 <= self.core_labels <= self.C:
            raise ConfigError(f"dataset.core_labels must lie in [1, C], got {self.core_labels}")
        if self.n_pl > self.M:
            raise ConfigError(f"dataset.n_pl ({self.n_pl}) exceeds the token grid ({self.M})")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetSpec":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**data)

    def load_vocabulary(self) -> LabelVocabulary:
        vocab = LabelVocabulary.from_file(self.vocabulary) if self.vocabulary else LabelVocabulary.default(self.C)
        if vocab.C != self.C:
            raise ConfigError(f"vocabulary {self.vocabulary} has {vocab.C} names, dataset.C is {self.C}")
        return vocab


@dataclass
class SceneModel:
    """K scenes with label activation probabilities q [K×C] and prior π [K]."""

    q: np.ndarray
    prior: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if self.q.ndim != 2 or self.prior.shape != (self.q.shape[0],):
            raise ConfigError(f"scene model shapes disagree: q {self.q.shape}, prior {self.prior.shape}")
        if (self.q < 0).any() or (self.q > 1).any():
            raise ConfigError("scene activation probabilities must lie in [0, 1]")
        if (self.prior < 0).any() or not np.isclose(self.prior.sum(), 1.0):
            raise ConfigError("scene prior must be a probability vector")

    @property
    def K(self) -> int:
        return self.q.shape[0]

    @property
    def C(self) -> int:
        return self.q.shape[1]

    @classmethod
    def random(cls, spec: DatasetSpec, rng: np.random.Generator) -> "SceneModel":
        q = np.full((spec.K, spec.C), spec.background_prob)
        for k in range(spec.K):
            q[k, rng.choice(spec.C, size=spec.core_labels, replace=False)] = spec.core_prob
        prior = rng.dirichlet(np.full(spec.K, 5.0))
        return cls(q=q, prior=prior)

    def nonempty_probability(self) -> float:
        """P(at least one label is on) under the unconditioned model."""
        return float(self.prior @ (1.0 - np.prod(1.0 - self.q, axis=1)))

    def label_marginals(self) -> np.ndarray:
        """P(y_j = 1 | Σy ≥ 1): the marginals of sample_labels' output."""
        return (self.prior @ self.q) / self.nonempty_probability()

    def pair_cooccurrence(self) -> np.ndarray:
        """P(y_i = 1, y_j = 1 | Σy ≥ 1) for i ≠ j (the diagonal holds the marginals)."""
        joint = np.einsum("k,ki,kj->ij", self.prior, self.q, self.q)
        np.fill_diagonal(joint, self.prior @ self.q)
        return joint / self.nonempty_probability()


@dataclass
class PrototypeBank:
    """Per-label prototypes v_j = A·enc(name_j) + ε_j, rows of ``vectors`` [C×d]."""

    vectors: np.ndarray
    text_embeddings: np.ndarray
    mixing: np.ndarray
    noise_sigma: float

    @classmethod
    def build(cls, spec: DatasetSpec, vocab: LabelVocabulary, table: TokenEmbeddingTable,
              encoder: PseudoTextEncoder, rng: np.random.Generator) -> "PrototypeBank":
        names = build_name_embeddings(vocab, table, encoder).data
        mixing = np.eye(spec.d) + spec.mixing_scale * rng.normal(0.0, 1.0 / np.sqrt(spec.d), size=(spec.d, spec.d))
        aligned = names @ mixing.T
        aligned = spec.prototype_norm * aligned / np.linalg.norm(aligned, axis=1, keepdims=True)
        jitter = rng.normal(0.0, spec.prototype_noise * spec.prototype_norm / np.sqrt(spec.d), size=aligned.shape)
        return cls(vectors=aligned + jitter, text_embeddings=names, mixing=mixing,
                   noise_sigma=spec.noise_sigma)

    def alignment(self) -> np.ndarray:
        """cos(v_j, A·enc(name_j)) per label."""
        target = self.text_embeddings @ self.mixing.T
        num = (self.vectors * target).sum(axis=1)
        return num / (np.linalg.norm(self.vectors, axis=1) * np.linalg.norm(target, axis=1))


@dataclass
class SyntheticBatch:
    """Feature grids X [B×M×d], multi-hot targets y [B×C], and the hidden scene ids."""

    X: Tensor
    y: np.ndarray
    scene_ids: np.ndarray

    def __len__(self) -> int:
        return self.y.shape[0]

    def features(self, i: int) -> Tensor:
        return Tensor(self.X.data[i])

    def subset(self, indices) -> "SyntheticBatch":
        indices = np.asarray(indices)
        return SyntheticBatch(Tensor(self.X.data[indices]), self.y[indices], self.scene_ids[indices])


@dataclass
class DatasetSplits:
    train: SyntheticBatch
    test: SyntheticBatch
    scene_model: SceneModel
    prototypes: PrototypeBank
    vocabulary: LabelVocabulary


def sample_labels(scene_model: SceneModel, rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    """Draw a scene, then independent Bernoulli labels; redraw until at least one label is on."""
    if not (scene_model.q[scene_model.prior > 0] > 0).any():
        raise UnsatisfiableError("no scene with positive prior can switch any label on")
    for _ in range(MAX_LABEL_DRAWS):
        scene = int(rng.choice(scene_model.K, p=scene_model.prior))
        y = (rng.random(scene_model.C) < scene_model.q[scene]).astype(np.float64)
        if y.sum() >= 1:
            return y, scene
    raise UnsatisfiableError(f"no positive label in {MAX_LABEL_DRAWS} draws")


def render_features(y: np.ndarray, prototypes: PrototypeBank, rng: np.random.Generator,
                    M: int, n_pl: int) -> Tensor:
    """Background noise with n_pl distinct slots per positive label overwritten by its prototype plus jitter."""
    positives = np.flatnonzero(y)
    needed = n_pl * len(positives)
    if needed > M:
        raise CapacityError(f"{len(positives)} positive labels × {n_pl} placements exceed {M} token slots")
    d = prototypes.vectors.shape[1]
    sigma = prototypes.noise_sigma
    X = rng.normal(0.0, sigma, size=(M, d))
    slots = rng.permutation(M)[:needed].reshape(len(positives), n_pl)
    for label, label_slots in zip(positives, slots):
        X[label_slots] = prototypes.vectors[label] + rng.normal(0.0, sigma, size=(n_pl, d))
    return Tensor(X)


def _sample_one(spec: DatasetSpec, scene_model: SceneModel, prototypes: PrototypeBank,
                stream: int, index: int) -> Tuple[np.ndarray, np.ndarray, int]:
    # counter-based substream: the sample only depends on (seed, stream, index)
    rng = np.random.default_rng([spec.seed, stream, index])
    for _ in range(MAX_LABEL_DRAWS):
        y, scene = sample_labels(scene_model, rng)
        if spec.n_pl * y.sum() <= spec.M:
            return render_features(y, prototypes, rng, spec.M, spec.n_pl).data, y, scene
    raise CapacityError(f"could not draw a label set that fits {spec.M} slots")


def _make_split(spec: DatasetSpec, scene_model: SceneModel, prototypes: PrototypeBank,
                stream: int, size: int) -> SyntheticBatch:
    def draw(i):
        return _sample_one(spec, scene_model, prototypes, stream, i)

    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            samples = list(pool.map(draw, range(size)))
    else:
        samples = [draw(i) for i in range(size)]
    X = np.stack([s[0] for s in samples])
    y = np.stack([s[1] for s in samples])
    scenes = np.array([s[2] for s in samples], dtype=np.int64)
    return SyntheticBatch(Tensor(X), y, scenes)


def text_world(spec: DatasetSpec, d_tok: Optional[int] = None) -> Tuple[TokenEmbeddingTable, PseudoTextEncoder]:
    """The token table and frozen encoder shared by the data generator and the head."""
    width = d_tok if d_tok is not None else spec.d
    return TokenEmbeddingTable(width, seed=spec.text_seed), PseudoTextEncoder(width, spec.d, seed=spec.text_seed)


def make_dataset(spec: DatasetSpec, vocab: Optional[LabelVocabulary] = None,
                 table: Optional[TokenEmbeddingTable] = None,
                 encoder: Optional[PseudoTextEncoder] = None) -> DatasetSplits:
    """
    Generate train/test splits fully determined by ``spec.seed``.

    Both splits share one scene model and prototype bank and use disjoint
    random streams. Label sets that would overflow the token grid are redrawn.
    """
    spec.validate()
    vocab = vocab if vocab is not None else spec.load_vocabulary()
    if table is None or encoder is None:
        table, encoder = text_world(spec)
    logger.info(f"Generating synthetic dataset C={spec.C} K={spec.K} M={spec.M} d={spec.d} "
                f"({spec.n_train} train / {spec.n_test} test, seed {spec.seed})")
    scene_model = SceneModel.random(spec, np.random.default_rng([spec.seed, _SCENE_STREAM]))
    prototypes = PrototypeBank.build(spec, vocab, table, encoder, np.random.default_rng([spec.seed, _PROTO_STREAM]))
    train = _make_split(spec, scene_model, prototypes, _TRAIN_STREAM, spec.n_train)
    test = _make_split(spec, scene_model, prototypes, _TEST_STREAM, spec.n_test)
    logger.info(f"Mean labels per sample: train {train.y.sum(axis=1).mean():.2f}, test {test.y.sum(axis=1).mean():.2f}")
    return DatasetSplits(train=train, test=test, scene_model=scene_model, prototypes=prototypes, vocabulary=vocab)


def dump_split(batch: SyntheticBatch, name: str, out_dir: Union[str, Path], vocab: LabelVocabulary,
               spec: Optional[DatasetSpec] = None) -> List[Path]:
    """Write a split as a tensor file (X, y, scene ids) plus a CSV of targets."""
    out_dir = Path(out_dir)
    header = {"kind": "dataset_split", "split": name, "labels": list(vocab.names),
              "spec": spec.to_dict() if spec is not None else None}
    bin_path = write_tensor_file(out_dir / FileNamingConventions.get_split_filename(name), header,
                                 {"X": batch.X.data, "y": batch.y, "scene_ids": batch.scene_ids.astype(np.float64)})
    csv_path = out_dir / FileNamingConventions.get_targets_filename(name)
    pd.DataFrame(batch.y.astype(np.int64), columns=list(vocab.names)).to_csv(csv_path, index=False)
    logger.info(f"Saved targets for split {name}: {csv_path}")
    return [bin_path, csv_path]


def load_split(path: Union[str, Path]) -> Tuple[SyntheticBatch, Dict[str, Any]]:
    header, tensors = read_tensor_file(path)
    batch = SyntheticBatch(Tensor(tensors["X"]), tensors["y"], tensors["scene_ids"].astype(np.int64))
    return batch, header
