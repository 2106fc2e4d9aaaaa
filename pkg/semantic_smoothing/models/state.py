from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from semantic_smoothing.models.schemas import EpochDiagnostics, LabeledExample, StepDiagnostics

LayerKind = Literal["embedding-lookup", "conv1d", "relu", "mean-pool", "affine", "log-softmax"]

IBP_KINDS = frozenset({"affine", "conv1d", "relu", "mean-pool"})
PARAMETRIC_KINDS = frozenset({"embedding-lookup", "conv1d", "affine"})

FORMAT_VERSION = 1


class LayerSpec(BaseModel):
    """One layer of the encoder or classifier stack."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(..., description="Prefix of this layer's parameter names")
    kind: LayerKind
    dims: dict[str, int] = Field(default_factory=dict, description="Per-kind size metadata")

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "embedding-lookup":
            return {f"{self.name}.weight": (self.dims["vocab"], self.dims["dim"])}
        if self.kind == "conv1d":
            shape = (self.dims["out_channels"], self.dims["in_channels"], self.dims["kernel"])
            return {f"{self.name}.weight": shape, f"{self.name}.bias": (self.dims["out_channels"],)}
        if self.kind == "affine":
            return {
                f"{self.name}.weight": (self.dims["in_features"], self.dims["out_features"]),
                f"{self.name}.bias": (self.dims["out_features"],),
            }
        return {}


class ParameterSet(BaseModel):
    """Named parameter tensors, partitioned into encoder and classifier."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    encoder: dict[str, np.ndarray] = Field(default_factory=dict)
    classifier: dict[str, np.ndarray] = Field(default_factory=dict)
    frozen: list[str] = Field(default_factory=list, description="Names excluded from optimization")

    @model_validator(mode="after")
    def _disjoint(self) -> "ParameterSet":
        overlap = set(self.encoder) & set(self.classifier)
        if overlap:
            raise ValueError(f"parameters in both partitions: {sorted(overlap)}")
        unknown = set(self.frozen) - set(self.encoder) - set(self.classifier)
        if unknown:
            raise ValueError(f"frozen names without a tensor: {sorted(unknown)}")
        return self

    def flat(self) -> dict[str, np.ndarray]:
        return {**self.encoder, **self.classifier}

    def trainable(self) -> dict[str, np.ndarray]:
        return {name: value for name, value in self.flat().items() if name not in self.frozen}

    def replace(self, updates: dict[str, np.ndarray]) -> "ParameterSet":
        """Return a copy with some tensors swapped out."""
        return ParameterSet(
            encoder={name: updates.get(name, value) for name, value in self.encoder.items()},
            classifier={name: updates.get(name, value) for name, value in self.classifier.items()},
            frozen=list(self.frozen),
        )

    def copy_arrays(self) -> "ParameterSet":
        return ParameterSet(
            encoder={name: value.copy() for name, value in self.encoder.items()},
            classifier={name: value.copy() for name, value in self.classifier.items()},
            frozen=list(self.frozen),
        )


class ModelCheckpoint(BaseModel):
    """Architecture, parameters and the training-time noise level of a smoothed model."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    encoder: list[LayerSpec]
    classifier: list[LayerSpec]
    parameters: ParameterSet
    sigma: float = Field(..., gt=0.0, allow_inf_nan=False)
    vocabulary: list[str] = Field(default_factory=list, description="Word of each embedding row")
    format_version: int = FORMAT_VERSION

    @property
    def num_classes(self) -> int:
        for layer in reversed(self.classifier):
            if layer.kind == "affine":
                return layer.dims["out_features"]
        raise ValueError("classifier has no affine layer")

    @property
    def latent_dim(self) -> int:
        for layer in reversed(self.encoder):
            if layer.kind == "affine":
                return layer.dims["out_features"]
            if layer.kind == "conv1d":
                return layer.dims["out_channels"]
            if layer.kind == "embedding-lookup":
                return layer.dims["dim"]
        raise ValueError("encoder has no sized layer")

    @property
    def min_sequence_length(self) -> int:
        """Shortest token sequence the encoder's convolutions accept."""
        length = 1
        for layer in self.encoder:
            if layer.kind == "conv1d":
                length += layer.dims["kernel"] - 1
        return length

    def embedding_layer(self) -> LayerSpec | None:
        for layer in self.encoder:
            if layer.kind == "embedding-lookup":
                return layer
        return None

    def word_index(self) -> dict[str, int]:
        return {word: row for row, word in enumerate(self.vocabulary)}


class AdamState(BaseModel):
    """First and second moment estimates of the Adam optimizer."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int = Field(0, ge=0)
    first_moment: dict[str, np.ndarray] = Field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = Field(default_factory=dict)


class AdamHyper(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(0.001, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class IntervalTensor(BaseModel):
    """Elementwise lower and upper bounds on an activation tensor."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    lower: np.ndarray
    upper: np.ndarray

    @model_validator(mode="after")
    def _ordered(self) -> "IntervalTensor":
        if self.lower.shape != self.upper.shape:
            raise ValueError(f"bound shapes differ: {self.lower.shape} vs {self.upper.shape}")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("bounds must be finite")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        return self

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


class EmbeddingMatrix(BaseModel):
    """Word vectors with their vocabulary index."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    words: list[str]
    vectors: np.ndarray

    @model_validator(mode="after")
    def _aligned(self) -> "EmbeddingMatrix":
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.words):
            raise ValueError("vectors must be a (len(words), dim) matrix")
        return self

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def index(self) -> dict[str, int]:
        return {word: row for row, word in enumerate(self.words)}


class SubstitutionTable(BaseModel):
    """Allowed substitutes per headword; absent words have none."""

    entries: dict[str, list[str]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _normalize(self) -> "SubstitutionTable":
        for word, substitutes in self.entries.items():
            self.entries[word] = [s for s in dict.fromkeys(substitutes) if s != word]
        return self

    def substitutes(self, word: str) -> list[str]:
        return list(self.entries.get(word, ()))

    def options(self, word: str) -> list[str]:
        """The word itself followed by its substitutes."""
        return [word, *self.entries.get(word, ())]

    def words(self) -> set[str]:
        """Every headword and substitute mentioned by the table."""
        found = set(self.entries)
        for substitutes in self.entries.values():
            found.update(substitutes)
        return found


class SyntheticCorpus(BaseModel):
    """Generated splits with the vocabulary resources they were drawn from."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    train: list[LabeledExample]
    test: list[LabeledExample]
    intervened: list[LabeledExample] = Field(
        default_factory=list, description="Test split with style tokens drawn independently of the label"
    )
    table: SubstitutionTable
    embeddings: EmbeddingMatrix
    content_class: dict[str, int] = Field(default_factory=dict, description="Class carried by each content word")
    content_cluster: dict[str, int] = Field(default_factory=dict, description="Cluster of each content word")
    style_class: dict[str, int] = Field(default_factory=dict, description="Class each style word is tied to")


class TrainingResult(BaseModel):
    """Final model of a training run with its per-step and per-epoch diagnostics."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    checkpoint: ModelCheckpoint
    phase1_checkpoint: ModelCheckpoint | None = None
    steps: list[StepDiagnostics] = Field(default_factory=list)
    epochs: list[EpochDiagnostics] = Field(default_factory=list)
