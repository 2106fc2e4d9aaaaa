from collections.abc import Callable

import numpy as np
import pytest

from semantic_smoothing.agents.trainer_agent import TrainerAgent, init_model
from semantic_smoothing.models.schemas import SyntheticSpec, TrainConfig
from semantic_smoothing.models.state import (
    LayerSpec,
    ModelCheckpoint,
    ParameterSet,
    SyntheticCorpus,
    TrainingResult,
)
from semantic_smoothing.services.corpus import generate_synthetic


@pytest.fixture(scope="session")
def tiny_spec() -> SyntheticSpec:
    return SyntheticSpec(
        vocabulary_size=40,
        num_clusters=4,
        cluster_size=3,
        content_tokens=3,
        style_tokens_per_class=1,
        sequence_length=6,
        num_classes=2,
        embedding_dim=4,
        num_train=80,
        num_test=24,
        seed=7,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec: SyntheticSpec) -> SyntheticCorpus:
    return generate_synthetic(tiny_spec)


@pytest.fixture(scope="session")
def train_config() -> TrainConfig:
    return TrainConfig(
        sigma=0.5,
        gamma=2.0,
        margin=0.5,
        cls_epochs=4,
        robust_epochs=2,
        batch_size=16,
        warmup_steps=4,
        learning_rate=0.02,
        conv_channels=6,
        kernel_size=3,
        latent_dim=4,
        hidden_dim=8,
        seed=3,
    )


@pytest.fixture
def fresh_model(tiny_corpus: SyntheticCorpus, train_config: TrainConfig) -> ModelCheckpoint:
    return init_model(tiny_corpus.embeddings, 2, train_config)


@pytest.fixture(scope="session")
def trained(tiny_corpus: SyntheticCorpus, train_config: TrainConfig) -> TrainingResult:
    model = init_model(tiny_corpus.embeddings, 2, train_config)
    return TrainerAgent(train_config, tiny_corpus.table).train(model, tiny_corpus.train)


@pytest.fixture(scope="session")
def trained_model(trained: TrainingResult) -> ModelCheckpoint:
    return trained.checkpoint


@pytest.fixture
def affine_model() -> ModelCheckpoint:
    """Float-input model: identity affine encoder (2 -> 2), affine 2 -> 3 head with log-softmax."""
    rng = np.random.default_rng(11)
    encoder = [LayerSpec(name="latent", kind="affine", dims={"in_features": 2, "out_features": 2})]
    classifier = [
        LayerSpec(name="logits", kind="affine", dims={"in_features": 2, "out_features": 3}),
        LayerSpec(name="log_probs", kind="log-softmax"),
    ]
    parameters = ParameterSet(
        encoder={"latent.weight": np.eye(2), "latent.bias": np.zeros(2)},
        classifier={"logits.weight": rng.normal(size=(2, 3)), "logits.bias": rng.normal(size=3)},
    )
    return ModelCheckpoint(encoder=encoder, classifier=classifier, parameters=parameters, sigma=1.0)


@pytest.fixture
def numeric_gradient() -> Callable[[Callable[[dict[str, np.ndarray]], float], dict[str, np.ndarray]], dict[str, np.ndarray]]:
    """Central finite differences of a scalar function of named arrays."""

    def estimate(function: Callable[[dict[str, np.ndarray]], float], values: dict[str, np.ndarray], h: float = 1e-6) -> dict[str, np.ndarray]:
        grads = {}
        for name, value in values.items():
            grad = np.zeros_like(value)
            for index in np.ndindex(value.shape):
                plus = {key: array.copy() for key, array in values.items()}
                minus = {key: array.copy() for key, array in values.items()}
                plus[name][index] += h
                minus[name][index] -= h
                grad[index] = (function(plus) - function(minus)) / (2.0 * h)
            grads[name] = grad
        return grads

    return estimate
