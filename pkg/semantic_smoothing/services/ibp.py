"""
Interval bound propagation through the encoder.

Input boxes are the coordinatewise hull of a word and its substitutes in
embedding space. Boxes are pushed through the encoder in center-radius form,
and R_hat is the L2 norm of the largest one-sided deviation from s(x).
"""

import logging

import numpy as np
from pydantic import ValidationError

from semantic_smoothing.errors import SoundnessError, StructuralError, VocabularyLookupError
from semantic_smoothing.models.state import (
    IBP_KINDS,
    EmbeddingMatrix,
    IntervalTensor,
    LayerSpec,
    ModelCheckpoint,
    ParameterSet,
    SubstitutionTable,
)
from semantic_smoothing.netcore import autodiff as ad
from semantic_smoothing.netcore.autodiff import Node, Tape
from semantic_smoothing.netcore.network import weight_node

logger = logging.getLogger(__name__)

# Slack allowed between s(x) and its own bounds.
CENTER_SLACK = 1e-9


def _interval(lower: np.ndarray, upper: np.ndarray) -> IntervalTensor:
    try:
        return IntervalTensor(lower=lower, upper=upper)
    except ValidationError as e:
        raise SoundnessError(f"invalid interval: {e.errors()[0]['msg']}") from e


def _hull(rows: list[int], vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    block = vectors[rows]
    return block.min(axis=0), block.max(axis=0)


def input_interval(tokens: list[str], table: SubstitutionTable, embeddings: EmbeddingMatrix) -> IntervalTensor:
    """
    Per-position embedding box over each word and its substitutes.

    Raises:
        VocabularyLookupError: if a token or one of its substitutes has no embedding.
    """
    index = embeddings.index()
    lower = np.empty((len(tokens), embeddings.dim))
    upper = np.empty((len(tokens), embeddings.dim))
    for position, word in enumerate(tokens):
        rows = []
        for option in table.options(word):
            if option not in index:
                raise VocabularyLookupError(option)
            rows.append(index[option])
        lower[position], upper[position] = _hull(rows, embeddings.vectors)
    return _interval(lower, upper)


def vocabulary_boxes(embeddings: EmbeddingMatrix, table: SubstitutionTable) -> IntervalTensor:
    """Box of every vocabulary row at once, shape (vocab, dim); index it with token ids."""
    index = embeddings.index()
    lower = embeddings.vectors.copy()
    upper = embeddings.vectors.copy()
    for word, row in index.items():
        substitutes = table.substitutes(word)
        if not substitutes:
            continue
        rows = [row]
        for substitute in substitutes:
            if substitute not in index:
                raise VocabularyLookupError(substitute)
            rows.append(index[substitute])
        lower[row], upper[row] = _hull(rows, embeddings.vectors)
    return _interval(lower, upper)


def _bound_layers(encoder: list[LayerSpec]) -> list[LayerSpec]:
    layers = list(encoder)
    if layers and layers[0].kind == "embedding-lookup":
        layers = layers[1:]
    for layer in layers:
        if layer.kind not in IBP_KINDS:
            raise StructuralError(f"IBP does not support encoder layer {layer.name!r} of kind {layer.kind!r}")
    return layers


def propagate_on_tape(
    tape: Tape,
    encoder: list[LayerSpec],
    parameters: ParameterSet,
    lower: Node,
    upper: Node,
) -> tuple[Node, Node]:
    """Differentiable bound propagation; weights are shared with the forward pass on the same tape."""
    for layer in _bound_layers(encoder):
        if layer.kind in ("affine", "conv1d"):
            weight = weight_node(tape, parameters, f"{layer.name}.weight")
            bias = weight_node(tape, parameters, f"{layer.name}.bias")
            center = ad.scale(ad.add(upper, lower), 0.5)
            radius = ad.scale(ad.sub(upper, lower), 0.5)
            linear = ad.matmul if layer.kind == "affine" else ad.conv1d
            center = ad.add(linear(center, weight), bias)
            radius = linear(radius, ad.abs_(weight))
            lower, upper = ad.sub(center, radius), ad.add(center, radius)
        elif layer.kind == "relu":
            lower, upper = ad.relu(lower), ad.relu(upper)
        else:
            lower, upper = ad.mean_pool(lower), ad.mean_pool(upper)
    return lower, upper


def propagate(encoder: list[LayerSpec], parameters: ParameterSet, bounds: IntervalTensor) -> IntervalTensor:
    """
    Sound latent bounds for every input inside `bounds`.

    A leading embedding-lookup layer is skipped: the bounds already live in
    embedding space.

    Raises:
        StructuralError: if the encoder contains a kind IBP cannot handle.
    """
    tape = Tape()
    lower, upper = propagate_on_tape(
        tape, encoder, parameters, tape.constant(bounds.lower), tape.constant(bounds.upper)
    )
    return _interval(lower.value, upper.value)


def r_hat(center: np.ndarray, bounds: IntervalTensor) -> float | np.ndarray:
    """
    sqrt(sum_i max(u_i - c_i, c_i - l_i)^2) over the last axis.

    Returns a float for a single latent vector, an array for a batch.

    Raises:
        SoundnessError: if the center lies outside the bounds by more than 1e-9.
    """
    center = np.asarray(center, dtype=np.float64)
    if center.shape != bounds.lower.shape:
        raise StructuralError(f"center shape {center.shape} does not match bounds {bounds.lower.shape}")
    below = bounds.lower - center
    above = center - bounds.upper
    worst = float(max(below.max(initial=0.0), above.max(initial=0.0)))
    if worst > CENTER_SLACK:
        raise SoundnessError(f"s(x) lies {worst:.3e} outside its interval bounds")
    deviation = np.maximum(bounds.upper - center, center - bounds.lower)
    result = np.sqrt(np.sum(deviation * deviation, axis=-1))
    return float(result) if result.ndim == 0 else result


def r_hat_on_tape(center: Node, lower: Node, upper: Node) -> Node:
    """Tape form of r_hat; at ties the subgradient goes to the upper branch."""
    deviation = ad.maximum(ad.sub(upper, center), ad.sub(center, lower))
    return ad.sqrt(ad.total(ad.square(deviation), axis=-1))


def certified_latent_radius(
    model: ModelCheckpoint,
    tokens: list[str],
    table: SubstitutionTable,
    embeddings: EmbeddingMatrix,
    center: np.ndarray,
) -> float:
    """R_hat of one tokenized input: input box, propagation, then r_hat around s(x)."""
    bounds = propagate(model.encoder, model.parameters, input_interval(tokens, table, embeddings))
    return float(r_hat(center, bounds))


def model_embeddings(model: ModelCheckpoint) -> EmbeddingMatrix:
    """The frozen embedding table of a model together with its vocabulary."""
    lookup = model.embedding_layer()
    if lookup is None:
        raise StructuralError("model has no embedding-lookup layer")
    vectors = model.parameters.flat()[f"{lookup.name}.weight"]
    return EmbeddingMatrix(words=list(model.vocabulary), vectors=vectors)
