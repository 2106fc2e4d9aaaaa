"""
Encoder s(.) and base classifier f(.) built from LayerSpec stacks.

A model is a ModelCheckpoint: the layer lists fix the computation, the
ParameterSet supplies the tensors. Every pass records onto a Tape so that the
same call serves inference and training.
"""

import logging

import numpy as np
from pydantic import BaseModel, ConfigDict

from semantic_smoothing.errors import StructuralError
from semantic_smoothing.models.state import IBP_KINDS, LayerSpec, ModelCheckpoint, ParameterSet
from semantic_smoothing.netcore import autodiff as ad
from semantic_smoothing.netcore.autodiff import Node, Tape

logger = logging.getLogger(__name__)


class ForwardPass(BaseModel):
    """Result of one recorded forward pass."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tape: Tape
    latent: Node
    noisy_latent: Node
    log_probs: Node

    @property
    def class_probs(self) -> np.ndarray:
        return np.exp(self.log_probs.value)


def build_architecture(
    vocabulary_size: int,
    embedding_dim: int,
    num_classes: int,
    conv_channels: int,
    kernel_size: int,
    latent_dim: int,
    hidden_dim: int,
) -> tuple[list[LayerSpec], list[LayerSpec]]:
    """Default text CNN: frozen lookup, conv, relu, mean-pool, affine; then a two-layer head."""
    encoder = [
        LayerSpec(name="embed", kind="embedding-lookup", dims={"vocab": vocabulary_size, "dim": embedding_dim}),
        LayerSpec(
            name="conv",
            kind="conv1d",
            dims={"in_channels": embedding_dim, "out_channels": conv_channels, "kernel": kernel_size},
        ),
        LayerSpec(name="conv_relu", kind="relu"),
        LayerSpec(name="pool", kind="mean-pool"),
        LayerSpec(name="latent", kind="affine", dims={"in_features": conv_channels, "out_features": latent_dim}),
    ]
    classifier = [
        LayerSpec(name="hidden", kind="affine", dims={"in_features": latent_dim, "out_features": hidden_dim}),
        LayerSpec(name="hidden_relu", kind="relu"),
        LayerSpec(name="logits", kind="affine", dims={"in_features": hidden_dim, "out_features": num_classes}),
        LayerSpec(name="log_probs", kind="log-softmax"),
    ]
    return encoder, classifier


def init_parameters(
    layers: list[LayerSpec],
    rng: np.random.Generator,
    fixed: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """He-normal weights and zero biases for every parametric layer; `fixed` overrides by name."""
    fixed = fixed or {}
    tensors: dict[str, np.ndarray] = {}
    for layer in layers:
        for name, shape in layer.parameter_shapes().items():
            if name in fixed:
                value = np.asarray(fixed[name], dtype=np.float64)
                if value.shape != shape:
                    raise StructuralError(f"{name} expects shape {shape}, got {value.shape}")
                tensors[name] = value.copy()
            elif name.endswith(".bias"):
                tensors[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if layer.kind == "conv1d" else shape[0]
                tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return tensors


def validate_architecture(model: ModelCheckpoint) -> None:
    """Check layer kinds and parameter shapes of a model."""
    for position, layer in enumerate(model.encoder):
        if layer.kind == "embedding-lookup" and position == 0:
            continue
        if layer.kind not in IBP_KINDS:
            raise StructuralError(f"encoder layer {layer.name!r} has kind {layer.kind!r}, which IBP cannot bound")
    for layer in model.classifier:
        if layer.kind == "embedding-lookup":
            raise StructuralError("embedding-lookup is only allowed as the first encoder layer")
    tensors = model.parameters.flat()
    for layer in [*model.encoder, *model.classifier]:
        for name, shape in layer.parameter_shapes().items():
            if name not in tensors:
                raise StructuralError(f"missing parameter {name}")
            if tensors[name].shape != shape:
                raise StructuralError(f"{name} has shape {tensors[name].shape}, expected {shape}")


def weight_node(tape: Tape, parameters: ParameterSet, name: str) -> Node:
    try:
        value = parameters.flat()[name]
    except KeyError as e:
        raise StructuralError(f"missing parameter {name}") from e
    if name in parameters.frozen:
        return tape.constant(value)
    return tape.parameter(name, value)


def apply_layer(tape: Tape, layer: LayerSpec, node: Node, parameters: ParameterSet) -> Node:
    """Apply one non-lookup layer."""
    if layer.kind == "affine":
        out = ad.matmul(node, weight_node(tape, parameters, f"{layer.name}.weight"))
        return ad.add(out, weight_node(tape, parameters, f"{layer.name}.bias"))
    if layer.kind == "conv1d":
        out = ad.conv1d(node, weight_node(tape, parameters, f"{layer.name}.weight"))
        return ad.add(out, weight_node(tape, parameters, f"{layer.name}.bias"))
    if layer.kind == "relu":
        return ad.relu(node)
    if layer.kind == "mean-pool":
        return ad.mean_pool(node)
    if layer.kind == "log-softmax":
        return ad.log_softmax(node)
    raise StructuralError(f"layer {layer.name!r} of kind {layer.kind!r} cannot be applied here")


def embed_input(model: ModelCheckpoint, inputs: np.ndarray | list, tape: Tape) -> tuple[Node, list[LayerSpec]]:
    """
    Turn raw input into the first activation and the layers still to apply.

    With a leading embedding-lookup layer the input holds integer token ids,
    otherwise it is already a float activation.
    """
    layers = list(model.encoder)
    lookup = model.embedding_layer()
    if lookup is None or layers[0] is not lookup:
        values = np.asarray(inputs, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise StructuralError("input contains non-finite values")
        return tape.constant(values), layers

    ids = np.asarray(inputs)
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        raise StructuralError(f"embedding-lookup expects integer token ids, got dtype {ids.dtype}")
    ids = ids.astype(np.int64)
    vocab = lookup.dims["vocab"]
    if ids.ndim == 0 or ids.shape[-1] == 0:
        raise StructuralError("token id input must contain at least one position")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise StructuralError(f"token ids must lie in [0, {vocab})")
    table = weight_node(tape, model.parameters, f"{lookup.name}.weight")
    return ad.gather_rows(table, ids), layers[1:]


def encode(model: ModelCheckpoint, inputs: np.ndarray | list, tape: Tape) -> Node:
    """Record s(x) on `tape`."""
    node, layers = embed_input(model, inputs, tape)
    for layer in layers:
        node = apply_layer(tape, layer, node, model.parameters)
    return node


def classify(model: ModelCheckpoint, latent: Node, tape: Tape) -> Node:
    """Record log f(z) on `tape`; a missing final log-softmax is applied implicitly."""
    expected = model.latent_dim
    if latent.shape[-1] != expected:
        raise StructuralError(f"classifier expects latent width {expected}, got {latent.shape[-1]}")
    node = latent
    for layer in model.classifier:
        node = apply_layer(tape, layer, node, model.parameters)
    if not model.classifier or model.classifier[-1].kind != "log-softmax":
        node = ad.log_softmax(node)
    return node


def forward(
    model: ModelCheckpoint,
    inputs: np.ndarray | list,
    noise: np.ndarray | None = None,
    tape: Tape | None = None,
) -> ForwardPass:
    """
    Compute s(x), add noise when given, then apply f.

    Noise may carry extra leading sample axes in front of the latent shape; the
    clean latent is broadcast against them.

    Raises:
        StructuralError: if input or noise shapes do not fit the model.
    """
    tape = tape or Tape()
    latent = encode(model, inputs, tape)
    noisy = latent
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        rank = latent.value.ndim
        if noise.ndim < rank or noise.shape[noise.ndim - rank :] != latent.shape:
            raise StructuralError(f"noise shape {noise.shape} does not end with latent shape {latent.shape}")
        noisy = ad.add(latent, tape.constant(noise))
    log_probs = classify(model, noisy, tape)
    return ForwardPass(tape=tape, latent=latent, noisy_latent=noisy, log_probs=log_probs)


def predict_log_probs(model: ModelCheckpoint, latent: np.ndarray) -> np.ndarray:
    """log f(z) for a batch of latent vectors, without keeping the tape."""
    tape = Tape()
    return classify(model, tape.constant(latent), tape).value


def latent_vector(model: ModelCheckpoint, inputs: np.ndarray | list) -> np.ndarray:
    """s(x) as a plain array."""
    return encode(model, inputs, Tape()).value


def gradient(tape: Tape, loss: Node, loss_seed: float = 1.0) -> dict[str, np.ndarray]:
    """
    Gradients of a scalar loss with respect to every trainable parameter on `tape`.

    Frozen tensors are recorded as constants and therefore never appear.

    Raises:
        TapeUsageError: if the tape was already used for a gradient.
    """
    grads = tape.gradient(loss, loss_seed)
    for name, value in grads.items():
        if not np.all(np.isfinite(value)):
            logger.warning("Non-finite gradient for %s", name)
    return grads
