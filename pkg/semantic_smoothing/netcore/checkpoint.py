"""Versioned JSON persistence of ModelCheckpoint."""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from semantic_smoothing.errors import CheckpointFormatError, CheckpointVersionError
from semantic_smoothing.models.state import FORMAT_VERSION, LayerKind, LayerSpec, ModelCheckpoint, ParameterSet

logger = logging.getLogger(__name__)


class TensorRecord(BaseModel):
    shape: list[int]
    data: list[float]


class LayerRecord(BaseModel):
    name: str
    kind: LayerKind
    dims: dict[str, int] = Field(default_factory=dict)
    tensors: dict[str, TensorRecord] = Field(default_factory=dict)


class CheckpointDocument(BaseModel):
    """On-disk layout; layer order is the list order."""

    format_version: int
    sigma: float = Field(..., gt=0.0, allow_inf_nan=False)
    vocabulary: list[str] = Field(default_factory=list)
    frozen: list[str] = Field(default_factory=list)
    encoder: list[LayerRecord]
    classifier: list[LayerRecord]


def _layer_record(layer: LayerSpec, tensors: dict[str, np.ndarray]) -> LayerRecord:
    return LayerRecord(
        name=layer.name,
        kind=layer.kind,
        dims=dict(layer.dims),
        tensors={
            name: TensorRecord(shape=list(tensors[name].shape), data=tensors[name].reshape(-1).tolist())
            for name in layer.parameter_shapes()
        },
    )


def _decode_layers(records: list[LayerRecord], section: str) -> tuple[list[LayerSpec], dict[str, np.ndarray]]:
    layers: list[LayerSpec] = []
    tensors: dict[str, np.ndarray] = {}
    for position, record in enumerate(records):
        layer = LayerSpec(name=record.name, kind=record.kind, dims=record.dims)
        try:
            expected_shapes = layer.parameter_shapes()
        except KeyError as e:
            raise CheckpointFormatError(f"missing dimension {e}", field=f"{section}[{position}].dims") from e
        for name, shape in expected_shapes.items():
            field = f"{section}[{position}].tensors.{name}"
            tensor = record.tensors.get(name)
            if tensor is None:
                raise CheckpointFormatError("missing tensor", field=field)
            if tuple(tensor.shape) != shape or len(tensor.data) != int(np.prod(shape)):
                raise CheckpointFormatError(f"tensor does not match shape {shape}", field=field)
            tensors[name] = np.array(tensor.data, dtype=np.float64).reshape(shape)
        layers.append(layer)
    return layers, tensors


def save_checkpoint(model: ModelCheckpoint, path: Path | str) -> Path:
    """
    Write a checkpoint as UTF-8 JSON.

    Floats are written in shortest round-trip form, so loading restores every
    tensor bit for bit. The file is replaced atomically.
    """
    path = Path(path)
    tensors = model.parameters.flat()
    document = CheckpointDocument(
        format_version=model.format_version,
        sigma=model.sigma,
        vocabulary=list(model.vocabulary),
        frozen=list(model.parameters.frozen),
        encoder=[_layer_record(layer, tensors) for layer in model.encoder],
        classifier=[_layer_record(layer, tensors) for layer in model.classifier],
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            json.dump(document.model_dump(), handle)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    logger.debug("Saved checkpoint to %s", path)
    return path


def load_checkpoint(path: Path | str) -> ModelCheckpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointVersionError: if format_version differs from the supported one.
        CheckpointFormatError: if the file is unreadable, truncated or inconsistent.
    """
    path = Path(path)
    try:
        raw: Any = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise CheckpointFormatError(f"cannot read {path}: {e}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{path} is not valid JSON: {e}", field="document") from e

    if not isinstance(raw, dict):
        raise CheckpointFormatError("top level must be an object", field="document")
    version = raw.get("format_version")
    if not isinstance(version, int):
        raise CheckpointFormatError("missing or non-integer format_version", field="format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(found=version, expected=FORMAT_VERSION)

    try:
        document = CheckpointDocument.model_validate(raw)
    except ValidationError as e:
        error = e.errors()[0]
        field = ".".join(str(part) for part in error["loc"]) or "document"
        raise CheckpointFormatError(error["msg"], field=field) from e

    encoder, encoder_tensors = _decode_layers(document.encoder, "encoder")
    classifier, classifier_tensors = _decode_layers(document.classifier, "classifier")
    try:
        parameters = ParameterSet(encoder=encoder_tensors, classifier=classifier_tensors, frozen=document.frozen)
        return ModelCheckpoint(
            encoder=encoder,
            classifier=classifier,
            parameters=parameters,
            sigma=document.sigma,
            vocabulary=document.vocabulary,
            format_version=document.format_version,
        )
    except ValidationError as e:
        raise CheckpointFormatError(e.errors()[0]["msg"], field="parameters") from e


def checkpoints_equal(first: ModelCheckpoint, second: ModelCheckpoint) -> bool:
    """Bit-exact comparison of architecture, tensors, sigma and vocabulary."""
    if (
        first.encoder != second.encoder
        or first.classifier != second.classifier
        or first.sigma != second.sigma
        or first.vocabulary != second.vocabulary
        or first.format_version != second.format_version
        or sorted(first.parameters.frozen) != sorted(second.parameters.frozen)
    ):
        return False
    for mine, theirs in (
        (first.parameters.encoder, second.parameters.encoder),
        (first.parameters.classifier, second.parameters.classifier),
    ):
        if mine.keys() != theirs.keys():
            return False
        for name, value in mine.items():
            other = theirs[name]
            if value.shape != other.shape or value.tobytes() != other.tobytes():
                return False
    return True
