"""
Two-phase training of encoder and classifier.

Phase 1 minimizes the noisy cross-entropy alone. Phase 2 adds
gamma_eff * mean(max(0, R_hat - R + m)), with gamma ramped linearly over the
warm-up steps. Both terms share the same noise draws, and Adam updates every
non-frozen tensor.
"""

import logging
import math
from collections.abc import Callable

import numpy as np

from semantic_smoothing.config import derive_seed
from semantic_smoothing.errors import ConfigurationError, DataError, TrainingDivergedError
from semantic_smoothing.models.schemas import (
    EpochDiagnostics,
    LabeledExample,
    NoiseSpec,
    HingeDominanceReport,
    HingeDominanceRow,
    StepDiagnostics,
    TrainConfig,
)
from semantic_smoothing.models.state import (
    AdamHyper,
    AdamState,
    EmbeddingMatrix,
    IntervalTensor,
    ModelCheckpoint,
    ParameterSet,
    SubstitutionTable,
    TrainingResult,
)
from semantic_smoothing.netcore import autodiff as ad
from semantic_smoothing.netcore.autodiff import Node, Tape
from semantic_smoothing.netcore.network import (
    build_architecture,
    forward,
    gradient,
    init_parameters,
    latent_vector,
    predict_log_probs,
    validate_architecture,
)
from semantic_smoothing.netcore.optim import adam_step
from semantic_smoothing.services.corpus import encode_tokens
from semantic_smoothing.services.ibp import (
    certified_latent_radius,
    model_embeddings,
    propagate_on_tape,
    r_hat_on_tape,
    vocabulary_boxes,
)
from semantic_smoothing.services.smoothing import (
    PROBABILITY_CLAMP,
    clamp_probability,
    sample_noise_batch,
    signed_radius,
    signed_radius_on_tape,
    soft_expectation,
)

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6

CheckpointCallback = Callable[[int, ModelCheckpoint], None]


def init_model(embeddings: EmbeddingMatrix, num_classes: int, config: TrainConfig) -> ModelCheckpoint:
    """Fresh text CNN over frozen `embeddings`, seeded from config.seed."""
    encoder, classifier = build_architecture(
        vocabulary_size=len(embeddings.words),
        embedding_dim=embeddings.dim,
        num_classes=num_classes,
        conv_channels=config.conv_channels,
        kernel_size=config.kernel_size,
        latent_dim=config.latent_dim,
        hidden_dim=config.hidden_dim,
    )
    rng = np.random.default_rng(derive_seed(config.seed, "train-init"))
    embedding_name = f"{encoder[0].name}.weight"
    parameters = ParameterSet(
        encoder=init_parameters(encoder, rng, fixed={embedding_name: embeddings.vectors}),
        classifier=init_parameters(classifier, rng),
        frozen=[embedding_name],
    )
    model = ModelCheckpoint(
        encoder=encoder,
        classifier=classifier,
        parameters=parameters,
        sigma=config.sigma,
        vocabulary=list(embeddings.words),
    )
    validate_architecture(model)
    return model


class BatchTerms:
    """Loss nodes of one batch recorded on a shared tape."""

    def __init__(self, tape: Tape, cls_sum: Node, robust: Node, r: np.ndarray, r_hat: np.ndarray) -> None:
        self.tape = tape
        self.cls_sum = cls_sum
        self.robust = robust
        self.r = r
        self.r_hat = r_hat


def _length_groups(ids: list[np.ndarray]) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for position, row in enumerate(ids):
        groups.setdefault(len(row), []).append(position)
    return list(groups.values())


def encode_batch(model: ModelCheckpoint, batch: list[LabeledExample]) -> tuple[list[np.ndarray], np.ndarray]:
    """Token ids per example and the label vector; validates labels."""
    index = model.word_index()
    labels = np.array([example.label for example in batch], dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        bad = next(e for e in batch if not 0 <= e.label < model.num_classes)
        raise DataError(f"example {bad.example_id} has label {bad.label} outside [0, {model.num_classes})")
    return [encode_tokens(example.tokens, index) for example in batch], labels


def record_batch(
    model: ModelCheckpoint,
    batch: list[LabeledExample],
    noise: np.ndarray,
    boxes: IntervalTensor,
    margin: float,
    tape: Tape | None = None,
) -> BatchTerms:
    """
    Record both loss terms for a batch.

    `noise` has shape (k, batch, latent_dim). Examples of different lengths are
    processed as separate groups on the same tape.
    """
    tape = tape or Tape()
    ids, labels = encode_batch(model, batch)
    k = noise.shape[0]
    cls_parts: list[Node] = []
    robust_parts: list[Node] = []
    r_values = np.empty(len(batch))
    r_hat_values = np.empty(len(batch))

    for group in _length_groups(ids):
        group_ids = np.stack([ids[i] for i in group])
        group_labels = labels[group]
        group_noise = noise[:, group, :]
        passed = forward(model, group_ids, group_noise, tape)

        picked = ad.exp(ad.pick(passed.log_probs, np.broadcast_to(group_labels, (k, len(group)))))
        nll = ad.scale(ad.log(ad.clip(picked, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)), -1.0)
        cls_parts.append(ad.total(nll))

        mean_probs = ad.mean(ad.exp(passed.log_probs), axis=0)
        others = mean_probs.value.copy()
        others[np.arange(len(group)), group_labels] = -np.inf
        runner = np.argmax(others, axis=-1)
        radius = signed_radius_on_tape(ad.pick(mean_probs, group_labels), ad.pick(mean_probs, runner), model.sigma)

        lower, upper = propagate_on_tape(
            tape,
            model.encoder,
            model.parameters,
            tape.constant(boxes.lower[group_ids]),
            tape.constant(boxes.upper[group_ids]),
        )
        r_hat = r_hat_on_tape(passed.latent, lower, upper)
        hinge = ad.relu(ad.shift(ad.sub(r_hat, radius), margin))
        robust_parts.append(ad.total(hinge))
        r_values[group] = radius.value
        r_hat_values[group] = r_hat.value

    cls_sum = cls_parts[0]
    for part in cls_parts[1:]:
        cls_sum = ad.add(cls_sum, part)
    robust = robust_parts[0]
    for part in robust_parts[1:]:
        robust = ad.add(robust, part)
    return BatchTerms(tape, cls_sum, ad.scale(robust, 1.0 / len(batch)), r_values, r_hat_values)


def _check_noise(model: ModelCheckpoint, spec: NoiseSpec, k: int) -> None:
    if k < 1:
        raise ConfigurationError(f"noise sample count must be at least 1, got {k}")
    if spec.dim != model.latent_dim:
        raise ConfigurationError(f"noise dimension {spec.dim} does not match latent dimension {model.latent_dim}")


def _batch_noise(spec: NoiseSpec, start: int, k: int, batch_size: int) -> np.ndarray:
    return sample_noise_batch(spec, start, k * batch_size).reshape(k, batch_size, spec.dim)


def loss_cls(
    model: ModelCheckpoint,
    batch: list[LabeledExample],
    spec: NoiseSpec,
    k: int,
    table: SubstitutionTable | None = None,
    start: int = 0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean clamped noisy cross-entropy over batch and noise samples, with its gradients."""
    _check_noise(model, spec, k)
    boxes = vocabulary_boxes(model_embeddings(model), table or SubstitutionTable())
    terms = record_batch(model, batch, _batch_noise(spec, start, k, len(batch)), boxes, margin=0.0)
    loss = ad.scale(terms.cls_sum, 1.0 / (k * len(batch)))
    return float(loss.value), gradient(terms.tape, loss)


def loss_robust(
    model: ModelCheckpoint,
    batch: list[LabeledExample],
    spec: NoiseSpec,
    margin: float,
    k: int,
    table: SubstitutionTable,
    start: int = 0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean hinge max(0, R_hat - R + m) over the batch, with its gradients."""
    _check_noise(model, spec, k)
    boxes = vocabulary_boxes(model_embeddings(model), table)
    terms = record_batch(model, batch, _batch_noise(spec, start, k, len(batch)), boxes, margin)
    return float(terms.robust.value), gradient(terms.tape, terms.robust)


def clean_accuracy(model: ModelCheckpoint, examples: list[LabeledExample]) -> float:
    """Noise-free accuracy of f(s(x))."""
    if not examples:
        return 0.0
    ids, labels = encode_batch(model, examples)
    correct = 0
    for group in _length_groups(ids):
        latent = latent_vector(model, np.stack([ids[i] for i in group]))
        predicted = np.argmax(predict_log_probs(model, latent), axis=-1)
        correct += int(np.sum(predicted == labels[group]))
    return correct / len(examples)


class TrainerAgent:
    """Runs the two-phase training procedure for one TrainConfig."""

    def __init__(self, config: TrainConfig, table: SubstitutionTable) -> None:
        self.config = config
        self.table = table
        self.hyper = AdamHyper(
            learning_rate=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.adam_eps,
        )

    def gamma_effective(self, phase: int, phase2_step: int) -> float:
        """0 in phase 1; in phase 2 a linear ramp reaching gamma at warmup_steps (1-based step)."""
        if phase == 1:
            return 0.0
        if self.config.warmup_steps == 0:
            return self.config.gamma
        return self.config.gamma * min(1.0, phase2_step / self.config.warmup_steps)

    def train(
        self,
        model: ModelCheckpoint,
        dataset: list[LabeledExample],
        on_checkpoint: CheckpointCallback | None = None,
    ) -> TrainingResult:
        """
        Train `model` on `dataset`.

        Raises:
            DataError: if the dataset is empty or a label is out of range.
            TrainingDivergedError: on a non-finite or exploding loss; carries the last good checkpoint.
        """
        config = self.config
        if not dataset:
            raise DataError("cannot train on an empty dataset")
        validate_architecture(model)
        model = model.model_copy(update={"sigma": config.sigma})
        encode_batch(model, dataset)

        if config.upper_bound_regime:
            logger.info("gamma * m = %.3f >= 1: hinge term bounds the certification error", config.gamma * config.margin)
        else:
            logger.warning("gamma * m = %.3f < 1: outside the upper-bound regime", config.gamma * config.margin)

        boxes = vocabulary_boxes(model_embeddings(model), self.table)
        spec = NoiseSpec(sigma=config.sigma, dim=model.latent_dim, seed=derive_seed(config.seed, "train-noise"))
        state = AdamState()
        result = TrainingResult(checkpoint=model)
        global_step = 0
        phase2_step = 0
        total_epochs = config.cls_epochs + config.robust_epochs

        for epoch in range(total_epochs):
            phase = 1 if epoch < config.cls_epochs else 2
            if phase == 2 and epoch == config.cls_epochs and config.cls_epochs > 0:
                result.phase1_checkpoint = model
                if on_checkpoint is not None:
                    on_checkpoint(1, model)

            order = np.random.default_rng(derive_seed(config.seed, "train-shuffle", epoch)).permutation(len(dataset))
            epoch_steps: list[StepDiagnostics] = []
            for first in range(0, len(dataset), config.batch_size):
                batch = [dataset[i] for i in order[first : first + config.batch_size]]
                if phase == 2:
                    phase2_step += 1
                gamma = self.gamma_effective(phase, phase2_step)
                noise = _batch_noise(spec, global_step * config.noise_samples * config.batch_size, config.noise_samples, len(batch))

                model, state, diagnostics = self._step(model, state, batch, noise, boxes, gamma, global_step, epoch, phase)
                epoch_steps.append(diagnostics)
                global_step += 1

            result.steps.extend(epoch_steps)
            summary = self._summarize(epoch, phase, epoch_steps, clean_accuracy(model, dataset))
            result.epochs.append(summary)
            logger.info(
                "epoch %d (phase %d): loss %.4f cls %.4f robust %.4f R %.3f R_hat %.3f acc %.3f",
                epoch,
                phase,
                summary.total_loss,
                summary.loss_cls,
                summary.loss_robust,
                summary.mean_r,
                summary.mean_r_hat,
                summary.clean_accuracy,
            )

        if config.cls_epochs > 0 and config.robust_epochs == 0:
            result.phase1_checkpoint = model
        result.checkpoint = model
        if on_checkpoint is not None:
            on_checkpoint(2 if config.robust_epochs else 1, model)
        return result

    def _step(
        self,
        model: ModelCheckpoint,
        state: AdamState,
        batch: list[LabeledExample],
        noise: np.ndarray,
        boxes: IntervalTensor,
        gamma: float,
        step: int,
        epoch: int,
        phase: int,
    ) -> tuple[ModelCheckpoint, AdamState, StepDiagnostics]:
        config = self.config
        terms = record_batch(model, batch, noise, boxes, config.margin)
        loss_cls_node = ad.scale(terms.cls_sum, 1.0 / (noise.shape[0] * len(batch)))
        total = loss_cls_node if gamma == 0.0 else ad.add(loss_cls_node, ad.scale(terms.robust, gamma))

        values = (float(loss_cls_node.value), float(terms.robust.value), float(total.value))
        if not all(math.isfinite(v) and abs(v) <= DIVERGENCE_LIMIT for v in values):
            logger.error("Training diverged at step %d: losses %s", step, values)
            raise TrainingDivergedError(f"loss diverged at step {step}: {values}", last_good=model)

        hinge_violations = 0
        if config.upper_bound_regime:
            hinge = np.maximum(terms.r_hat - terms.r + config.margin, 0.0)
            indicator = (terms.r_hat >= terms.r).astype(np.float64)
            hinge_violations = int(np.any(config.gamma * hinge < indicator))

        grads = gradient(terms.tape, total)
        parameters, state = adam_step(model.parameters, grads, state, self.hyper)
        model = model.model_copy(update={"parameters": parameters})

        diagnostics = StepDiagnostics(
            step=step,
            epoch=epoch,
            phase=phase,
            gamma_effective=gamma,
            loss_cls=values[0],
            loss_robust=values[1],
            total_loss=values[2],
            mean_r=float(np.mean(terms.r)),
            mean_r_hat=float(np.mean(terms.r_hat)),
            cert_error_indicator_mean=float(np.mean(terms.r <= terms.r_hat)),
            hinge_violations=hinge_violations,
        )
        return model, state, diagnostics

    @staticmethod
    def _summarize(epoch: int, phase: int, steps: list[StepDiagnostics], accuracy: float) -> EpochDiagnostics:
        return EpochDiagnostics(
            epoch=epoch,
            phase=phase,
            steps=len(steps),
            gamma_effective=steps[-1].gamma_effective,
            loss_cls=float(np.mean([s.loss_cls for s in steps])),
            loss_robust=float(np.mean([s.loss_robust for s in steps])),
            total_loss=float(np.mean([s.total_loss for s in steps])),
            mean_r=float(np.mean([s.mean_r for s in steps])),
            mean_r_hat=float(np.mean([s.mean_r_hat for s in steps])),
            cert_error_indicator_mean=float(np.mean([s.cert_error_indicator_mean for s in steps])),
            hinge_violations=sum(s.hinge_violations for s in steps),
            clean_accuracy=accuracy,
        )

    def remark3_check(
        self,
        model: ModelCheckpoint,
        sample: list[LabeledExample],
        high_draws: int,
    ) -> HingeDominanceReport:
        """
        Evaluate gamma * hinge >= 1(R <= R_hat) per example with high-draw soft expectations.

        Raises:
            ConfigurationError: if gamma * m < 1, where the inequality is not guaranteed.
        """
        config = self.config
        if not config.upper_bound_regime:
            raise ConfigurationError(
                f"gamma * m = {config.gamma * config.margin} < 1: the hinge term does not bound the "
                "certification error, so the check is refused"
            )
        embeddings = model_embeddings(model)
        index = model.word_index()
        spec = NoiseSpec(sigma=model.sigma, dim=model.latent_dim, seed=derive_seed(config.seed, "hinge-bound"))
        report = HingeDominanceReport(gamma=config.gamma, margin=config.margin, high_draws=high_draws)
        for example in sample:
            ids = encode_tokens(example.tokens, index)
            if not 0 <= example.label < model.num_classes:
                raise DataError(f"example {example.example_id} has label {example.label} out of range")
            probs = soft_expectation(model, ids, spec, high_draws)
            others = probs.copy()
            others[example.label] = -np.inf
            runner = int(np.argmax(others))
            r = signed_radius(float(probs[example.label]), float(probs[runner]), model.sigma)
            r_hat = certified_latent_radius(model, example.tokens, self.table, embeddings, latent_vector(model, ids))
            hinge = max(0.0, r_hat - r + config.margin)
            indicator = int(r <= r_hat)
            dominated = config.gamma * hinge >= indicator
            report.rows.append(
                HingeDominanceRow(
                    example_id=example.example_id,
                    r=r,
                    r_hat=r_hat,
                    hinge=hinge,
                    cross_entropy=-math.log(clamp_probability(float(probs[example.label]))),
                    indicator=indicator,
                    dominated=dominated,
                )
            )

        if report.rows:
            report.violations = sum(not row.dominated for row in report.rows)
            report.mean_cross_entropy = float(np.mean([row.cross_entropy for row in report.rows]))
            report.mean_hinge = float(np.mean([row.hinge for row in report.rows]))
            report.objective = report.mean_cross_entropy + config.gamma * report.mean_hinge
            report.certification_error = float(np.mean([row.indicator for row in report.rows]))
            report.bound_gap = report.objective - report.certification_error
        logger.info(
            "Hinge dominance over %d examples: %d violations, bound gap %.4f",
            len(report.rows),
            report.violations,
            report.bound_gap,
        )
        return report


def train(
    model: ModelCheckpoint,
    dataset: list[LabeledExample],
    config: TrainConfig,
    table: SubstitutionTable,
    on_checkpoint: CheckpointCallback | None = None,
) -> TrainingResult:
    """Convenience wrapper around TrainerAgent.train."""
    return TrainerAgent(config, table).train(model, dataset, on_checkpoint)


def remark3_check(
    model: ModelCheckpoint,
    sample: list[LabeledExample],
    config: TrainConfig,
    table: SubstitutionTable,
    high_draws: int,
) -> HingeDominanceReport:
    """Convenience wrapper around TrainerAgent.remark3_check."""
    return TrainerAgent(config, table).remark3_check(model, sample, high_draws)
