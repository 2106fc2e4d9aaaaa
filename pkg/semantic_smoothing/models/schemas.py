from datetime import datetime
from typing import Annotated, Any

from pydantic import BaseModel, ConfigDict, Field, model_validator

Probability = Annotated[float, Field(ge=0.0, le=1.0, allow_inf_nan=False)]

ABSTAIN = None


class BinomialObservation(BaseModel):
    """Counts of a binomial experiment."""

    model_config = ConfigDict(frozen=True)

    successes: int = Field(..., ge=0, description="Number of successes")
    trials: int = Field(..., ge=1, description="Number of trials")

    @model_validator(mode="after")
    def _successes_within_trials(self) -> "BinomialObservation":
        if self.successes > self.trials:
            raise ValueError(f"successes ({self.successes}) exceed trials ({self.trials})")
        return self


class NoiseSpec(BaseModel):
    """Isotropic Gaussian noise over the latent space."""

    model_config = ConfigDict(frozen=True)

    sigma: float = Field(..., gt=0.0, allow_inf_nan=False, description="Noise standard deviation")
    dim: int = Field(..., ge=1, description="Latent dimension")
    seed: int = Field(0, ge=0, lt=2**64, description="64-bit stream key")


class VoteCounts(BaseModel):
    """Per-class hard votes of the smoothed classifier."""

    counts: list[int] = Field(..., min_length=1, description="Votes per class index")

    @model_validator(mode="after")
    def _nonnegative(self) -> "VoteCounts":
        if any(count < 0 for count in self.counts):
            raise ValueError("vote counts must be nonnegative")
        return self

    @property
    def draws(self) -> int:
        return sum(self.counts)

    def top_two(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """Return ((class_a, count_a), (class_b, count_b)); ties go to the lower index."""
        order = sorted(range(len(self.counts)), key=lambda c: (-self.counts[c], c))
        first = order[0]
        if len(order) == 1:
            return (first, self.counts[first]), (first, 0)
        second = order[1]
        return (first, self.counts[first]), (second, self.counts[second])


class TrainConfig(BaseModel):
    """Hyper-parameters of the two-phase training procedure."""

    sigma: float = Field(1.0, gt=0.0, description="Latent noise standard deviation")
    gamma: float = Field(4.0, ge=0.0, description="Weight of the robustness loss")
    margin: float = Field(1.0, description="Target margin between R and R_hat")
    noise_samples: int = Field(1, ge=1, description="Noise draws per example per step")
    learning_rate: float = Field(0.01, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    warmup_steps: int = Field(100, ge=0, description="Steps over which gamma ramps up")
    cls_epochs: int = Field(5, ge=0, description="Epochs of cross-entropy-only training")
    robust_epochs: int = Field(10, ge=0, description="Epochs of the combined objective")
    batch_size: int = Field(32, ge=1)
    seed: int = Field(0, ge=0)
    conv_channels: int = Field(16, ge=1)
    kernel_size: int = Field(3, ge=1)
    latent_dim: int = Field(8, ge=1)
    hidden_dim: int = Field(16, ge=1)

    @property
    def upper_bound_regime(self) -> bool:
        """Whether gamma * margin >= 1, the condition for the hinge to dominate the 0-1 error."""
        return self.gamma * self.margin >= 1.0


class StepDiagnostics(BaseModel):
    """Loss terms of one optimizer step."""

    step: int = Field(..., ge=0)
    epoch: int = Field(..., ge=0)
    phase: int = Field(..., ge=1, le=2)
    gamma_effective: float = Field(..., ge=0.0)
    loss_cls: float
    loss_robust: float
    total_loss: float
    mean_r: float
    mean_r_hat: float
    cert_error_indicator_mean: Probability
    hinge_violations: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _composition(self) -> "StepDiagnostics":
        expected = self.loss_cls + self.gamma_effective * self.loss_robust
        if abs(self.total_loss - expected) > 1e-12:
            raise ValueError(f"total_loss {self.total_loss} != loss_cls + gamma * loss_robust ({expected})")
        return self


class EpochDiagnostics(BaseModel):
    """Per-epoch averages of StepDiagnostics, one row of the training log."""

    epoch: int
    phase: int
    steps: int
    gamma_effective: float = Field(..., description="Effective gamma at the last step of the epoch")
    loss_cls: float
    loss_robust: float
    total_loss: float
    mean_r: float
    mean_r_hat: float
    cert_error_indicator_mean: float
    hinge_violations: int
    clean_accuracy: float = Field(..., description="Noise-free accuracy on the training set")


class SyntheticSpec(BaseModel):
    """Shape of a generated confounded corpus."""

    vocabulary_size: int = Field(200, ge=2)
    num_clusters: int = Field(12, ge=1, description="Number of substitution clusters")
    cluster_size: int = Field(4, ge=1, description="Headword plus substitutes per cluster")
    content_strength: float = Field(
        0.85, ge=0.0, le=1.0, description="Probability a content token is drawn from a cluster of the target class"
    )
    content_tokens: int = Field(5, ge=1, description="Content tokens per sequence")
    confounder_strength: float = Field(
        0.9, ge=0.0, le=1.0, description="Train-time probability that the style token is the label's style"
    )
    style_tokens_per_class: int = Field(2, ge=1)
    sequence_length: int = Field(12, ge=2)
    num_classes: int = Field(2, ge=2)
    embedding_dim: int = Field(8, ge=1)
    num_train: int = Field(1000, ge=1)
    num_test: int = Field(200, ge=0)
    seed: int = Field(0, ge=0)


class LabeledExample(BaseModel):
    """One tokenized, labeled input."""

    example_id: int = Field(..., ge=0)
    tokens: list[str] = Field(..., min_length=1)
    label: int = Field(..., ge=0)


class CertificationRecord(BaseModel):
    """Outcome of certifying one example."""

    example_id: int
    label: int | None = Field(None, description="True label, when known")
    cls_a: int = Field(..., description="Majority class of the selection draws")
    predicted_class: int | None = Field(None, description="Certified class, absent on abstention")
    clean_prediction: int | None = Field(None, description="Prediction test on the estimation draws")
    p_a_lower: Probability
    radius_r: float = Field(..., ge=0.0)
    radius_r_hat: float = Field(..., ge=0.0)
    certified: bool
    abstain: bool
    alpha: Probability
    t1: int = Field(..., ge=1)
    t2: int = Field(..., ge=1)
    seed: int

    @model_validator(mode="after")
    def _certificate_consistency(self) -> "CertificationRecord":
        if self.certified and not (
            self.p_a_lower > 0.5 and self.radius_r >= self.radius_r_hat and not self.abstain
        ):
            raise ValueError("certified record must have p_a_lower > 1/2, R >= R_hat and no abstention")
        if self.abstain and (self.certified or self.predicted_class is not None):
            raise ValueError("abstaining record cannot be certified or carry a prediction")
        if not self.abstain and self.predicted_class is None:
            raise ValueError("non-abstaining record needs a predicted class")
        return self

    def to_report_line(self) -> dict[str, Any]:
        return {
            "example_id": self.example_id,
            "label": self.label,
            "predicted": self.predicted_class,
            "certified": self.certified,
            "cls_a": self.cls_a,
            "clean_prediction": self.clean_prediction,
            "p_a_lower": self.p_a_lower,
            "R": self.radius_r,
            "R_hat": self.radius_r_hat,
            "alpha": self.alpha,
            "t1": self.t1,
            "t2": self.t2,
            "seed": self.seed,
        }


class CertificationSummary(BaseModel):
    """Dataset-level certification statistics; abstentions count as incorrect."""

    total: int = 0
    certified: int = 0
    certified_correct: int = 0
    clean_correct: int = 0
    abstained: int = 0
    certified_accuracy: float = 0.0
    clean_accuracy: float = 0.0
    abstention_rate: float = 0.0
    sigma: float | None = None
    alpha: float | None = None
    t1: int | None = None
    t2: int | None = None


class AttackOutcome(BaseModel):
    """Result of attacking one example."""

    example_id: int
    attack: str
    adversarial_tokens: list[str]
    label: int
    prediction: int
    success: bool
    queries: int = Field(..., ge=0)

    @model_validator(mode="after")
    def _success_matches_prediction(self) -> "AttackOutcome":
        if self.success != (self.prediction != self.label):
            raise ValueError("success must hold exactly when the prediction differs from the label")
        return self


class ExhaustiveOutcome(BaseModel):
    """Exhaustive enumeration of a neighborhood, or a flagged skip above the cap."""

    example_id: int
    skipped: bool
    neighborhood_size: int
    neighbors_checked: int = 0
    reference_class: int
    flipped: bool = Field(False, description="Some neighbor's majority class differs from reference_class")
    outcome: AttackOutcome | None = None


class SoundnessReport(BaseModel):
    """Exhaustive re-check of certified examples."""

    checked: int = 0
    skipped: int = 0
    failures: int = 0
    failing_ids: list[int] = Field(default_factory=list)
    draws: int = 0


class AttackSummary(BaseModel):
    attack: str
    total: int = 0
    successes: int = 0
    empirical_robust_accuracy: float = 0.0
    mean_queries: float = 0.0


class HingeDominanceRow(BaseModel):
    example_id: int
    r: float
    r_hat: float
    hinge: float
    cross_entropy: float
    indicator: int = Field(..., ge=0, le=1, description="1 when R <= R_hat")
    dominated: bool = Field(..., description="gamma * hinge >= indicator")


class HingeDominanceReport(BaseModel):
    """Evaluation of the certification-error upper bound on a sample."""

    gamma: float
    margin: float
    high_draws: int
    rows: list[HingeDominanceRow] = Field(default_factory=list)
    violations: int = 0
    mean_cross_entropy: float = 0.0
    mean_hinge: float = 0.0
    objective: float = Field(0.0, description="mean cross-entropy + gamma * mean hinge")
    certification_error: float = Field(0.0, description="1 - mean 1(R - R_hat > 0)")
    bound_gap: float = Field(0.0, description="objective - certification_error")


class SweepRow(BaseModel):
    """One point of a trade-off, ablation or alpha/t2 comparison."""

    experiment: str
    parameter: str
    value: float
    t2: int
    alpha: float
    clean_accuracy: float
    certified_accuracy: float
    abstention_rate: float


class RunManifest(BaseModel):
    """Provenance written next to every run's artifacts."""

    command: str
    config: dict[str, Any] = Field(default_factory=dict)
    seeds: dict[str, int] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    tool_version: str
    started_at: datetime
    duration_seconds: float = 0.0
