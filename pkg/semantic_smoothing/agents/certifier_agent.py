"""
Abstention-aware prediction and certification of the smoothed classifier.

Selection uses noise draws [0, t1), estimation uses the fresh draws
[t1, t1 + t2). An example is certified when the Clopper-Pearson lower bound on
the top class exceeds 1/2 and the resulting radius covers R_hat.
"""

import csv
import json
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from semantic_smoothing.agents.attack_agent import EXHAUSTIVE_CAP, SmoothedScorer, exhaustive_oracle
from semantic_smoothing.config import derive_seed
from semantic_smoothing.errors import CertificationError, DomainError, SmoothingError
from semantic_smoothing.models.schemas import (
    ABSTAIN,
    CertificationRecord,
    CertificationSummary,
    LabeledExample,
    NoiseSpec,
    SoundnessReport,
    VoteCounts,
)
from semantic_smoothing.models.state import EmbeddingMatrix, ModelCheckpoint, SubstitutionTable
from semantic_smoothing.netcore.network import latent_vector, validate_architecture
from semantic_smoothing.services.corpus import encode_tokens
from semantic_smoothing.services.ibp import certified_latent_radius, model_embeddings
from semantic_smoothing.services.smoothing import hard_radius, hard_votes
from semantic_smoothing.services.statistics import check_probability, lower_conf_bound, pvalue_binom

logger = logging.getLogger(__name__)


def prediction_test(votes: VoteCounts, alpha: float) -> int | None:
    """Top class if the two-sided binomial test of its count against the runner-up rejects p = 1/2 at alpha."""
    (top, count_top), (_, count_runner) = votes.top_two()
    if count_top + count_runner == 0:
        return ABSTAIN
    if pvalue_binom(count_top, count_top + count_runner, 0.5) <= alpha:
        return top
    return ABSTAIN


def _check_alpha(alpha: float) -> float:
    return check_probability(alpha, "alpha", open_interval=True)


def predict(
    model: ModelCheckpoint,
    inputs: np.ndarray,
    spec: NoiseSpec,
    t: int,
    alpha: float,
) -> int | None:
    """Hard-vote prediction over t draws, or None (abstain) when the evidence is insufficient at level alpha."""
    alpha = _check_alpha(alpha)
    return prediction_test(hard_votes(model, inputs, spec, t), alpha)


def certify(
    model: ModelCheckpoint,
    tokens: list[str],
    table: SubstitutionTable,
    spec: NoiseSpec,
    t1: int,
    t2: int,
    alpha: float,
    example_id: int = 0,
    label: int | None = None,
    embeddings: EmbeddingMatrix | None = None,
) -> CertificationRecord:
    """
    Certify one input.

    Raises:
        StructuralError: if the encoder cannot be bounded by IBP.
        DomainError: if t1, t2 or alpha are out of range.
    """
    alpha = _check_alpha(alpha)
    if t1 < 1 or t2 < 1:
        raise DomainError(f"t1 and t2 must be at least 1, got t1={t1}, t2={t2}")
    if embeddings is None:
        embeddings = model_embeddings(model)
    ids = encode_tokens(tokens, model.word_index())

    selection = hard_votes(model, ids, spec, t1, start=0)
    (cls_a, _), _ = selection.top_two()
    estimation = hard_votes(model, ids, spec, t2, start=t1)
    p_a_lower = lower_conf_bound(estimation.counts[cls_a], t2, 1.0 - alpha)
    radius = hard_radius(p_a_lower, spec.sigma)
    r_hat = certified_latent_radius(model, tokens, table, embeddings, latent_vector(model, ids))
    certified = radius is not None and radius >= r_hat

    return CertificationRecord(
        example_id=example_id,
        label=label,
        cls_a=cls_a,
        predicted_class=cls_a if certified else ABSTAIN,
        clean_prediction=prediction_test(estimation, alpha),
        p_a_lower=p_a_lower,
        radius_r=radius if radius is not None else 0.0,
        radius_r_hat=r_hat,
        certified=certified,
        abstain=not certified,
        alpha=alpha,
        t1=t1,
        t2=t2,
        seed=spec.seed,
    )


def summarize(
    records: Sequence[CertificationRecord],
    sigma: float | None = None,
    alpha: float | None = None,
    t1: int | None = None,
    t2: int | None = None,
) -> CertificationSummary:
    """Dataset statistics; abstentions count as incorrect and an empty dataset has accuracy 0."""
    total = len(records)
    certified = sum(r.certified for r in records)
    certified_correct = sum(r.certified and r.predicted_class == r.label for r in records)
    clean_correct = sum(r.clean_prediction is not None and r.clean_prediction == r.label for r in records)
    abstained = sum(r.abstain for r in records)
    return CertificationSummary(
        total=total,
        certified=certified,
        certified_correct=certified_correct,
        clean_correct=clean_correct,
        abstained=abstained,
        certified_accuracy=certified_correct / total if total else 0.0,
        clean_accuracy=clean_correct / total if total else 0.0,
        abstention_rate=abstained / total if total else 0.0,
        sigma=sigma,
        alpha=alpha,
        t1=t1,
        t2=t2,
    )


class CertifierAgent:
    """Certifies datasets for one model, table and (t1, t2, alpha, seed) setting."""

    def __init__(
        self,
        model: ModelCheckpoint,
        table: SubstitutionTable,
        t1: int,
        t2: int,
        alpha: float,
        seed: int = 0,
        jobs: int = 1,
    ) -> None:
        validate_architecture(model)
        self.model = model
        self.table = table
        self.t1 = t1
        self.t2 = t2
        self.alpha = _check_alpha(alpha)
        self.seed = seed
        self.jobs = max(1, jobs)
        self.embeddings = model_embeddings(model)

    def example_seed(self, example_id: int) -> int:
        return derive_seed(self.seed, "certify") ^ example_id

    def certify_example(self, example: LabeledExample) -> CertificationRecord:
        spec = NoiseSpec(sigma=self.model.sigma, dim=self.model.latent_dim, seed=self.example_seed(example.example_id))
        try:
            return certify(
                self.model,
                example.tokens,
                self.table,
                spec,
                self.t1,
                self.t2,
                self.alpha,
                example_id=example.example_id,
                label=example.label,
                embeddings=self.embeddings,
            )
        except (SmoothingError, KeyError, ValueError) as e:
            raise CertificationError(example.example_id, e) from e

    def certify_dataset(
        self, dataset: Sequence[LabeledExample]
    ) -> tuple[list[CertificationRecord], CertificationSummary]:
        """Certify every example; records keep dataset order for any job count."""
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            records = list(pool.map(self.certify_example, dataset))
        summary = summarize(records, sigma=self.model.sigma, alpha=self.alpha, t1=self.t1, t2=self.t2)
        logger.info(
            "Certified %d/%d examples (certified accuracy %.4f, clean accuracy %.4f, abstention rate %.4f)",
            summary.certified,
            summary.total,
            summary.certified_accuracy,
            summary.clean_accuracy,
            summary.abstention_rate,
        )
        return records, summary

    def soundness_check(
        self,
        records: Sequence[CertificationRecord],
        dataset: Sequence[LabeledExample],
        cap: int = EXHAUSTIVE_CAP,
        draws: int | None = None,
    ) -> SoundnessReport:
        """
        Enumerate the neighborhood of every certified example and look for a
        neighbor whose majority class differs from the certified one.

        Votes use `draws` fixed draws (10 * t2 by default).
        """
        draws = draws or 10 * self.t2
        scorer = SmoothedScorer(self.model, draws=draws, seed=derive_seed(self.seed, "soundness"))
        by_id = {example.example_id: example for example in dataset}
        report = SoundnessReport(draws=draws)
        for record in records:
            if not record.certified:
                continue
            outcome = exhaustive_oracle(scorer, by_id[record.example_id], self.table, cap, record.predicted_class)
            if outcome.skipped:
                report.skipped += 1
                continue
            report.checked += 1
            if outcome.flipped:
                report.failures += 1
                report.failing_ids.append(record.example_id)
        logger.info(
            "Soundness check: %d certified examples enumerated, %d skipped, %d failures",
            report.checked,
            report.skipped,
            report.failures,
        )
        return report


def certify_dataset(
    model: ModelCheckpoint,
    dataset: Sequence[LabeledExample],
    table: SubstitutionTable,
    t1: int,
    t2: int,
    alpha: float,
    seed: int = 0,
    jobs: int = 1,
) -> tuple[list[CertificationRecord], CertificationSummary]:
    """Convenience wrapper around CertifierAgent.certify_dataset."""
    return CertifierAgent(model, table, t1, t2, alpha, seed, jobs).certify_dataset(dataset)


def write_report(
    records: Sequence[CertificationRecord],
    summary: CertificationSummary,
    path: Path | str,
) -> Path:
    """JSON lines, one record per line, then a trailing summary object."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_report_line()) + "\n")
        handle.write(json.dumps({"summary": summary.model_dump()}) + "\n")
    return path


def write_summary_csv(rows: Sequence[BaseModel], path: Path | str) -> Path:
    """CSV with one row per model, columns in field order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dumped = [row.model_dump() for row in rows]
    with path.open("w", encoding="utf-8", newline="") as handle:
        if dumped:
            writer = csv.DictWriter(handle, fieldnames=list(dumped[0]))
            writer.writeheader()
            writer.writerows(dumped)
    return path


def soundness_check(
    model: ModelCheckpoint,
    records: Sequence[CertificationRecord],
    dataset: Sequence[LabeledExample],
    table: SubstitutionTable,
    cap: int = EXHAUSTIVE_CAP,
    draws: int | None = None,
    seed: int = 0,
) -> SoundnessReport:
    """Convenience wrapper around CertifierAgent.soundness_check."""
    t2 = max((record.t2 for record in records), default=1)
    alpha = records[0].alpha if records else 0.5
    agent = CertifierAgent(model, table, t1=1, t2=t2, alpha=alpha, seed=seed)
    return agent.soundness_check(records, dataset, cap=cap, draws=draws)
