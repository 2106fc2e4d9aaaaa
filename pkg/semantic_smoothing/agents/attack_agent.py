"""
Empirical attacks on the smoothed classifier.

All attacks query a SmoothedScorer: a fixed set of noise draws under a fixed
seed, so repeated queries of the same input give the same answer.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from semantic_smoothing.config import derive_seed
from semantic_smoothing.errors import DomainError
from semantic_smoothing.models.schemas import AttackOutcome, AttackSummary, ExhaustiveOutcome, LabeledExample, NoiseSpec
from semantic_smoothing.models.state import ModelCheckpoint, SubstitutionTable
from semantic_smoothing.netcore.network import latent_vector, predict_log_probs
from semantic_smoothing.services.corpus import encode_tokens, enumerate_neighborhood, neighborhood_size
from semantic_smoothing.services.smoothing import sample_noise_batch

logger = logging.getLogger(__name__)

ATTACK_DRAWS = 32
EXHAUSTIVE_CAP = 4096
NEIGHBOR_CHUNK = 64
DRAW_CHUNK = 2048
ATTACKS = ("greedy", "random", "editing")


class SmoothedScorer:
    """Fixed-draw queries of the smoothed classifier."""

    def __init__(self, model: ModelCheckpoint, draws: int = ATTACK_DRAWS, seed: int = 0) -> None:
        if draws < 1:
            raise DomainError(f"scorer needs at least one draw, got {draws}")
        self.model = model
        self.draws = draws
        self.index = model.word_index()
        spec = NoiseSpec(sigma=model.sigma, dim=model.latent_dim, seed=seed)
        self.noise = sample_noise_batch(spec, 0, draws)

    def _latents(self, sequences: list[list[str]]) -> np.ndarray:
        ids = [encode_tokens(tokens, self.index) for tokens in sequences]
        if len({len(row) for row in ids}) == 1:
            return latent_vector(self.model, np.stack(ids))
        return np.stack([latent_vector(self.model, row) for row in ids])

    def evaluate(self, sequences: list[list[str]]) -> tuple[np.ndarray, np.ndarray]:
        """Soft expectations (n, classes) and per-class hard votes (n, classes)."""
        latents = self._latents(sequences)
        num_classes = self.model.num_classes
        soft = np.zeros((len(sequences), num_classes))
        votes = np.zeros((len(sequences), num_classes), dtype=np.int64)
        for first in range(0, self.draws, DRAW_CHUNK):
            noise = self.noise[first : first + DRAW_CHUNK]
            log_probs = predict_log_probs(self.model, latents[:, None, :] + noise[None, :, :])
            soft += np.exp(log_probs).sum(axis=1)
            winners = np.argmax(log_probs, axis=-1)
            for row in range(len(sequences)):
                votes[row] += np.bincount(winners[row], minlength=num_classes)
        return soft / self.draws, votes

    def predict(self, sequences: list[list[str]]) -> np.ndarray:
        """Hard-vote majority class per sequence; ties go to the lowest index."""
        return np.argmax(self.evaluate(sequences)[1], axis=-1)


def _outcome(example: LabeledExample, attack: str, tokens: list[str], prediction: int, queries: int) -> AttackOutcome:
    return AttackOutcome(
        example_id=example.example_id,
        attack=attack,
        adversarial_tokens=list(tokens),
        label=example.label,
        prediction=int(prediction),
        success=int(prediction) != example.label,
        queries=queries,
    )


def greedy_substitution_attack(
    scorer: SmoothedScorer,
    example: LabeledExample,
    table: SubstitutionTable,
    max_passes: int = 3,
) -> AttackOutcome:
    """
    Left-to-right word substitution minimizing the true-class smoothed score.

    A position is changed only on strict improvement, and the earliest best
    candidate wins. The search stops on a flipped prediction, after a pass
    without improvement, or after max_passes.
    """
    original = list(example.tokens)
    current = list(original)
    soft, votes = scorer.evaluate([current])
    score = soft[0, example.label]
    prediction = int(np.argmax(votes[0]))
    queries = 0
    for _ in range(max_passes):
        if prediction != example.label:
            break
        improved = False
        for position, word in enumerate(original):
            candidates = [option for option in table.options(word) if option != current[position]]
            if not candidates:
                continue
            trials = [current[:position] + [option] + current[position + 1 :] for option in candidates]
            soft, votes = scorer.evaluate(trials)
            queries += len(trials)
            best = int(np.argmin(soft[:, example.label]))
            if soft[best, example.label] < score:
                current = trials[best]
                score = soft[best, example.label]
                prediction = int(np.argmax(votes[best]))
                improved = True
                if prediction != example.label:
                    break
        if not improved:
            break
    return _outcome(example, "greedy", current, prediction, queries)


def random_substitution_attack(
    scorer: SmoothedScorer,
    example: LabeledExample,
    table: SubstitutionTable,
    trials: int,
    seed: int,
) -> AttackOutcome:
    """Query uniformly random neighbors until one flips the prediction or trials run out."""
    rng = np.random.default_rng(seed)
    current = list(example.tokens)
    prediction = int(scorer.predict([current])[0])
    queries = 0
    if neighborhood_size(current, table) == 1:
        return _outcome(example, "random", current, prediction, queries)
    for _ in range(trials):
        if prediction != example.label:
            break
        candidate = []
        for word in example.tokens:
            options = table.options(word)
            candidate.append(options[int(rng.integers(len(options)))])
        queries += 1
        candidate_prediction = int(scorer.predict([candidate])[0])
        current, prediction = candidate, candidate_prediction
    return _outcome(example, "random", current, prediction, queries)


def exhaustive_oracle(
    scorer: SmoothedScorer,
    example: LabeledExample,
    table: SubstitutionTable,
    cap: int = EXHAUSTIVE_CAP,
    reference_class: int | None = None,
) -> ExhaustiveOutcome:
    """
    Evaluate every neighbor in lexicographic order and report the first whose
    hard-vote class differs from reference_class (the label by default).

    Neighborhoods larger than `cap` are skipped, not searched.
    """
    reference = example.label if reference_class is None else reference_class
    size = neighborhood_size(example.tokens, table)
    if size > cap:
        logger.info("Skipping example %d: neighborhood of %d exceeds cap %d", example.example_id, size, cap)
        return ExhaustiveOutcome(
            example_id=example.example_id, skipped=True, neighborhood_size=size, reference_class=reference
        )

    checked = 0
    neighbors = enumerate_neighborhood(example.tokens, table)
    while True:
        chunk = list(itertools.islice(neighbors, NEIGHBOR_CHUNK))
        if not chunk:
            break
        predictions = scorer.predict(chunk)
        for neighbor, prediction in zip(chunk, predictions, strict=True):
            checked += 1
            if int(prediction) != reference:
                return ExhaustiveOutcome(
                    example_id=example.example_id,
                    skipped=False,
                    neighborhood_size=size,
                    neighbors_checked=checked,
                    reference_class=reference,
                    flipped=True,
                    outcome=_outcome(example, "exhaustive", neighbor, int(prediction), checked),
                )
    return ExhaustiveOutcome(
        example_id=example.example_id,
        skipped=False,
        neighborhood_size=size,
        neighbors_checked=checked,
        reference_class=reference,
        outcome=_outcome(example, "exhaustive", example.tokens, reference, checked),
    )


def editing_attack(
    scorer: SmoothedScorer,
    example: LabeledExample,
    table: SubstitutionTable,
    edit_budget: int,
    seed: int,
) -> AttackOutcome:
    """
    Up to edit_budget random edits: duplicate a token in place, substitute a
    token within its substitution set, or delete a token. Deletion never
    shortens the sequence below what the encoder accepts. Stops at the first
    edit that flips the prediction.

    Raises:
        DomainError: if edit_budget < 1.
    """
    if edit_budget < 1:
        raise DomainError(f"edit_budget must be at least 1, got {edit_budget}")
    rng = np.random.default_rng(seed)
    floor = max(1, scorer.model.min_sequence_length)
    tokens = list(example.tokens)
    prediction = int(scorer.predict([tokens])[0])
    queries = 0
    for _ in range(edit_budget):
        if prediction != example.label:
            break
        substitutable = [i for i, word in enumerate(tokens) if table.substitutes(word)]
        operations = ["duplicate"]
        if substitutable:
            operations.append("substitute")
        if len(tokens) > floor:
            operations.append("delete")
        operation = operations[int(rng.integers(len(operations)))]
        if operation == "duplicate":
            position = int(rng.integers(len(tokens)))
            tokens.insert(position, tokens[position])
        elif operation == "substitute":
            position = substitutable[int(rng.integers(len(substitutable)))]
            options = table.substitutes(tokens[position])
            tokens[position] = options[int(rng.integers(len(options)))]
        else:
            del tokens[int(rng.integers(len(tokens)))]
        queries += 1
        prediction = int(scorer.predict([tokens])[0])
    return _outcome(example, "editing", tokens, prediction, queries)


class AttackAgent:
    """Runs one named attack over a dataset."""

    def __init__(
        self,
        model: ModelCheckpoint,
        table: SubstitutionTable,
        seed: int = 0,
        draws: int = ATTACK_DRAWS,
        jobs: int = 1,
    ) -> None:
        self.model = model
        self.table = table
        self.seed = seed
        self.jobs = max(1, jobs)
        self.scorer = SmoothedScorer(model, draws=draws, seed=derive_seed(seed, "attack-scorer"))

    def _example_seed(self, example: LabeledExample) -> int:
        return derive_seed(self.seed, "attack") ^ example.example_id

    def attack_one(
        self,
        attack: str,
        example: LabeledExample,
        max_passes: int = 3,
        trials: int = 50,
        edit_budget: int = 10,
    ) -> AttackOutcome:
        if attack == "greedy":
            return greedy_substitution_attack(self.scorer, example, self.table, max_passes)
        if attack == "random":
            return random_substitution_attack(self.scorer, example, self.table, trials, self._example_seed(example))
        if attack == "editing":
            return editing_attack(self.scorer, example, self.table, edit_budget, self._example_seed(example))
        raise DomainError(f"unknown attack {attack!r}; choose one of {', '.join(ATTACKS)}")

    def run(
        self,
        attack: str,
        dataset: list[LabeledExample],
        **options: int,
    ) -> tuple[list[AttackOutcome], AttackSummary]:
        """Attack every example; outcomes come back in dataset order for any job count."""
        if attack not in ATTACKS:
            raise DomainError(f"unknown attack {attack!r}; choose one of {', '.join(ATTACKS)}")
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            outcomes = list(pool.map(lambda example: self.attack_one(attack, example, **options), dataset))
        summary = summarize_attacks(attack, outcomes)
        logger.info(
            "%s attack: %d/%d successes, empirical robust accuracy %.4f",
            attack,
            summary.successes,
            summary.total,
            summary.empirical_robust_accuracy,
        )
        return outcomes, summary

    def exhaustive(
        self,
        example: LabeledExample,
        cap: int = EXHAUSTIVE_CAP,
        reference_class: int | None = None,
    ) -> ExhaustiveOutcome:
        return exhaustive_oracle(self.scorer, example, self.table, cap, reference_class)


def summarize_attacks(attack: str, outcomes: list[AttackOutcome]) -> AttackSummary:
    total = len(outcomes)
    successes = sum(outcome.success for outcome in outcomes)
    return AttackSummary(
        attack=attack,
        total=total,
        successes=successes,
        empirical_robust_accuracy=(total - successes) / total if total else 0.0,
        mean_queries=float(np.mean([outcome.queries for outcome in outcomes])) if total else 0.0,
    )
