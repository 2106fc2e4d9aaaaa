import numpy as np
import pytest

from semantic_smoothing.agents.attack_agent import (
    AttackAgent,
    SmoothedScorer,
    editing_attack,
    exhaustive_oracle,
    greedy_substitution_attack,
    random_substitution_attack,
    summarize_attacks,
)
from semantic_smoothing.agents.certifier_agent import certify_dataset
from semantic_smoothing.errors import DomainError
from semantic_smoothing.models.schemas import AttackOutcome
from semantic_smoothing.models.state import SubstitutionTable


@pytest.fixture(scope="module")
def scorer(trained_model):
    return SmoothedScorer(trained_model, draws=64, seed=2)


def in_neighborhood(tokens, original, table):
    return len(tokens) == len(original) and all(
        word in table.options(source) for word, source in zip(tokens, original, strict=True)
    )


def test_scorer_is_deterministic(scorer, tiny_corpus):
    tokens = [tiny_corpus.test[0].tokens, tiny_corpus.test[1].tokens]
    first_soft, first_votes = scorer.evaluate(tokens)
    second_soft, second_votes = scorer.evaluate(tokens)
    np.testing.assert_array_equal(first_soft, second_soft)
    np.testing.assert_array_equal(first_votes, second_votes)
    assert first_votes.sum(axis=1).tolist() == [64, 64]
    np.testing.assert_allclose(first_soft.sum(axis=1), 1.0, atol=1e-12)


def test_scorer_needs_draws(trained_model):
    with pytest.raises(DomainError):
        SmoothedScorer(trained_model, draws=0)


def test_substitution_attacks_stay_in_the_neighborhood(scorer, tiny_corpus):
    for example in tiny_corpus.test[:6]:
        greedy = greedy_substitution_attack(scorer, example, tiny_corpus.table, max_passes=2)
        random = random_substitution_attack(scorer, example, tiny_corpus.table, trials=10, seed=4)
        for outcome in (greedy, random):
            assert in_neighborhood(outcome.adversarial_tokens, example.tokens, tiny_corpus.table)
            assert outcome.success == (outcome.prediction != example.label)


def test_no_substitutes_means_no_queries(scorer, tiny_corpus):
    example = tiny_corpus.test[0]
    empty = SubstitutionTable()
    for outcome in (
        greedy_substitution_attack(scorer, example, empty),
        random_substitution_attack(scorer, example, empty, trials=10, seed=0),
    ):
        assert outcome.queries == 0
        assert outcome.adversarial_tokens == example.tokens


def test_greedy_success_implies_exhaustive_success(scorer, tiny_corpus):
    for example in tiny_corpus.test[:8]:
        greedy = greedy_substitution_attack(scorer, example, tiny_corpus.table)
        oracle = exhaustive_oracle(scorer, example, tiny_corpus.table, cap=4096)
        assert not oracle.skipped
        if greedy.success:
            assert oracle.flipped


def test_exhaustive_reports_first_flip(scorer, tiny_corpus):
    example = tiny_corpus.test[2]
    predicted = int(scorer.predict([example.tokens])[0])
    oracle = exhaustive_oracle(scorer, example, tiny_corpus.table, reference_class=1 - predicted)
    assert oracle.flipped
    assert oracle.neighbors_checked == 1
    assert oracle.outcome.adversarial_tokens == example.tokens


def test_exhaustive_skips_above_cap(scorer, tiny_corpus):
    oracle = exhaustive_oracle(scorer, tiny_corpus.test[0], tiny_corpus.table, cap=0)
    assert oracle.skipped
    assert oracle.neighbors_checked == 0
    assert oracle.outcome is None


def test_editing_attack_rejects_empty_budget(scorer, tiny_corpus):
    with pytest.raises(DomainError):
        editing_attack(scorer, tiny_corpus.test[0], tiny_corpus.table, edit_budget=0, seed=0)


def test_editing_attack_respects_budget_and_length(scorer, tiny_corpus, trained_model):
    for example in tiny_corpus.test[:6]:
        outcome = editing_attack(scorer, example, tiny_corpus.table, edit_budget=5, seed=9)
        assert outcome.queries <= 5
        assert len(outcome.adversarial_tokens) >= trained_model.min_sequence_length
        assert abs(len(outcome.adversarial_tokens) - len(example.tokens)) <= outcome.queries


def test_agent_is_deterministic_across_jobs(trained_model, tiny_corpus):
    sample = tiny_corpus.test[:6]
    serial = AttackAgent(trained_model, tiny_corpus.table, seed=3, draws=32, jobs=1)
    parallel = AttackAgent(trained_model, tiny_corpus.table, seed=3, draws=32, jobs=3)
    for attack in ("greedy", "random", "editing"):
        first, first_summary = serial.run(attack, sample)
        second, second_summary = parallel.run(attack, sample)
        assert first == second
        assert first_summary == second_summary


def test_greedy_attack_respects_certification_and_beats_random(trained_model, tiny_corpus):
    sample = tiny_corpus.test
    _, certified = certify_dataset(trained_model, sample, tiny_corpus.table, 20, 200, 0.01, seed=5)
    agent = AttackAgent(trained_model, tiny_corpus.table, seed=5, draws=512)
    _, greedy = agent.run("greedy", sample)
    _, baseline = agent.run("random", sample, trials=3)
    assert greedy.empirical_robust_accuracy >= certified.certified_accuracy
    assert greedy.successes >= baseline.successes


def test_agent_rejects_unknown_attack(trained_model, tiny_corpus):
    agent = AttackAgent(trained_model, tiny_corpus.table)
    with pytest.raises(DomainError):
        agent.run("hotflip", tiny_corpus.test[:1])


def test_summary_counts():
    outcomes = [
        AttackOutcome(example_id=0, attack="greedy", adversarial_tokens=["a"], label=0, prediction=1, success=True, queries=4),
        AttackOutcome(example_id=1, attack="greedy", adversarial_tokens=["b"], label=0, prediction=0, success=False, queries=2),
    ]
    summary = summarize_attacks("greedy", outcomes)
    assert summary.successes == 1
    assert summary.empirical_robust_accuracy == 0.5
    assert summary.mean_queries == 3.0
    assert summarize_attacks("greedy", []).empirical_robust_accuracy == 0.0


def test_outcome_success_must_match_prediction():
    with pytest.raises(ValueError):
        AttackOutcome(example_id=0, attack="greedy", adversarial_tokens=["a"], label=0, prediction=0, success=True, queries=0)
