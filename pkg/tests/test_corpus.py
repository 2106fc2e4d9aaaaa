import json

import numpy as np
import pytest
from scipy import stats

from semantic_smoothing.errors import ConfigurationError, CorpusFormatError, VocabularyLookupError
from semantic_smoothing.models.schemas import LabeledExample, SyntheticSpec
from semantic_smoothing.models.state import EmbeddingMatrix, SubstitutionTable
from semantic_smoothing.services.corpus import (
    SATURATED_SIZE,
    encode_tokens,
    enumerate_neighborhood,
    generate_synthetic,
    label_from_tokens,
    load_dataset,
    load_embeddings,
    load_substitution_table,
    neighborhood_size,
    save_dataset,
    save_embeddings,
    tokenize,
)


class TestEmbeddingsFile:
    def test_round_trip(self, tmp_path):
        embeddings = EmbeddingMatrix(words=["good", "bad"], vectors=np.array([[0.1, -2.5], [1 / 3, 7.0]]))
        loaded = load_embeddings(save_embeddings(embeddings, tmp_path / "vectors.txt"))
        assert loaded.words == ["good", "bad"]
        np.testing.assert_array_equal(loaded.vectors, embeddings.vectors)

    @pytest.mark.parametrize(
        ("content", "line"),
        [
            ("a 1 2\nb 1\n", 2),
            ("a 1 2\na 3 4\n", 2),
            ("a 1 2\nb 1 x\n", 2),
            ("a 1 nan\n", 1),
            ("a\n", 1),
        ],
    )
    def test_malformed_rows(self, tmp_path, content, line):
        path = tmp_path / "vectors.txt"
        path.write_text(content, encoding="utf-8")
        with pytest.raises(CorpusFormatError) as info:
            load_embeddings(path)
        assert info.value.line == line

    def test_empty_file(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError):
            load_embeddings(path)


class TestSubstitutionFile:
    def test_normalizes_entries(self, tmp_path):
        path = tmp_path / "table.json"
        path.write_text(json.dumps({"good": ["fine", "good", "fine", "great"]}), encoding="utf-8")
        table = load_substitution_table(path)
        assert table.substitutes("good") == ["fine", "great"]
        assert table.options("good") == ["good", "fine", "great"]
        assert table.substitutes("absent") == []

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "table.json"
        path.write_text('{"good": [', encoding="utf-8")
        with pytest.raises(CorpusFormatError):
            load_substitution_table(path)

    def test_entries_must_be_string_lists(self, tmp_path):
        path = tmp_path / "table.json"
        path.write_text('{\n"good": "fine"\n}', encoding="utf-8")
        with pytest.raises(CorpusFormatError) as info:
            load_substitution_table(path)
        assert info.value.line == 2

    def test_substitutes_must_be_known(self, tmp_path):
        path = tmp_path / "table.json"
        path.write_text(json.dumps({"good": ["fine"]}), encoding="utf-8")
        with pytest.raises(CorpusFormatError):
            load_substitution_table(path, vocabulary=["good"])

    def test_headwords_must_be_known(self, tmp_path):
        path = tmp_path / "table.json"
        path.write_text('{\n"good": ["fine"],\n"odd": ["fine"]\n}', encoding="utf-8")
        with pytest.raises(CorpusFormatError) as info:
            load_substitution_table(path, vocabulary=["good", "fine"])
        assert "odd" in str(info.value)
        assert info.value.line == 3


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        examples = [
            LabeledExample(example_id=4, tokens=["a", "b"], label=1),
            LabeledExample(example_id=9, tokens=["b"], label=0),
        ]
        assert load_dataset(save_dataset(examples, tmp_path / "train.tsv")) == examples

    @pytest.mark.parametrize(
        "content",
        ["1\t0\n", "1\tzero\ta b\n", "1\t0\ta\n1\t1\tb\n", "1\t0\ta zzz\n"],
    )
    def test_malformed_rows(self, tmp_path, content):
        path = tmp_path / "train.tsv"
        path.write_text(content, encoding="utf-8")
        with pytest.raises(CorpusFormatError):
            load_dataset(path, vocabulary=["a", "b"])


def test_tokenize_lowercases():
    assert tokenize("  The Movie\twas GOOD ") == ["the", "movie", "was", "good"]


def test_encode_tokens_names_unknown_word():
    with pytest.raises(VocabularyLookupError) as info:
        encode_tokens(["a", "mystery"], {"a": 0})
    assert info.value.word == "mystery"


class TestNeighborhood:
    table = SubstitutionTable(entries={"a": ["a1", "a2"], "b": ["b1"], "w": ["w1", "w2", "w3"]})

    def test_sizes(self):
        assert neighborhood_size(["x"], self.table) == 1
        assert neighborhood_size(["a", "a"], self.table) == 9
        assert neighborhood_size(["a", "b", "x"], self.table) == 6

    def test_saturates(self):
        assert neighborhood_size(["w"] * 40, self.table) == SATURATED_SIZE

    def test_enumeration_order(self):
        assert list(enumerate_neighborhood(["a", "b"], self.table)) == [
            ["a", "b"],
            ["a", "b1"],
            ["a1", "b"],
            ["a1", "b1"],
            ["a2", "b"],
            ["a2", "b1"],
        ]

    def test_enumeration_matches_size(self):
        tokens = ["a", "x", "w", "b"]
        assert len(list(enumerate_neighborhood(tokens, self.table))) == neighborhood_size(tokens, self.table)


class TestSynthetic:
    def test_deterministic(self, tiny_spec):
        first, second = generate_synthetic(tiny_spec), generate_synthetic(tiny_spec)
        assert first.train == second.train
        assert first.test == second.test
        np.testing.assert_array_equal(first.embeddings.vectors, second.embeddings.vectors)

    def test_sizes_and_unique_ids(self, tiny_spec, tiny_corpus):
        assert len(tiny_corpus.train) == tiny_spec.num_train
        assert len(tiny_corpus.test) == tiny_spec.num_test
        assert len(tiny_corpus.intervened) == tiny_spec.num_test
        assert len(tiny_corpus.embeddings.words) == tiny_spec.vocabulary_size
        ids = [e.example_id for e in [*tiny_corpus.train, *tiny_corpus.test, *tiny_corpus.intervened]]
        assert len(ids) == len(set(ids))
        assert all(len(e.tokens) == tiny_spec.sequence_length for e in tiny_corpus.train)

    def test_clusters_share_class(self, tiny_corpus):
        for word, substitutes in tiny_corpus.table.entries.items():
            for substitute in substitutes:
                assert tiny_corpus.content_class[substitute] == tiny_corpus.content_class[word]
                assert tiny_corpus.content_cluster[substitute] == tiny_corpus.content_cluster[word]

    def test_labels_survive_substitution(self, tiny_corpus):
        rng = np.random.default_rng(0)
        for example in tiny_corpus.train[:30]:
            neighbor = [str(rng.choice(tiny_corpus.table.options(word))) for word in example.tokens]
            assert label_from_tokens(neighbor, tiny_corpus.content_class, 2) == example.label

    def test_pure_content_and_full_confounding(self, tiny_spec):
        corpus = generate_synthetic(tiny_spec.model_copy(update={"content_strength": 1.0, "confounder_strength": 1.0}))
        for example in corpus.train:
            content = [word for word in example.tokens if word in corpus.content_class]
            styles = [word for word in example.tokens if word in corpus.style_class]
            assert {corpus.content_class[word] for word in content} == {example.label}
            assert [corpus.style_class[word] for word in styles] == [example.label]

    @staticmethod
    def _style_by_label(corpus, examples):
        table = np.zeros((2, 2), dtype=int)
        for example in examples:
            (style,) = [word for word in example.tokens if word in corpus.style_class]
            table[corpus.style_class[style], example.label] += 1
        return table

    def test_style_independent_of_label_without_confounding(self, tiny_spec):
        corpus = generate_synthetic(tiny_spec.model_copy(update={"num_train": 600, "confounder_strength": 0.0}))
        assert stats.chi2_contingency(self._style_by_label(corpus, corpus.train)).pvalue > 0.001

    def test_intervened_split_breaks_the_correlation(self, tiny_spec):
        corpus = generate_synthetic(tiny_spec.model_copy(update={"num_train": 600, "num_test": 600}))
        assert stats.chi2_contingency(self._style_by_label(corpus, corpus.train)).pvalue < 1e-6
        assert stats.chi2_contingency(self._style_by_label(corpus, corpus.intervened)).pvalue > 0.001

    def test_label_ties_go_to_lowest_class(self):
        assert label_from_tokens(["x", "y"], {"x": 1, "y": 0}, 2) == 0

    def test_infeasible_vocabulary(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic(SyntheticSpec(vocabulary_size=10, num_clusters=4, cluster_size=3))
