import numpy as np
import pytest

from semantic_smoothing.errors import SoundnessError, StructuralError, VocabularyLookupError
from semantic_smoothing.models.state import (
    EmbeddingMatrix,
    IntervalTensor,
    LayerSpec,
    ParameterSet,
    SubstitutionTable,
)
from semantic_smoothing.netcore.network import latent_vector
from semantic_smoothing.services.corpus import encode_tokens
from semantic_smoothing.services.ibp import (
    certified_latent_radius,
    input_interval,
    model_embeddings,
    propagate,
    r_hat,
    vocabulary_boxes,
)


@pytest.fixture
def toy_embeddings() -> EmbeddingMatrix:
    return EmbeddingMatrix(words=["a", "b", "c"], vectors=np.array([[0.0, 1.0], [2.0, -1.0], [1.0, 0.0]]))


def box(lower, upper) -> IntervalTensor:
    return IntervalTensor(lower=np.array(lower, dtype=float), upper=np.array(upper, dtype=float))


class TestInputInterval:
    def test_hull_of_word_and_substitutes(self, toy_embeddings):
        bounds = input_interval(["a", "c"], SubstitutionTable(entries={"a": ["b"]}), toy_embeddings)
        np.testing.assert_array_equal(bounds.lower, [[0.0, -1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(bounds.upper, [[2.0, 1.0], [1.0, 0.0]])

    def test_vocabulary_boxes_agree(self, toy_embeddings):
        table = SubstitutionTable(entries={"a": ["b"]})
        boxes = vocabulary_boxes(toy_embeddings, table)
        bounds = input_interval(["c", "a"], table, toy_embeddings)
        np.testing.assert_array_equal(boxes.lower[[2, 0]], bounds.lower)
        np.testing.assert_array_equal(boxes.upper[[2, 0]], bounds.upper)

    def test_unknown_substitute(self, toy_embeddings):
        with pytest.raises(VocabularyLookupError):
            input_interval(["a"], SubstitutionTable(entries={"a": ["zzz"]}), toy_embeddings)


class TestPropagate:
    def test_affine_uses_absolute_weights(self):
        encoder = [LayerSpec(name="proj", kind="affine", dims={"in_features": 2, "out_features": 1})]
        parameters = ParameterSet(encoder={"proj.weight": np.array([[1.0], [-1.0]]), "proj.bias": np.zeros(1)})
        bounds = propagate(encoder, parameters, box([0.0, 0.0], [1.0, 1.0]))
        np.testing.assert_allclose(bounds.lower, [-1.0])
        np.testing.assert_allclose(bounds.upper, [1.0])

    def test_relu_clips_both_ends(self):
        bounds = propagate([LayerSpec(name="act", kind="relu")], ParameterSet(), box([-1.0, -2.0], [2.0, -0.5]))
        np.testing.assert_array_equal(bounds.lower, [0.0, 0.0])
        np.testing.assert_array_equal(bounds.upper, [2.0, 0.0])

    def test_zero_width_box_is_the_forward_pass(self, fresh_model, tiny_corpus):
        example = tiny_corpus.test[0]
        embeddings = model_embeddings(fresh_model)
        point = input_interval(example.tokens, SubstitutionTable(), embeddings)
        bounds = propagate(fresh_model.encoder, fresh_model.parameters, point)
        latent = latent_vector(fresh_model, encode_tokens(example.tokens, fresh_model.word_index()))
        np.testing.assert_allclose(bounds.lower, latent, atol=1e-12)
        np.testing.assert_allclose(bounds.upper, latent, atol=1e-12)

    def test_rejects_unsupported_layer(self):
        with pytest.raises(StructuralError):
            propagate([LayerSpec(name="norm", kind="log-softmax")], ParameterSet(), box([0.0], [1.0]))


class TestRHat:
    def test_one_dimension(self):
        assert r_hat(np.array([0.0]), box([-1.0], [2.0])) == pytest.approx(2.0)

    def test_largest_side_per_coordinate(self):
        assert r_hat(np.array([0.0, 0.0]), box([-3.0, -1.0], [1.0, 4.0])) == pytest.approx(5.0)

    def test_degenerate_box(self):
        assert r_hat(np.array([0.5, 0.5]), box([0.5, 0.5], [0.5, 0.5])) == 0.0

    def test_batch(self):
        bounds = box([[-1.0], [0.0]], [[2.0], [0.0]])
        np.testing.assert_allclose(r_hat(np.array([[0.0], [0.0]]), bounds), [2.0, 0.0])

    def test_center_outside_bounds(self):
        with pytest.raises(SoundnessError):
            r_hat(np.array([3.0]), box([-1.0], [2.0]))


def test_bounds_contain_every_sampled_neighbor(fresh_model, tiny_corpus):
    rng = np.random.default_rng(0)
    table = tiny_corpus.table
    embeddings = model_embeddings(fresh_model)
    index = fresh_model.word_index()
    for example in tiny_corpus.test[:8]:
        bounds = propagate(fresh_model.encoder, fresh_model.parameters, input_interval(example.tokens, table, embeddings))
        center = latent_vector(fresh_model, encode_tokens(example.tokens, index))
        radius = certified_latent_radius(fresh_model, example.tokens, table, embeddings, center)
        for _ in range(20):
            neighbor = [str(rng.choice(table.options(word))) for word in example.tokens]
            latent = latent_vector(fresh_model, encode_tokens(neighbor, index))
            assert np.all(latent >= bounds.lower - 1e-9)
            assert np.all(latent <= bounds.upper + 1e-9)
            assert np.linalg.norm(latent - center) <= radius + 1e-9
