import numpy as np
import pytest

from semantic_smoothing.agents.trainer_agent import encode_batch
from semantic_smoothing.errors import StructuralError
from semantic_smoothing.models.state import LayerSpec
from semantic_smoothing.netcore import autodiff as ad
from semantic_smoothing.netcore.autodiff import Tape
from semantic_smoothing.netcore.network import (
    classify,
    forward,
    gradient,
    latent_vector,
    predict_log_probs,
    validate_architecture,
)


def test_identity_encoder_latent_equals_input(affine_model):
    x = np.array([[0.3, -1.2], [2.0, 0.5]])
    np.testing.assert_array_equal(latent_vector(affine_model, x), x)


def test_zero_noise_matches_no_noise(affine_model):
    x = np.array([[0.3, -1.2]])
    clean = forward(affine_model, x).log_probs.value
    noisy = forward(affine_model, x, noise=np.zeros((1, 2))).log_probs.value
    np.testing.assert_array_equal(clean, noisy)


def test_noise_with_sample_axis(affine_model):
    x = np.array([[0.3, -1.2]])
    passed = forward(affine_model, x, noise=np.random.default_rng(0).normal(size=(5, 1, 2)))
    assert passed.log_probs.shape == (5, 1, 3)
    np.testing.assert_allclose(passed.class_probs.sum(axis=-1), 1.0, atol=1e-12)


def test_log_softmax_ignores_constant_logit_shift(affine_model):
    x = np.array([[0.3, -1.2]])
    bias = affine_model.parameters.classifier["logits.bias"]
    shifted = affine_model.model_copy(update={"parameters": affine_model.parameters.replace({"logits.bias": bias + 5.0})})
    np.testing.assert_allclose(forward(affine_model, x).log_probs.value, forward(shifted, x).log_probs.value, atol=1e-12)


def test_missing_log_softmax_is_applied(affine_model):
    x = np.array([[0.3, -1.2], [1.0, 1.0]])
    bare = affine_model.model_copy(update={"classifier": affine_model.classifier[:1]})
    np.testing.assert_allclose(forward(bare, x).log_probs.value, forward(affine_model, x).log_probs.value, atol=1e-12)


def test_affine_weight_gradient_is_outer_product(affine_model):
    x = np.array([[0.3, -1.2]])
    c = np.array([[2.0, 0.5]])
    passed = forward(affine_model, x)
    loss = ad.total(ad.mul(passed.latent, passed.tape.constant(c)))
    grads = gradient(passed.tape, loss)
    np.testing.assert_allclose(grads["latent.weight"], np.outer(x[0], c[0]))
    np.testing.assert_allclose(grads["latent.bias"], c[0])
    np.testing.assert_array_equal(grads["logits.weight"], np.zeros((2, 3)))


def test_noise_shape_mismatch(affine_model):
    with pytest.raises(StructuralError):
        forward(affine_model, np.array([[0.3, -1.2]]), noise=np.zeros((1, 3)))


def test_classifier_checks_latent_width(affine_model):
    tape = Tape()
    with pytest.raises(StructuralError):
        classify(affine_model, tape.constant(np.ones((1, 5))), tape)


def test_non_finite_float_input(affine_model):
    with pytest.raises(StructuralError):
        latent_vector(affine_model, np.array([[np.nan, 0.0]]))


def test_token_ids_outside_vocabulary(fresh_model):
    vocab = len(fresh_model.vocabulary)
    with pytest.raises(StructuralError):
        latent_vector(fresh_model, np.array([[0, 1, vocab]]))
    with pytest.raises(StructuralError):
        latent_vector(fresh_model, np.array([[0, -1, 2]]))


def test_token_input_must_be_integer(fresh_model):
    with pytest.raises(StructuralError):
        latent_vector(fresh_model, np.array([[0.0, 1.0, 2.0]]))


def test_embedding_table_is_frozen(fresh_model, tiny_corpus):
    ids, labels = encode_batch(fresh_model, tiny_corpus.train[:4])
    passed = forward(fresh_model, np.stack(ids))
    grads = gradient(passed.tape, ad.total(ad.pick(passed.log_probs, labels)))
    assert "embed.weight" not in grads
    assert "conv.weight" in grads


def test_predict_log_probs_matches_forward(fresh_model, tiny_corpus):
    ids, _ = encode_batch(fresh_model, tiny_corpus.test[:3])
    batch = np.stack(ids)
    np.testing.assert_allclose(
        predict_log_probs(fresh_model, latent_vector(fresh_model, batch)),
        forward(fresh_model, batch).log_probs.value,
        atol=1e-12,
    )


def test_validate_rejects_unboundable_encoder(affine_model):
    broken = affine_model.model_copy(
        update={"encoder": [*affine_model.encoder, LayerSpec(name="norm", kind="log-softmax")]}
    )
    with pytest.raises(StructuralError):
        validate_architecture(broken)


def test_validate_rejects_wrong_shape(affine_model):
    parameters = affine_model.parameters.replace({"latent.weight": np.eye(3)})
    with pytest.raises(StructuralError):
        validate_architecture(affine_model.model_copy(update={"parameters": parameters}))


def test_cross_entropy_gradient_matches_finite_differences(fresh_model, tiny_corpus, numeric_gradient):
    ids, labels = encode_batch(fresh_model, tiny_corpus.train[:3])
    batch = np.stack(ids)
    noise = np.random.default_rng(1).normal(scale=fresh_model.sigma, size=(2, 3, fresh_model.latent_dim))
    names = ["conv.weight", "latent.bias", "hidden.weight", "logits.bias"]

    def loss_value(values):
        model = fresh_model.model_copy(update={"parameters": fresh_model.parameters.replace(values)})
        passed = forward(model, batch, noise)
        return passed, ad.mean(ad.pick(passed.log_probs, np.broadcast_to(labels, (2, 3))))

    passed, loss = loss_value({})
    analytic = gradient(passed.tape, loss)
    values = {name: fresh_model.parameters.flat()[name] for name in names}
    numeric = numeric_gradient(lambda v: float(loss_value(v)[1].value), values)
    for name in names:
        np.testing.assert_allclose(analytic[name], numeric[name], rtol=1e-4, atol=1e-7)
