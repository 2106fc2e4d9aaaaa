"""
Gaussian latent smoothing.

Noise draw i of a NoiseSpec is a pure function of (seed, i): a Philox counter
stream keyed by the seed is positioned at block i * ceil(dim / 4), its 64-bit
outputs are mapped to open-interval uniforms and pushed through the normal
quantile. Draws can therefore be produced in any batching or order.
"""

import logging
import math

import numpy as np

from semantic_smoothing.errors import DomainError
from semantic_smoothing.models.schemas import NoiseSpec, VoteCounts
from semantic_smoothing.models.state import ModelCheckpoint
from semantic_smoothing.netcore import autodiff as ad
from semantic_smoothing.netcore.autodiff import Node
from semantic_smoothing.netcore.network import latent_vector, predict_log_probs
from semantic_smoothing.services.statistics import check_probability, std_normal_quantile, std_normal_quantile_array

logger = logging.getLogger(__name__)

PROBABILITY_CLAMP = 1e-6
# Philox4x64 yields four 64-bit words per counter value.
WORDS_PER_BLOCK = 4
DRAW_CHUNK = 2048
_UNIT = 2.0**-53


def _blocks(dim: int) -> int:
    return -(-dim // WORDS_PER_BLOCK)


def _uniforms(spec: NoiseSpec, start: int, count: int) -> np.ndarray:
    blocks = _blocks(spec.dim)
    generator = np.random.Philox(key=spec.seed, counter=start * blocks)
    raw = generator.random_raw(count * blocks * WORDS_PER_BLOCK).reshape(count, blocks * WORDS_PER_BLOCK)
    return ((raw[:, : spec.dim] >> np.uint64(11)).astype(np.float64) + 0.5) * _UNIT


def sample_noise_batch(spec: NoiseSpec, start: int, count: int) -> np.ndarray:
    """Draws start .. start + count - 1 as a (count, dim) array."""
    if start < 0 or count < 0:
        raise DomainError(f"draw range must be nonnegative, got start={start}, count={count}")
    if count == 0:
        return np.zeros((0, spec.dim))
    return spec.sigma * std_normal_quantile_array(_uniforms(spec, start, count))


def sample_noise(spec: NoiseSpec, draw_index: int) -> np.ndarray:
    """One N(0, sigma^2 I) vector, identical for identical (seed, draw_index)."""
    return sample_noise_batch(spec, draw_index, 1)[0]


def _chunks(start: int, draws: int):
    offset = 0
    while offset < draws:
        size = min(DRAW_CHUNK, draws - offset)
        yield start + offset, size
        offset += size


def _check_draws(draws: int) -> None:
    if draws < 1:
        raise DomainError(f"draws must be at least 1, got {draws}")


def soft_expectation(
    model: ModelCheckpoint,
    inputs: np.ndarray,
    spec: NoiseSpec,
    draws: int,
    start: int = 0,
) -> np.ndarray:
    """Monte-Carlo mean of f(s(x) + n) over draws start .. start + draws - 1."""
    _check_draws(draws)
    latent = latent_vector(model, inputs)
    total = np.zeros(model.num_classes)
    for first, size in _chunks(start, draws):
        noisy = latent + sample_noise_batch(spec, first, size)
        total += np.exp(predict_log_probs(model, noisy)).sum(axis=0)
    return total / draws


def hard_votes(
    model: ModelCheckpoint,
    inputs: np.ndarray,
    spec: NoiseSpec,
    draws: int,
    start: int = 0,
) -> VoteCounts:
    """Per-draw argmax votes of f(s(x) + n); ties go to the lowest class index."""
    _check_draws(draws)
    latent = latent_vector(model, inputs)
    counts = np.zeros(model.num_classes, dtype=np.int64)
    for first, size in _chunks(start, draws):
        noisy = latent + sample_noise_batch(spec, first, size)
        winners = np.argmax(predict_log_probs(model, noisy), axis=-1)
        counts += np.bincount(winners, minlength=model.num_classes)
    return VoteCounts(counts=counts.tolist())


def clamp_probability(p: float) -> float:
    return min(max(p, PROBABILITY_CLAMP), 1.0 - PROBABILITY_CLAMP)


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not math.isfinite(sigma) or sigma <= 0.0:
        raise DomainError(f"sigma must be positive and finite, got {sigma!r}")
    return sigma


def soft_radius(p_top: float, p_runner: float, sigma: float) -> float:
    """
    sigma / 2 * (quantile(p_top) - quantile(p_runner)), probabilities clamped to [1e-6, 1 - 1e-6].

    Raises:
        DomainError: if p_top < p_runner or an argument is out of range.
    """
    p_top = check_probability(p_top, "p_top")
    p_runner = check_probability(p_runner, "p_runner")
    sigma = _check_sigma(sigma)
    if p_top < p_runner:
        raise DomainError(f"p_top ({p_top}) must not be below p_runner ({p_runner})")
    if p_top == p_runner:
        return 0.0
    gap = std_normal_quantile(clamp_probability(p_top)) - std_normal_quantile(clamp_probability(p_runner))
    return sigma * (0.5 * gap)


def hard_radius(p_a_lower: float, sigma: float) -> float | None:
    """sigma * quantile(p_a_lower), or None when p_a_lower <= 1/2 and the certificate is void."""
    p_a_lower = check_probability(p_a_lower, "p_a_lower")
    sigma = _check_sigma(sigma)
    if p_a_lower <= 0.5:
        return None
    return sigma * std_normal_quantile(clamp_probability(p_a_lower))


def signed_radius(p_top: float, p_runner: float, sigma: float) -> float:
    """Soft radius without the ordering precondition; negative when p_runner wins."""
    sigma = _check_sigma(sigma)
    top = std_normal_quantile(clamp_probability(check_probability(p_top, "p_top")))
    runner = std_normal_quantile(clamp_probability(check_probability(p_runner, "p_runner")))
    return sigma * (0.5 * (top - runner))


def signed_radius_on_tape(p_top: Node, p_runner: Node, sigma: float) -> Node:
    """Tape form of the soft radius without the ordering precondition; negative when p_runner wins."""
    top = ad.normal_quantile(ad.clip(p_top, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP))
    runner = ad.normal_quantile(ad.clip(p_runner, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP))
    return ad.scale(ad.sub(top, runner), 0.5 * sigma)
