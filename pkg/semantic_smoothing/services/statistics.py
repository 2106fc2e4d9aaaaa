"""
Exact probability primitives behind the smoothing radii and the certification tests.

Everything here is a pure function of its arguments. The normal functions and the
Clopper-Pearson bound come from scipy; the two-sided binomial test works in log
space on a shared log-factorial table so that pmf(i) and pmf(n - i) agree bit for
bit at p0 = 1/2.
"""

import math
import threading

import numpy as np
from pydantic import ValidationError
from scipy import special, stats

from semantic_smoothing.config import config
from semantic_smoothing.errors import DomainError
from semantic_smoothing.models.schemas import BinomialObservation

SQRT_2PI = math.sqrt(2.0 * math.pi)

# Relative slack when comparing binomial pmf values in the two-sided test.
PMF_TIE_TOLERANCE = 1e-7

_table_lock = threading.Lock()
_log_factorial_table = np.zeros(1)


def check_probability(value: float, name: str = "p", open_interval: bool = False) -> float:
    """Validate that value is a probability; open_interval excludes 0 and 1."""
    value = float(value)
    if not math.isfinite(value) or value < 0.0 or value > 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {value!r}")
    if open_interval and value in (0.0, 1.0):
        raise DomainError(f"{name} must lie strictly inside (0, 1), got {value!r}")
    return value


def std_normal_cdf(x: float) -> float:
    """Standard normal distribution function Φ(x)."""
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"std_normal_cdf needs a finite argument, got {x!r}")
    return float(special.ndtr(x))


def std_normal_quantile(p: float) -> float:
    """
    Inverse standard normal distribution function Φ⁻¹(p) for p in (0, 1).

    The upper half is computed by reflection, so quantile(1 - p) == -quantile(p)
    holds exactly whenever 1 - p is the same float the caller passes in.

    Raises:
        DomainError: if p is 0, 1 or outside the unit interval.
    """
    p = check_probability(p, "p", open_interval=True)
    if p <= 0.5:
        return float(special.ndtri(p))
    return -float(special.ndtri(1.0 - p))


def std_normal_quantile_array(p: np.ndarray) -> np.ndarray:
    """Elementwise Φ⁻¹ for arrays with every entry in (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    if p.size and (not np.all(np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0)):
        raise DomainError("std_normal_quantile_array needs every entry strictly inside (0, 1)")
    upper = p > 0.5
    lower = special.ndtri(np.where(upper, 1.0 - p, p))
    return np.where(upper, -lower, lower)


def log_factorials(n: int) -> np.ndarray:
    """Return a table whose entry k is log(k!) for every k <= n."""
    global _log_factorial_table
    if n > config.SMOOTHING_MAX_TRIALS:
        raise DomainError(
            f"{n} trials exceed the supported maximum of {config.SMOOTHING_MAX_TRIALS}"
        )
    table = _log_factorial_table
    if table.shape[0] > n:
        return table
    with _table_lock:
        if _log_factorial_table.shape[0] <= n:
            size = min(max(n + 1, 2 * _log_factorial_table.shape[0], 1024), config.SMOOTHING_MAX_TRIALS + 1)
            _log_factorial_table = special.gammaln(np.arange(size) + 1.0)
        return _log_factorial_table


def binomial_log_pmf(trials: int, p: float) -> np.ndarray:
    """log P[Binomial(trials, p) = i] for every i in [0, trials]."""
    table = log_factorials(trials)
    i = np.arange(trials + 1)
    if p == 0.0:
        return np.where(i == 0, 0.0, -np.inf)
    if p == 1.0:
        return np.where(i == trials, 0.0, -np.inf)
    log_p = math.log(p)
    log_q = math.log1p(-p) if p < 0.5 else math.log(1.0 - p)
    # Symmetric grouping keeps pmf(i) and pmf(n - i) bit-identical when p = 1/2.
    log_coefficients = table[trials] - (table[i] + table[trials - i])
    return log_coefficients + (i * log_p + (trials - i) * log_q)


def _observation(successes: int, trials: int) -> BinomialObservation:
    try:
        return BinomialObservation(successes=successes, trials=trials)
    except ValidationError as e:
        raise DomainError(f"invalid binomial counts ({successes}, {trials}): {e.errors()[0]['msg']}") from e


def pvalue_binom(obs_a: int, total: int, p0: float) -> float:
    """
    Exact two-sided binomial test.

    Sums the probability of every outcome that is at most as likely as the observed
    one under Binomial(total, p0), with a relative tie tolerance of 1e-7. The
    null p0 must lie strictly inside (0, 1) so the result lies in (0, 1].
    """
    observation = _observation(obs_a, total)
    p0 = check_probability(p0, "p0", open_interval=True)
    pmf = np.exp(binomial_log_pmf(observation.trials, p0))
    threshold = pmf[observation.successes] * (1.0 + PMF_TIE_TOLERANCE)
    return min(1.0, math.fsum(pmf[pmf <= threshold]))


def lower_conf_bound(successes: int, trials: int, confidence: float) -> float:
    """
    One-sided Clopper-Pearson lower confidence bound for a binomial proportion.

    Returns the largest L with P[Binomial(trials, L) >= successes] <= 1 - confidence,
    the 1 - confidence quantile of Beta(successes, trials - successes + 1).
    """
    observation = _observation(successes, trials)
    confidence = check_probability(confidence, "confidence", open_interval=True)
    if observation.successes == 0:
        return 0.0
    bound = stats.beta.ppf(1.0 - confidence, observation.successes, observation.trials - observation.successes + 1)
    return min(float(bound), observation.successes / observation.trials)
