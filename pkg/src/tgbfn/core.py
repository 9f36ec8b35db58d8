"""Discrete Bayesian flow kernels.

Belief states are arrays of shape ``(..., D, K)`` whose last axis lies on the
probability simplex. Tokens are 1-based integers in ``{1..K}``; internally they
are converted to 0-based class indices where one-hot encodings are needed.

All functions are pure given an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgument, NumericalFailure

LOG_2PI = float(np.log(2.0 * np.pi))
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class AccuracySchedule:
    beta_total: float
    n: int
    alphas: np.ndarray
    betas: np.ndarray
    times: np.ndarray

    def alpha(self, i: int) -> float:
        """Accuracy of step ``i`` (1-based)."""
        return float(self.alphas[i - 1])

    def beta(self, i: int) -> float:
        """Cumulative accuracy after step ``i`` (1-based); ``beta(0) == 0``."""
        return 0.0 if i == 0 else float(self.betas[i - 1])


def build_schedule(beta_total: float, n: int) -> AccuracySchedule:
    """Quadratic accuracy schedule ``alpha_i = beta_total * (2i - 1) / n**2``."""
    if not beta_total > 0 or not np.isfinite(beta_total):
        raise InvalidArgument(f"beta_total must be positive, got {beta_total}")
    if int(n) != n or n < 1:
        raise InvalidArgument(f"n must be a positive integer, got {n}")
    n = int(n)
    i = np.arange(1, n + 1, dtype=np.float64)
    alphas = beta_total * (2.0 * i - 1.0) / n**2
    # closed form avoids summation drift: sum_{j<=i} (2j-1) = i^2
    betas = beta_total * (i / n) ** 2
    times = (i - 1.0) / n
    return AccuracySchedule(float(beta_total), n, alphas, betas, times)


def uniform_prior(D: int, K: int) -> np.ndarray:
    if D < 1:
        raise InvalidArgument(f"D must be >= 1, got {D}")
    if K < 2:
        raise InvalidArgument(f"K must be >= 2, got {K}")
    return np.full((D, K), 1.0 / K)


def _check_alpha(alpha) -> None:
    alpha = np.asarray(alpha)
    if not np.all(alpha > 0) or not np.all(np.isfinite(alpha)):
        raise InvalidArgument(f"alpha must be positive and finite, got {alpha}")


def _per_row(a, x: np.ndarray) -> np.ndarray:
    """Broadcast a scalar or per-leading-axis accuracy against ``(..., D, K)``."""
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape + (1,) * (x.ndim + 1 - a.ndim))


def one_hot(tokens: np.ndarray, K: int) -> np.ndarray:
    """One-hot encode 1-based tokens; output has a trailing axis of size ``K``."""
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 1 or tokens.max() > K):
        raise InvalidArgument(f"tokens must lie in 1..{K}")
    return np.eye(K)[tokens - 1]


def sender_mean(tokens: np.ndarray, alpha, K: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    return _per_row(alpha, tokens) * (K * one_hot(tokens, K) - 1.0)


def sample_sender(x: np.ndarray, alpha, K: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Draw ``y ~ N(alpha (K e_x - 1), alpha K I)`` independently per position.

    ``alpha`` is a scalar or has the shape of the leading axes of ``x``.
    """
    _check_alpha(alpha)
    x = np.asarray(x)
    mean = sender_mean(x, alpha, K)
    return mean + np.sqrt(_per_row(alpha, x) * K) * rng.standard_normal(mean.shape)


def component_logdensities(y: np.ndarray, alpha: float, K: int) -> np.ndarray:
    """Log density of ``y`` under each of the K sender components.

    Returns an array of shape ``y.shape`` whose last axis indexes the class
    (component ``k`` has mean ``alpha (K e_k - 1)``).
    """
    _check_alpha(alpha)
    y = np.asarray(y, dtype=np.float64)
    var = alpha * K
    means = alpha * (K * np.eye(K) - 1.0)
    sq = np.sum((y[..., None, :] - means) ** 2, axis=-1)
    return -0.5 * (K * (LOG_2PI + np.log(var)) + sq / var)


def sender_logdensity(y: np.ndarray, x: np.ndarray | int, alpha: float,
                      K: int) -> np.ndarray | float:
    """Log density of the sender distribution, per position (reduces the K axis)."""
    x = np.asarray(x)
    if x.size and (x.min() < 1 or x.max() > K):
        raise InvalidArgument(f"tokens must lie in 1..{K}")
    comps = component_logdensities(y, alpha, K)
    out = np.take_along_axis(comps, (x - 1)[..., None], axis=-1)[..., 0]
    return float(out) if np.ndim(out) == 0 else out


def receiver_logdensity(y: np.ndarray, p_out: np.ndarray, alpha: float,
                        K: int) -> np.ndarray | float:
    """Log density of the receiver mixture ``sum_k p_k N(y; mu_k, alpha K I)``.

    Evaluated via log-sum-exp over components; zero-probability components
    contribute ``-inf`` and drop out, so a one-hot ``p_out`` reproduces
    :func:`sender_logdensity` exactly.
    """
    p_out = np.asarray(p_out, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logp = np.log(p_out)
    out = logsumexp(logp + component_logdensities(y, alpha, K), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _check_simplex(theta: np.ndarray) -> None:
    dev = np.abs(theta.sum(axis=-1) - 1.0)
    if np.any(dev > SIMPLEX_TOL) or np.any(theta < 0):
        raise NumericalFailure(
            f"belief rows left the simplex (max row-sum deviation {dev.max():.3g})")


def bayesian_update(theta_prev: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``theta ∝ exp(y) * theta_prev`` row-wise, computed in log space."""
    theta_prev = np.asarray(theta_prev, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = np.log(theta_prev) + y
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    theta = w / w.sum(axis=-1, keepdims=True)
    _check_simplex(theta)
    return theta


def multi_sample_update(theta_prev: np.ndarray, x: np.ndarray, alpha: float,
                        m: int, rng: np.random.Generator) -> np.ndarray:
    """Average of ``m`` independent single-draw updates."""
    if int(m) != m or m < 1:
        raise InvalidArgument(f"m must be a positive integer, got {m}")
    K = theta_prev.shape[-1]
    acc = np.zeros_like(theta_prev, dtype=np.float64)
    for _ in range(int(m)):
        acc += bayesian_update(theta_prev, sample_sender(x, alpha, K, rng))
    return acc / m


def discrete_time_loss(x: np.ndarray, p_out: np.ndarray, alpha_i: float,
                       gamma_i: float, rng: np.random.Generator,
                       y: np.ndarray | None = None) -> float:
    """Single-draw Monte-Carlo estimate of ``gamma_i * sum_d KL(p_S || p_R)``.

    ``y`` may be supplied to evaluate the estimator at a fixed sender draw.
    """
    _check_alpha(alpha_i)
    x = np.asarray(x)
    K = p_out.shape[-1]
    if y is None:
        y = sample_sender(x, alpha_i, K, rng)
    if gamma_i == 0:
        return 0.0
    log_s = sender_logdensity(y, x, alpha_i, K)
    log_r = receiver_logdensity(y, p_out, alpha_i, K)
    return float(gamma_i * np.sum(log_s - log_r))


def flow_state(x: np.ndarray, beta_t: float, K: int, rng: np.random.Generator,
               return_y: bool = False):
    """Belief after accumulating ``beta_t`` of evidence about ``x`` in one draw.

    Sums of independent sender draws are again sender draws with the summed
    accuracy, so one draw at ``beta_t`` applied to the uniform prior has the
    same law as the full sequence of per-step updates.
    """
    beta_t = np.asarray(beta_t, dtype=np.float64)
    if not np.all(beta_t >= 0) or not np.all(np.isfinite(beta_t)):
        raise InvalidArgument(f"beta_t must be >= 0, got {beta_t}")
    x = np.asarray(x)
    shape = x.shape + (K,)
    if np.all(beta_t == 0):
        theta = np.full(shape, 1.0 / K)
        y = np.zeros(shape)
    else:
        b = _per_row(beta_t, x)
        y = b * (K * one_hot(x, K) - 1.0) + np.sqrt(b * K) * rng.standard_normal(shape)
        theta = bayesian_update(np.full(shape, 1.0 / K), y)
    return (theta, y) if return_y else theta


def entropy(theta: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(theta > 0, theta * np.log(theta), 0.0)
    return -terms.sum(axis=-1)
