"""Gaussian condition-guidance network ``p(C | theta, accuracy)``.

The network reads the flattened belief state plus ``log accuracy`` and emits
a mean and a diagonal variance for the (normalised) condition vector. It is
supervised with importance-weighted minibatch moments: a record ``x_j``
contributes with weight ``p_S(y | x_j, accuracy)``, where ``y`` is the sender
draw that produced the anchor's belief state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import core
from .errors import InvalidArgument, NumericalFailure
from .nn import check_finite, fan_in_init, silu, silu_grad, softplus

VAR_FLOOR = 1e-4
LOG_2PI = core.LOG_2PI


@dataclass(frozen=True)
class GuidanceConfig:
    D: int
    K: int
    cond_dim: int = 2
    width: int = 128
    var_floor: float = VAR_FLOOR


@dataclass
class GuidanceParams:
    config: GuidanceConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "GuidanceParams":
        return GuidanceParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class GuidanceMoments:
    mu: np.ndarray
    sigma2: np.ndarray


def param_shapes(cfg: GuidanceConfig) -> dict[str, tuple[int, ...]]:
    n_in = cfg.D * cfg.K + 1
    W, d = cfg.width, cfg.cond_dim
    return {"W_0": (n_in, W), "b_0": (W,), "W_1": (W, W), "b_1": (W,),
            "W_out": (W, 2 * d), "b_out": (2 * d,)}


def init_guidance(cfg: GuidanceConfig, rng: np.random.Generator,
                  zero_head: bool = True) -> GuidanceParams:
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("b_"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = fan_in_init(rng, shape[0], shape)
    if zero_head:
        tensors["W_out"][:] = 0.0
    return GuidanceParams(cfg, tensors)


def _features(theta, alpha, cfg):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 2:
        theta = theta[None]
    B = theta.shape[0]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (B,))
    if np.any(~(alpha > 0)):
        raise InvalidArgument("accuracy must be positive")
    u = (cfg.K * theta - 1.0).reshape(B, -1)
    return np.concatenate([u, (np.log(alpha) / 4.0)[:, None]], axis=1)


def _forward(params: GuidanceParams, theta, alpha):
    cfg = params.config
    P = params.tensors
    f = _features(theta, alpha, cfg)
    z0 = f @ P["W_0"] + P["b_0"]
    a0 = silu(z0)
    z1 = a0 @ P["W_1"] + P["b_1"]
    a1 = silu(z1)
    out = a1 @ P["W_out"] + P["b_out"]
    d = cfg.cond_dim
    mu = out[:, :d]
    sigma2 = softplus(out[:, d:]) + cfg.var_floor
    return mu, sigma2, (f, z0, a0, z1, a1, out)


def guidance_forward(theta, alpha, params: GuidanceParams) -> GuidanceMoments:
    """Predicted moments; batched over a leading axis of ``theta``."""
    mu, sigma2, _ = _forward(params, theta, alpha)
    if np.asarray(theta).ndim == 2:
        mu, sigma2 = mu[0], sigma2[0]
    return GuidanceMoments(mu, sigma2)


def gaussian_logpdf(C, mu, sigma2):
    C = np.asarray(C, dtype=np.float64)
    return -0.5 * np.sum(LOG_2PI + np.log(sigma2) + (C - mu) ** 2 / sigma2, axis=-1)


def guidance_logweight(C, theta, alpha, params: GuidanceParams):
    """``log N(C; mu(theta, alpha), diag sigma2(theta, alpha))``."""
    m = guidance_forward(theta, alpha, params)
    return gaussian_logpdf(C, m.mu, m.sigma2)


def gaussian_kl(p: GuidanceMoments, q: GuidanceMoments):
    """``KL(p || q)`` for diagonal Gaussians, summed over the last axis."""
    ratio = p.sigma2 / q.sigma2
    return 0.5 * np.sum(ratio - 1.0 - np.log(ratio)
                        + (p.mu - q.mu) ** 2 / q.sigma2, axis=-1)


def _normalise_logweights(logw):
    logw = np.asarray(logw, dtype=np.float64)
    top = np.max(logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise NumericalFailure(f"all importance weights underflow (max log-weight {top.min()})")
    return np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))


def weighted_moments(weights, conds, var_floor=VAR_FLOOR) -> GuidanceMoments:
    """Moments of ``conds`` (B, d) under normalised ``weights`` (..., B)."""
    mu = weights @ conds
    dev = conds - mu[..., None, :]
    sigma2 = np.einsum("...j,...jd->...d", weights, dev ** 2)
    return GuidanceMoments(mu, np.maximum(sigma2, var_floor))


def empirical_moments(tokens, conds, y, alpha, var_floor=VAR_FLOOR) -> GuidanceMoments:
    """Importance-weighted condition moments for a single observed draw ``y``.

    ``tokens`` (B, D) and ``conds`` (B, d) are the minibatch records; the
    weight of record ``j`` is the sender density of ``y`` (D, K) given ``x_j``.
    """
    tokens = np.asarray(tokens)
    conds = np.asarray(conds, dtype=np.float64)
    if len(tokens) == 0:
        raise InvalidArgument("empirical_moments needs at least one record")
    K = y.shape[-1]
    logw = np.array([np.sum(core.sender_logdensity(y, x, alpha, K)) for x in tokens])
    return weighted_moments(_normalise_logweights(logw), conds, var_floor)


def record_weights(tokens, y, alpha):
    """Normalised weights (A, B) of records ``tokens`` for each anchor draw ``y`` (A, D, K).

    Sender components differ only by ``y_k`` in their exponent, so
    ``log p_S(y | x_j)`` equals ``sum_d y[d, x_jd]`` up to a term that is the
    same for every record and cancels in the normalisation.
    """
    del alpha  # cancels; kept for signature symmetry with the density form
    idx = np.asarray(tokens) - 1                         # (B, D)
    D = idx.shape[1]
    gathered = y[:, np.arange(D)[None, :], idx]          # (A, B, D)
    return _normalise_logweights(gathered.sum(axis=-1))


def kl_loss_and_gradients(theta, alpha, target: GuidanceMoments,
                          params: GuidanceParams):
    """Mean over the batch of ``KL(p_psi || target)`` and its parameter gradient."""
    cfg = params.config
    P = params.tensors
    mu, sigma2, (f, z0, a0, z1, a1, out) = _forward(params, theta, alpha)
    B = mu.shape[0]
    kl = gaussian_kl(GuidanceMoments(mu, sigma2), target)
    loss = float(np.mean(kl))
    if not np.isfinite(loss):
        check_finite(P, "guidance parameter")
        raise NumericalFailure("non-finite guidance loss")
    d = cfg.cond_dim
    dmu = (mu - target.mu) / target.sigma2 / B
    dsig = 0.5 * (1.0 / target.sigma2 - 1.0 / sigma2) / B
    dout = np.concatenate([dmu, dsig * expit(out[:, d:])], axis=1)
    g = {"W_out": a1.T @ dout, "b_out": dout.sum(axis=0)}
    dz1 = (dout @ P["W_out"].T) * silu_grad(z1)
    g["W_1"] = a0.T @ dz1
    g["b_1"] = dz1.sum(axis=0)
    dz0 = (dz1 @ P["W_1"].T) * silu_grad(z0)
    g["W_0"] = f.T @ dz0
    g["b_0"] = dz0.sum(axis=0)
    return loss, {name: g[name] for name in P}
