"""Output-distribution network with a hand-written backward pass.

Layout (B = batch, D = positions, K = classes, W = width)::

    e  = (K theta - 1) W_in + b_in + pos + ctx + time_emb [+ cond_emb]
    ctx = flatten(K theta - 1) W_ctx                  # whole-sequence context
    for each block l:
        a = silu(h);  h = h + a W_l + b_l + T_l^T a + flatten(a R_l) M_l
    logits = silu(h) W_out + b_out

``ctx`` and the mixing terms ``flatten(a R_l) M_l`` (a rank-``mix_rank``
bottleneck per position, then a dense map of the whole sequence) are
broadcast over positions, so every position's logits depend on the full
belief state. ``T_l`` is a D x D token-mixing matrix shared by all channels,
which lets each position read the others position-specifically.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, logsumexp, softmax

from .errors import InvalidArgument, NumericalFailure
from .nn import check_finite, fan_in_init, silu, silu_grad, time_features


@dataclass(frozen=True)
class DenoiserConfig:
    D: int
    K: int
    width: int = 128
    layers: int = 2
    conditional: bool = False
    cond_dim: int = 2
    time_features: int = 16
    mix_rank: int = 16


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    D, K, W = cfg.D, cfg.K, cfg.width
    shapes = {
        "W_in": (K, W), "b_in": (W,), "pos": (D, W),
        "W_ctx": (D * K, W),
        "W_time": (cfg.time_features, W), "b_time": (W,),
    }
    if cfg.conditional:
        shapes.update({"W_c1": (cfg.cond_dim, W), "b_c1": (W,),
                       "W_c2": (W, W), "b_c2": (W,)})
    for l in range(cfg.layers):
        shapes.update({f"W_{l}": (W, W), f"b_{l}": (W,),
                       f"T_{l}": (D, D),
                       f"R_{l}": (W, cfg.mix_rank), f"M_{l}": (D * cfg.mix_rank, W)})
    shapes.update({"W_out": (W, K), "b_out": (K,)})
    return shapes


def init_denoiser(cfg: DenoiserConfig, rng: np.random.Generator,
                  zero_head: bool = True) -> DenoiserParams:
    """Fan-in scaled weights, zero biases; a zero head gives uniform outputs."""
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("b_"):
            tensors[name] = np.zeros(shape)
        elif name == "pos":
            tensors[name] = 0.1 * rng.standard_normal(shape)
        elif name.startswith("M_") or name.startswith("T_"):
            # residual mixing starts small so blocks begin near identity
            tensors[name] = 0.1 * fan_in_init(rng, shape[0], shape)
        else:
            tensors[name] = fan_in_init(rng, shape[0], shape)
    if zero_head:
        tensors["W_out"][:] = 0.0
    return DenoiserParams(cfg, tensors)


def _check_cond(cfg: DenoiserConfig, cond, batch: int):
    if cfg.conditional:
        if cond is None:
            raise InvalidArgument("conditional denoiser requires a condition")
        cond = np.asarray(cond, dtype=np.float64)
        if cond.shape == (cfg.cond_dim,):
            cond = np.broadcast_to(cond, (batch, cfg.cond_dim))
        if cond.shape != (batch, cfg.cond_dim):
            raise InvalidArgument(f"condition shape {cond.shape} != {(batch, cfg.cond_dim)}")
        return cond
    if cond is not None:
        raise InvalidArgument("unconditional denoiser does not accept a condition")
    return None


def _token_mix(T, a):
    """``out[b] = T @ a[b]`` as one 2-D product."""
    B, D, W = a.shape
    out = T @ a.transpose(1, 0, 2).reshape(D, B * W)
    return out.reshape(D, B, W).transpose(1, 0, 2)


def forward(params: DenoiserParams, theta, t, cond=None, keep_cache=False):
    """Logits of shape ``(B, D, K)``; ``theta`` may omit the batch axis."""
    cfg = params.config
    P = params.tensors
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 2
    if single:
        theta = theta[None]
    B = theta.shape[0]
    if theta.shape[1:] != (cfg.D, cfg.K):
        raise InvalidArgument(f"theta shape {theta.shape[1:]} != {(cfg.D, cfg.K)}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    if np.any(t < 0) or np.any(t > 1):
        raise InvalidArgument("t must lie in [0, 1]")
    cond = _check_cond(cfg, cond, B)

    u = cfg.K * theta - 1.0
    u_flat = u.reshape(B, -1)
    tf = time_features(t, cfg.time_features)
    glob = u_flat @ P["W_ctx"] + tf @ P["W_time"] + P["b_time"]
    cache = {"u": u, "u_flat": u_flat, "tf": tf}
    if cfg.conditional:
        c_pre = cond @ P["W_c1"] + P["b_c1"]
        c_act = silu(c_pre)
        glob = glob + c_act @ P["W_c2"] + P["b_c2"]
        cache.update(cond=cond, c_pre=c_pre, c_act=c_act)
    D, W = cfg.D, cfg.width
    h = (u.reshape(B * D, -1) @ P["W_in"]).reshape(B, D, W)
    h += P["b_in"] + P["pos"] + glob[:, None, :]
    hs, acts, mixes = [], [], []
    sigs = []
    for l in range(cfg.layers):
        sig = expit(h)
        a = h * sig
        sigs.append(sig)
        a2 = a.reshape(B * D, W)
        r = a2 @ P[f"R_{l}"]
        hs.append(h)
        acts.append(a)
        mixes.append(r)
        tok = _token_mix(P[f"T_{l}"].T, a)
        h = h + (a2 @ P[f"W_{l}"]).reshape(B, D, W) + P[f"b_{l}"] + tok \
            + (r.reshape(B, -1) @ P[f"M_{l}"])[:, None, :]
    sig = expit(h)
    a = h * sig
    sigs.append(sig)
    hs.append(h)
    acts.append(a)
    logits = (a.reshape(B * D, W) @ P["W_out"]).reshape(B, D, cfg.K) + P["b_out"]
    if single:
        logits = logits[0]
    if keep_cache:
        cache.update(hs=hs, acts=acts, mixes=mixes, sigs=sigs)
        return logits, cache
    return logits


def backward(params: DenoiserParams, cache, dlogits) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar given ``d scalar / d logits``."""
    cfg = params.config
    P = params.tensors
    hs, acts, mixes, sigs = cache["hs"], cache["acts"], cache["mixes"], cache["sigs"]
    B, D, K = dlogits.shape
    W = cfg.width
    g = {}
    dl2 = dlogits.reshape(B * D, K)
    g["W_out"] = acts[-1].reshape(B * D, W).T @ dl2
    g["b_out"] = dl2.sum(axis=0)
    dh = (dl2 @ P["W_out"].T).reshape(B, D, W) * silu_grad(hs[-1], sigs[-1])
    for l in reversed(range(cfg.layers)):
        a2 = acts[l].reshape(B * D, W)
        dh2 = dh.reshape(B * D, W)
        dmix = dh.sum(axis=1)
        g[f"W_{l}"] = a2.T @ dh2
        g[f"b_{l}"] = dh2.sum(axis=0)
        g[f"M_{l}"] = mixes[l].reshape(B, -1).T @ dmix
        dr = (dmix @ P[f"M_{l}"].T).reshape(B * D, cfg.mix_rank)
        g[f"R_{l}"] = a2.T @ dr
        g[f"T_{l}"] = acts[l].transpose(1, 0, 2).reshape(D, B * W) @ \
            dh.transpose(1, 0, 2).reshape(D, B * W).T
        da = (dh2 @ P[f"W_{l}"].T + dr @ P[f"R_{l}"].T).reshape(B, D, W) \
            + _token_mix(P[f"T_{l}"], dh)
        dh = dh + da * silu_grad(hs[l], sigs[l])
    u, u_flat = cache["u"], cache["u_flat"]
    dh2 = dh.reshape(B * D, W)
    dglob = dh.sum(axis=1)
    g["W_in"] = u.reshape(B * D, -1).T @ dh2
    g["b_in"] = dh2.sum(axis=0)
    g["pos"] = dh.sum(axis=0)
    g["W_ctx"] = u_flat.T @ dglob
    g["W_time"] = cache["tf"].T @ dglob
    g["b_time"] = dglob.sum(axis=0)
    if cfg.conditional:
        g["W_c2"] = cache["c_act"].T @ dglob
        g["b_c2"] = dglob.sum(axis=0)
        dc = (dglob @ P["W_c2"].T) * silu_grad(cache["c_pre"])
        g["W_c1"] = cache["cond"].T @ dc
        g["b_c1"] = dc.sum(axis=0)
    return {name: g[name] for name in P}


def output_distribution(theta, t, cond, params: DenoiserParams) -> np.ndarray:
    """Per-position categorical probabilities (rows on the simplex)."""
    return softmax(forward(params, theta, t, cond), axis=-1)


@dataclass
class Batch:
    """Training examples: tokens ``x`` (B, D), beliefs, times, step accuracies,
    fixed sender draws ``y`` and per-example loss weights.

    ``y`` is (B, D, K) for one draw per record or (B, S, D, K) for ``S`` draws,
    in which case the loss is averaged over the draws.
    """
    x: np.ndarray
    theta: np.ndarray
    t: np.ndarray
    alpha: np.ndarray
    y: np.ndarray
    gamma: np.ndarray
    cond: np.ndarray | None = None


def position_losses(logits, x, y):
    """Per-position ``log p_S(y) - log p_R(y)``.

    Every sender component shares the same normaliser and differs only by
    ``y_k`` in the exponent, so the KL integrand reduces to
    ``y_x - logsumexp(log p + y)``.
    """
    logp = log_softmax(logits, axis=-1)
    y_x = np.take_along_axis(y, (x - 1)[..., None], axis=-1)[..., 0]
    return y_x - logsumexp(logp + y, axis=-1)


def loss_and_gradients(batch: Batch, params: DenoiserParams):
    """Mean over the batch of the discrete-time loss estimate, and its gradient."""
    if len(batch.x) == 0:
        raise InvalidArgument("batch must be nonempty")
    logits, cache = forward(params, batch.theta, batch.t, batch.cond, keep_cache=True)
    if not np.all(np.isfinite(logits)):
        check_finite(params.tensors, "denoiser parameter")
        raise NumericalFailure("non-finite logits in denoiser forward pass")
    B = len(batch.x)
    gamma = np.asarray(batch.gamma, dtype=np.float64).reshape(B, 1)
    y = np.asarray(batch.y, dtype=np.float64)
    if y.ndim == logits.ndim:
        y = y[:, None]
    if y.shape[0] != B or y.shape[2:] != logits.shape[1:]:
        raise InvalidArgument(f"sender draws have shape {y.shape}, logits {logits.shape}")
    # same quantity as position_losses, with one exp pass shared by the gradient
    shifted = logits[:, None] + y
    top = shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted - top)
    total = e.sum(axis=-1, keepdims=True)
    lse_shifted = (top + np.log(total))[..., 0]
    y_x = np.take_along_axis(y, np.broadcast_to((batch.x - 1)[:, None, :, None],
                                                y.shape[:-1] + (1,)), axis=-1)[..., 0]
    per_pos = (y_x - lse_shifted).mean(axis=1) + logsumexp(logits, axis=-1)
    loss = float(np.sum(gamma * per_pos) / B)
    if not np.isfinite(loss):
        raise NumericalFailure("non-finite loss in denoiser forward pass")
    # d/dz [y_x - lse(logp + y)] = softmax(z) - softmax(z + y)
    dlogits = softmax(logits, axis=-1) - (e / total).mean(axis=1)
    dlogits *= gamma[..., None] / B
    return loss, backward(params, cache, dlogits)


def config_dict(cfg: DenoiserConfig) -> dict:
    return asdict(cfg)
