"""Plain, guided and target-guided Bayesian flow samplers.

All samplers run a batch of ``N`` chains in lockstep. Randomness is drawn
from substreams keyed by ``(seed, step, lane)``: lane ``j`` of step ``i``
supplies the ``H`` categorical draws and the sender noise of candidate ``j``,
and the final output draw uses ``(seed, n + 1, 0)``. A plain BFN chain
therefore consumes exactly the numbers that candidate 0 of a target-guided
chain does, which makes the degenerate settings bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import core
from .denoiser import DenoiserParams, output_distribution
from .errors import InvalidArgument, NumericalFailure
from .guidance import GuidanceParams, guidance_logweight

MODES = ("bfn", "gbf", "tgbfn")


@dataclass
class SamplerConfig:
    n: int = 100
    beta1: float = 3.0
    m: int = 1
    H: int = 1
    mode: str = "bfn"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("n", "m", "H"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidArgument(f"{name} must be a positive integer, got {v}")


@dataclass
class StepTrace:
    i: int
    t: float
    alpha: float
    log_weights: np.ndarray     # (N, m)
    entropy: float              # mean per-position entropy of the aggregated belief

    def to_dict(self) -> dict:
        return {"i": self.i, "t": self.t, "alpha": self.alpha,
                "log_weights": self.log_weights.tolist(), "entropy": self.entropy}


@dataclass
class SampleResult:
    tokens: np.ndarray          # (N, D), 1-based
    theta: np.ndarray           # (N, D, K) final belief
    trace: list = field(default_factory=list)


def lane_rng(seed: int, step: int, lane: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step), int(lane)])


def draw_categorical(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws (1-based) from rows of ``p`` using uniforms ``u``."""
    cdf = np.cumsum(p, axis=-1)
    k = np.sum(u[..., None] >= cdf, axis=-1)
    return np.minimum(k, p.shape[-1] - 1) + 1


def nearest_category(z, K: int):
    """Closest integer in ``1..K``; half-integers round down, out-of-range values clamp."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.isnan(z)):
        raise InvalidArgument("nearest_category received NaN")
    k = np.ceil(z - 0.5)
    k = np.clip(k, 1, K).astype(np.int64)
    return int(k) if k.ndim == 0 else k


def calibrated_category(p_out: np.ndarray, H: int, rng: np.random.Generator):
    """Average ``H`` categorical draws per position and project to a category."""
    if int(H) != H or H < 1:
        raise InvalidArgument(f"H must be a positive integer, got {H}")
    u = rng.random((int(H),) + p_out.shape[:-1])
    draws = draw_categorical(p_out[None], u)
    if H == 1:
        return draws[0]
    return nearest_category(draws.mean(axis=0), p_out.shape[-1])


def _prepare(params: DenoiserParams, cond, count):
    cfg = params.config
    if cond is not None:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        N = len(cond)
    else:
        if count is None:
            raise InvalidArgument("count is required without a condition")
        N = int(count)
    den_cond = cond if cfg.conditional else None
    if cfg.conditional and cond is None:
        raise InvalidArgument("conditional denoiser requires target conditions")
    return N, cond, den_cond


def run_sampler(params: DenoiserParams, cfg: SamplerConfig, cond=None,
                guidance: GuidanceParams | None = None, count: int | None = None,
                record_trace: bool = False) -> SampleResult:
    """Shared driver for all three modes.

    ``cond`` holds normalised target conditions, one row per chain. In
    ``bfn`` mode guidance is ignored and ``m = H = 1``; in ``gbf`` mode the
    single-path trajectory is the BFN one and guidance log-weights are only
    traced (rescaling one belief row by a positive scalar and renormalising is
    the identity); ``tgbfn`` aggregates ``m`` calibrated candidates by their
    normalised guidance weights.
    """
    N, cond, den_cond = _prepare(params, cond, count)
    D, K = params.config.D, params.config.K
    guided = cfg.mode in ("gbf", "tgbfn")
    if guided and (guidance is None or cond is None):
        raise InvalidArgument(f"{cfg.mode} sampling requires guidance and target conditions")
    m = cfg.m if cfg.mode == "tgbfn" else 1
    H = cfg.H if cfg.mode == "tgbfn" else 1
    schedule = core.build_schedule(cfg.beta1, cfg.n)
    theta = np.broadcast_to(core.uniform_prior(D, K), (N, D, K)).copy()
    trace = []
    for i in range(1, cfg.n + 1):
        t = float(schedule.times[i - 1])
        alpha = schedule.alpha(i)
        p_out = output_distribution(theta, t, den_cond, params)
        candidates = np.empty((m, N, D, K))
        logw = np.zeros((N, m))
        for j in range(m):
            rng = lane_rng(cfg.seed, i, j)
            k = calibrated_category(p_out, H, rng)
            y = core.sample_sender(k, alpha, K, rng)
            candidates[j] = core.bayesian_update(theta, y)
            if guided:
                logw[:, j] = guidance_logweight(cond, candidates[j], schedule.beta(i), guidance)
        if m == 1:
            theta = candidates[0]
        else:
            if not np.all(np.isfinite(np.max(logw, axis=1))):
                raise NumericalFailure(f"all guidance weights underflow at step {i}")
            w = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
            theta = np.einsum("nj,jndk->ndk", w, candidates)
        if record_trace:
            trace.append(StepTrace(i, t, alpha, logw.copy(),
                                   float(core.entropy(theta).mean())))
    p_final = output_distribution(theta, float(schedule.times[-1]), den_cond, params)
    u = lane_rng(cfg.seed, cfg.n + 1, 0).random((N, D))
    return SampleResult(draw_categorical(p_final, u), theta, trace)


def bfn_sample(params: DenoiserParams, cfg: SamplerConfig, cond=None,
               count: int | None = None, record_trace: bool = False) -> SampleResult:
    if cfg.mode != "bfn":
        raise InvalidArgument("bfn_sample requires mode='bfn'")
    return run_sampler(params, cfg, cond, None, count, record_trace)


def gbf_sample(params: DenoiserParams, guidance: GuidanceParams, cond,
               cfg: SamplerConfig, record_trace: bool = True) -> SampleResult:
    if cfg.mode != "gbf":
        raise InvalidArgument("gbf_sample requires mode='gbf'")
    return run_sampler(params, cfg, cond, guidance, None, record_trace)


def tgbfn_sample(params: DenoiserParams, guidance: GuidanceParams, cond,
                 cfg: SamplerConfig, record_trace: bool = False) -> SampleResult:
    if cfg.mode != "tgbfn":
        raise InvalidArgument("tgbfn_sample requires mode='tgbfn'")
    return run_sampler(params, cfg, cond, guidance, None, record_trace)


def sample(params, cfg: SamplerConfig, cond=None, guidance=None, count=None,
           record_trace=False) -> SampleResult:
    """Dispatch on ``cfg.mode``."""
    return run_sampler(params, cfg, cond, guidance, count, record_trace)
