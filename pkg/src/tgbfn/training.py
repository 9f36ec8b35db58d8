"""Training loops for the skeleton denoiser and the guidance network."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import core
from .checkpoint import save_denoiser, save_guidance
from .denoiser import Batch, DenoiserConfig, init_denoiser, loss_and_gradients
from .errors import InvalidArgument, NumericalFailure
from .guidance import (GuidanceConfig, init_guidance, kl_loss_and_gradients,
                       record_weights, weighted_moments)
from .shapes import ConditionTransform, Dataset


@dataclass
class AdamConfig:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(tensors: dict, grads: dict, state: AdamState, cfg: AdamConfig):
    """Bias-corrected Adam update, applied in place to ``tensors``.

    This is the only function that mutates network parameters.
    """
    if set(tensors) != set(grads):
        raise InvalidArgument("gradient names do not match parameter names")
    state.step += 1
    c1 = 1.0 - cfg.b1 ** state.step
    c2 = 1.0 - cfg.b2 ** state.step
    for name, g in grads.items():
        if g.shape != tensors[name].shape:
            raise InvalidArgument(f"gradient shape {g.shape} != parameter shape "
                                  f"{tensors[name].shape} for '{name}'")
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= cfg.b1
        m += (1.0 - cfg.b1) * g
        v *= cfg.b2
        v += (1.0 - cfg.b2) * g * g
        tensors[name] -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return tensors, state


def grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


@dataclass
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 64
    lr: float = 1e-3
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    beta1: float = 3.0
    n: int = 100
    gamma: float = 1.0
    conditional: bool = False
    width: int = 128
    layers: int = 2
    sender_draws: int = 8
    lr_final: float | None = None   # cosine decay from lr to this value; None keeps lr fixed
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        for name in ("steps", "batch_size", "n", "checkpoint_every", "log_every", "layers", "width",
                     "sender_draws"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if not self.lr > 0:
            raise InvalidArgument("learning rate must be positive")
        if self.lr_final is not None and not 0 <= self.lr_final <= self.lr:
            raise InvalidArgument("lr_final must lie in [0, lr]")

    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.adam_b1, self.adam_b2, self.adam_eps)

    def lr_at(self, step: int) -> float:
        if self.lr_final is None:
            return self.lr
        frac = (step - 1) / max(self.steps - 1, 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1 + math.cos(math.pi * frac))


class TrainLog:
    """Append-only JSON-lines log; a no-op without a path."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.t0 = time.perf_counter()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record):
        record["wall_time"] = round(time.perf_counter() - self.t0, 3)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")


def antithetic_sender(x: np.ndarray, alpha, K: int, draws: int,
                      rng: np.random.Generator) -> np.ndarray:
    """``draws`` sender samples per record, shape (B, draws, D, K).

    Draws come in mirrored pairs ``mu + e, mu - e``; each is marginally an
    exact sender draw, and the pair cancels the noise term that is linear in
    ``e``. An odd count leaves the last draw unpaired.
    """
    x = np.asarray(x)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), x.shape[:1])
    mean = core.sender_mean(x, alpha[:, None], K)[:, None]
    half = (draws + 1) // 2
    e = np.sqrt(alpha * K)[:, None, None, None] * rng.standard_normal(
        (len(x), half) + mean.shape[2:])
    y = np.concatenate([mean + e, mean - e], axis=1)
    return y[:, :draws]


def skeleton_batch(data: Dataset, cond_norm, cfg: TrainConfig, schedule,
                   rng: np.random.Generator, K: int) -> Batch:
    """Minibatch with per-record step ``i ~ U{1..n}`` and flow state at ``beta_{i-1}``."""
    idx = rng.integers(0, len(data), cfg.batch_size)
    x = data.tokens[idx]
    i = rng.integers(1, schedule.n + 1, cfg.batch_size)
    t = (i - 1) / schedule.n
    beta_prev = schedule.beta_total * t ** 2
    alpha = schedule.alphas[i - 1]
    theta = core.flow_state(x, beta_prev, K, rng)
    if cfg.sender_draws == 1:
        y = core.sample_sender(x, alpha, K, rng)
    else:
        y = antithetic_sender(x, alpha, K, cfg.sender_draws, rng)
    cond = cond_norm[idx] if cfg.conditional else None
    return Batch(x, theta, t, alpha, y, np.full(cfg.batch_size, cfg.gamma), cond)


def train_skeleton(data: Dataset, cfg: TrainConfig, K: int,
                   transform: ConditionTransform | None = None,
                   checkpoint_path=None, log_path=None, params=None):
    """Train the output-distribution network; returns ``(params, history)``.

    ``history`` holds ``(step, loss_per_position)`` for every step. On a
    non-finite loss the last written checkpoint is left untouched and
    :class:`NumericalFailure` propagates.
    """
    if len(data) == 0:
        raise InvalidArgument("dataset is empty")
    D = data.tokens.shape[1]
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        dcfg = DenoiserConfig(D=D, K=K, width=cfg.width, layers=cfg.layers,
                              conditional=cfg.conditional,
                              cond_dim=data.conds.shape[1])
        params = init_denoiser(dcfg, rng)
    cond_norm = None
    if cfg.conditional:
        if transform is None:
            raise InvalidArgument("conditional training requires a condition transform")
        cond_norm = data.normalized(transform)
    schedule = core.build_schedule(cfg.beta1, cfg.n)
    state = AdamState()
    adam = cfg.adam()
    log = TrainLog(log_path)
    history = []
    for step in range(1, cfg.steps + 1):
        batch = skeleton_batch(data, cond_norm, cfg, schedule, rng, K)
        loss, grads = loss_and_gradients(batch, params)
        if not np.isfinite(loss):
            raise NumericalFailure(f"non-finite skeleton loss at step {step}")
        adam.lr = cfg.lr_at(step)
        optimizer_step(params.tensors, grads, state, adam)
        history.append((step, loss / D))
        if step % cfg.log_every == 0 or step == cfg.steps:
            log.write(step=step, loss=loss, loss_per_position=loss / D,
                      grad_norm=grad_norm(grads))
        if checkpoint_path and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
            save_denoiser(checkpoint_path, params, step, cfg.seed, transform)
    return params, history


@dataclass
class GuidanceTrainConfig:
    steps: int = 20_000
    batch_size: int = 64
    lr: float = 1e-3
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    beta1: float = 3.0
    n: int = 100
    width: int = 128
    var_floor: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        for name in ("steps", "batch_size", "n", "checkpoint_every", "log_every", "width"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if not self.lr > 0:
            raise InvalidArgument("learning rate must be positive")

    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.adam_b1, self.adam_b2, self.adam_eps)


def guidance_batch(data: Dataset, cond_norm, cfg: GuidanceTrainConfig, schedule,
                   rng: np.random.Generator, K: int, var_floor: float):
    """Anchor beliefs, their accuracies and importance-weighted target moments.

    Each anchor gets its own step ``i``; its belief carries the cumulative
    accuracy ``beta_i`` and the minibatch records are weighted by the sender
    density of the anchor's draw at that accuracy.
    """
    idx = rng.integers(0, len(data), cfg.batch_size)
    x = data.tokens[idx]
    conds = cond_norm[idx]
    i = rng.integers(1, schedule.n + 1, cfg.batch_size)
    beta = schedule.betas[i - 1]
    theta, y = core.flow_state(x, beta, K, rng, return_y=True)
    weights = record_weights(x, y, beta)
    return theta, beta, weighted_moments(weights, conds, var_floor)


def train_guidance(data: Dataset, transform: ConditionTransform,
                   cfg: GuidanceTrainConfig, K: int,
                   checkpoint_path=None, log_path=None, params=None):
    """Fit the guidance network to importance-weighted minibatch moments."""
    if len(data) == 0:
        raise InvalidArgument("dataset is empty")
    D = data.tokens.shape[1]
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        gcfg = GuidanceConfig(D=D, K=K, cond_dim=data.conds.shape[1],
                              width=cfg.width, var_floor=cfg.var_floor)
        params = init_guidance(gcfg, rng)
    cond_norm = data.normalized(transform)
    schedule = core.build_schedule(cfg.beta1, cfg.n)
    state = AdamState()
    adam = cfg.adam()
    log = TrainLog(log_path)
    history = []
    for step in range(1, cfg.steps + 1):
        theta, beta, target = guidance_batch(data, cond_norm, cfg, schedule, rng, K,
                                             params.config.var_floor)
        loss, grads = kl_loss_and_gradients(theta, beta, target, params)
        if not np.isfinite(loss):
            raise NumericalFailure(f"non-finite guidance loss at step {step}")
        optimizer_step(params.tensors, grads, state, adam)
        history.append((step, loss))
        if step % cfg.log_every == 0 or step == cfg.steps:
            log.write(step=step, loss=loss, grad_norm=grad_norm(grads))
        if checkpoint_path and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
            save_guidance(checkpoint_path, params, step, cfg.seed, transform)
    return params, history


def config_echo(cfg) -> dict:
    return asdict(cfg)
