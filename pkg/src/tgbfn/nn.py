"""Minimal numpy building blocks shared by the two networks."""
from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import expit


def silu(x):
    return x * expit(x)


def silu_grad(x, s=None):
    """Derivative of silu; ``s`` may carry a precomputed ``expit(x)``."""
    if s is None:
        s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def softplus(x):
    return np.logaddexp(0.0, x)


def fan_in_init(rng, fan_in, shape):
    return rng.standard_normal(shape) / np.sqrt(fan_in)


def time_features(t, n_features):
    """Sinusoidal features of ``t`` in [0, 1] at geometric frequencies."""
    t = np.asarray(t, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(n_features // 2)
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def params_digest(tensors):
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()


def check_finite(tensors, where):
    from .errors import NumericalFailure
    for name, value in tensors.items():
        if not np.all(np.isfinite(value)):
            raise NumericalFailure(f"non-finite values in {where} tensor '{name}'")
