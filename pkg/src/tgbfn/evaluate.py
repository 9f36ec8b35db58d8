"""Constraint-satisfaction metrics, sampler evaluation and the m/H grid."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import InvalidArgument
from .sampling import SamplerConfig, run_sampler
from .shapes import CONDITION_NAMES, DEFAULT_VOCAB, normalize_condition, realized_properties


@dataclass
class MetricsReport:
    mse: list
    mae: list
    pcc: list                   # None where undefined
    validity_rate: float
    count: int
    valid_count: int
    config: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {}
        for dim, name in enumerate(CONDITION_NAMES[:len(self.mse)]):
            out[f"{name}_mse"] = self.mse[dim]
            out[f"{name}_mae"] = self.mae[dim]
            out[f"{name}_pcc"] = self.pcc[dim]
        out.update(validity_rate=self.validity_rate, count=self.count,
                   valid_count=self.valid_count)
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def pearson(a, b):
    """Pearson correlation, or ``None`` when either input has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2:
        return None
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0.0:
        return None
    return float(np.clip(np.dot(da, db) / denom, -1.0, 1.0))


def compute_metrics(targets, realized, config: dict | None = None) -> MetricsReport:
    """Per-dimension MSE/MAE/PCC over valid pairs; ``None`` in ``realized`` marks
    an invalid generation, which only lowers ``validity_rate``."""
    if len(targets) != len(realized):
        raise InvalidArgument("targets and realized must have equal length")
    if len(targets) == 0:
        raise InvalidArgument("no samples to evaluate")
    keep = [i for i, r in enumerate(realized) if r is not None]
    tgt = np.asarray([targets[i] for i in keep], dtype=np.float64)
    got = np.asarray([realized[i] for i in keep], dtype=np.float64)
    d = np.asarray(targets[0]).size
    tgt = tgt.reshape(len(keep), d)
    got = got.reshape(len(keep), d)
    mse, mae, pcc = [], [], []
    for j in range(d):
        if keep:
            err = got[:, j] - tgt[:, j]
            mse.append(float(np.mean(err ** 2)))
            mae.append(float(np.mean(np.abs(err))))
        else:
            mse.append(None)
            mae.append(None)
        pcc.append(pearson(tgt[:, j], got[:, j]) if len(keep) >= 2 else None)
    return MetricsReport(mse, mae, pcc, len(keep) / len(targets), len(targets),
                         len(keep), dict(config or {}))


def evaluate_sampler(denoiser, guidance, test_data, transform, cfg: SamplerConfig,
                     count: int, vocab=DEFAULT_VOCAB, batch_size: int = 500):
    """Sample one sequence per test target and score realised properties.

    Targets are the ``(area, volume)`` of the first ``count`` test records.
    Returns ``(report, tokens)``.
    """
    if denoiser is None:
        raise InvalidArgument("a trained denoiser checkpoint is required")
    if cfg.mode != "bfn" and guidance is None:
        raise InvalidArgument(f"{cfg.mode} evaluation requires a guidance checkpoint")
    count = min(int(count), len(test_data))
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    targets = test_data.conds[:count]
    cond = normalize_condition(targets, transform)
    chunks = []
    for start in range(0, count, batch_size):
        sub = replace(cfg, seed=cfg.seed * 1_000_003 + start) if start else cfg
        res = run_sampler(denoiser, sub, cond[start:start + batch_size],
                          guidance if cfg.mode != "bfn" else None)
        chunks.append(res.tokens)
    tokens = np.concatenate(chunks)
    realized = [realized_properties(row, vocab) for row in tokens]
    report = compute_metrics(list(targets), realized, asdict(cfg))
    return report, tokens


def ablation_grid(denoiser, guidance, test_data, transform, m_values, H_values,
                  base: SamplerConfig, count: int, seeds=(0,)):
    """Evaluate tgbfn over the Cartesian ``m x H`` grid with shared seeds.

    Returns a list of ``(m, H, seed, MetricsReport)``.
    """
    if not m_values or not H_values:
        raise InvalidArgument("m and H value lists must be nonempty")
    rows = []
    for m in m_values:
        for H in H_values:
            for seed in seeds:
                cfg = replace(base, m=int(m), H=int(H), seed=int(seed), mode="tgbfn")
                report, _ = evaluate_sampler(denoiser, guidance, test_data, transform,
                                             cfg, count)
                rows.append((int(m), int(H), int(seed), report))
    return rows


def reports_to_csv(rows) -> str:
    """CSV text with a header row; ``rows`` are ``(m, H, seed, report)`` tuples."""
    buf = io.StringIO()
    writer = None
    for m, H, seed, report in rows:
        record = {"m": m, "H": H, "seed": seed, **report.row()}
        if writer is None:
            writer = csv.DictWriter(buf, fieldnames=list(record), lineterminator="\n")
            writer.writeheader()
        writer.writerow({k: ("" if v is None else v) for k, v in record.items()})
    return buf.getvalue()
