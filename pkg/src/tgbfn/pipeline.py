"""Cached end-to-end pipeline: data, both networks, and per-seed evaluations.

Everything lands in one cache directory keyed by a hash of the resolved
configuration, so reruns with the same settings reuse checkpoints and
reports instead of retraining.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .checkpoint import load_denoiser, load_guidance
from .evaluate import MetricsReport, evaluate_sampler
from .sampling import SamplerConfig
from .shapes import DEFAULT_VOCAB, generate_dataset, load_splits
from .training import GuidanceTrainConfig, TrainConfig, train_guidance, train_skeleton


@dataclass
class PipelineConfig:
    data_count: int = 20_000
    data_seed: int = 7
    skeleton: TrainConfig = field(
        default_factory=lambda: TrainConfig(conditional=True, lr_final=5e-5))
    guidance: GuidanceTrainConfig = field(default_factory=GuidanceTrainConfig)
    eval_count: int = 500

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class Artifacts:
    root: Path
    config: PipelineConfig
    denoiser: object
    guidance: object
    splits: dict
    transform: object
    timings: dict


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else None


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1), encoding="utf-8")
    tmp.replace(path)


def prepare(cache_dir, cfg: PipelineConfig | None = None, verbose: bool = True) -> Artifacts:
    """Generate the dataset and train both networks unless cached."""
    cfg = cfg or PipelineConfig()
    root = Path(cache_dir) / cfg.key()
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "config.json", asdict(cfg))
    timings = _read_json(root / "timings.json") or {}
    say = print if verbose else (lambda *a, **k: None)

    data_dir = root / "data"
    if not (data_dir / "transform.json").exists():
        t0 = time.perf_counter()
        generate_dataset(cfg.data_count, cfg.data_seed, out_dir=data_dir)
        timings["data_seconds"] = time.perf_counter() - t0
        _write_json(root / "timings.json", timings)
    splits, transform = load_splits(data_dir)

    den_path = root / "denoiser.ckpt"
    if "skeleton_seconds" not in timings:
        say(f"training skeleton ({cfg.skeleton.steps} steps) into {root}", flush=True)
        t0 = time.perf_counter()
        train_skeleton(splits["train"], cfg.skeleton, DEFAULT_VOCAB.K, transform=transform,
                       checkpoint_path=den_path, log_path=root / "denoiser.log")
        timings["skeleton_seconds"] = time.perf_counter() - t0
        _write_json(root / "timings.json", timings)
    guide_path = root / "guidance.ckpt"
    if "guidance_seconds" not in timings:
        say(f"training guidance ({cfg.guidance.steps} steps)", flush=True)
        t0 = time.perf_counter()
        train_guidance(splits["train"], transform, cfg.guidance, DEFAULT_VOCAB.K,
                       checkpoint_path=guide_path, log_path=root / "guidance.log")
        timings["guidance_seconds"] = time.perf_counter() - t0
        _write_json(root / "timings.json", timings)
    denoiser, _ = load_denoiser(den_path)
    guidance, _ = load_guidance(guide_path)
    return Artifacts(root, cfg, denoiser, guidance, splits, transform, timings)


def evaluate_cached(art: Artifacts, mode: str, m: int, H: int, seed: int,
                    n: int = 100, beta1: float = 3.0) -> tuple[MetricsReport, float]:
    """Evaluate one sampler setting on the test split; returns ``(report, seconds)``."""
    cfg = SamplerConfig(n=n, beta1=beta1, m=m, H=H, mode=mode, seed=seed)
    path = art.root / "eval" / f"{mode}_n{n}_b{beta1:g}_m{m}_H{H}_s{seed}_c{art.config.eval_count}.json"
    cached = _read_json(path)
    if cached is not None:
        return MetricsReport(**cached["report"]), cached["seconds"]
    t0 = time.perf_counter()
    report, _ = evaluate_sampler(art.denoiser, art.guidance, art.splits["test"], art.transform,
                                 cfg, art.config.eval_count)
    seconds = time.perf_counter() - t0
    path.parent.mkdir(exist_ok=True)
    _write_json(path, {"report": report.to_dict(), "seconds": seconds})
    return report, seconds

