"""Command-line entry point.

    tgbfn gen-data --count 20000 --seed 7 --out data/
    tgbfn train-skeleton --data data/ --out runs/den.ckpt --conditional
    tgbfn train-guidance --data data/ --out runs/guid.ckpt
    tgbfn sample --denoiser runs/den.ckpt --guidance runs/guid.ckpt --mode tgbfn \
        --m 4 --H 4 --area 12.5 --volume 3.2 --count 10
    tgbfn evaluate --denoiser ... --guidance ... --data data/ --count 500
    tgbfn ablate --denoiser ... --guidance ... --data data/ --m 1,2,4,8,16 --H 1,2,4,8

Exit status is 0 on success, 1 on a domain error (one ``error:`` line on
stderr) and 2 on a usage error. Every run first prints ``config: {json}``
with the fully resolved settings.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import InvalidArgument, NumericalFailure


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _seed_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_sampler_flags(p):
    p.add_argument("--mode", choices=("bfn", "gbf", "tgbfn"), default="tgbfn")
    p.add_argument("--n", type=int, default=100, help="number of sampling steps")
    p.add_argument("--beta1", type=float, default=3.0, help="final accuracy beta(1)")
    p.add_argument("--denoiser", required=True, help="denoiser checkpoint")
    p.add_argument("--guidance", help="guidance checkpoint (gbf/tgbfn)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tgbfn", allow_abbrev=False)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS threads (set before numerical libraries load)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", allow_abbrev=False)
    p.add_argument("--count", type=int, default=20_000)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1", help="train,val,test fractions")
    p.add_argument("--max-tokens", type=int, default=64)

    p = sub.add_parser("train-skeleton", allow_abbrev=False)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--beta1", type=float, default=3.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--sender-draws", type=int, default=8)
    p.add_argument("--lr-final", type=float, default=None,
                   help="cosine-decay the learning rate to this value")
    p.add_argument("--conditional", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--log-every", type=int, default=100)

    p = sub.add_parser("train-guidance", allow_abbrev=False)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--beta1", type=float, default=3.0)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--var-floor", type=float, default=1e-4)
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--log-every", type=int, default=100)

    p = sub.add_parser("sample", allow_abbrev=False)
    _add_sampler_flags(p)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--H", type=int, default=1)
    p.add_argument("--area", type=float)
    p.add_argument("--volume", type=float)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--data", help="dataset directory; targets come from its test split "
                                  "when --area/--volume are not given")
    p.add_argument("--out", help="write samples as JSON lines")

    p = sub.add_parser("evaluate", allow_abbrev=False)
    _add_sampler_flags(p)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--H", type=int, default=1)
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--out", help="write the report as JSON")

    p = sub.add_parser("ablate", allow_abbrev=False)
    _add_sampler_flags(p)
    p.add_argument("--m", type=_int_list, default=[1, 2, 4, 8, 16])
    p.add_argument("--H", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--seeds", type=_seed_list, help="defaults to the global --seed")
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--out", help="write the table as CSV")
    return parser


def _echo(config: dict) -> None:
    print("config: " + json.dumps(config, sort_keys=True, default=str), flush=True)


def _load_pair(args):
    from .checkpoint import load_denoiser, load_guidance
    from .shapes import ConditionTransform
    den, meta = load_denoiser(args.denoiser)
    guide = transform = None
    if args.guidance:
        guide, gmeta = load_guidance(args.guidance)
        if "transform" in gmeta:
            transform = ConditionTransform.from_dict(gmeta["transform"])
    if transform is None and "transform" in meta:
        transform = ConditionTransform.from_dict(meta["transform"])
    if args.mode != "bfn" and guide is None:
        raise InvalidArgument(f"--mode {args.mode} requires --guidance")
    return den, guide, transform


def _sampler_config(args, m=None, H=None):
    from .sampling import SamplerConfig
    return SamplerConfig(n=args.n, beta1=args.beta1, m=args.m if m is None else m,
                         H=args.H if H is None else H, mode=args.mode, seed=args.seed)


def cmd_gen_data(args):
    from .shapes import generate_dataset
    try:
        ratios = tuple(float(r) for r in args.ratios.split(","))
    except ValueError:
        raise InvalidArgument(f"--ratios must be three numbers, got {args.ratios!r}")
    _echo({"command": "gen-data", "count": args.count, "seed": args.seed, "out": args.out,
           "ratios": ratios, "max_tokens": args.max_tokens})
    splits, transform = generate_dataset(args.count, args.seed, ratios, out_dir=args.out,
                                         max_tokens=args.max_tokens)
    for name, data in splits.items():
        print(f"{name}: {len(data)} records")
    print("transform: " + json.dumps(transform.to_dict(), sort_keys=True))


def cmd_train_skeleton(args):
    from .shapes import load_splits
    from .training import TrainConfig, config_echo, train_skeleton
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, beta1=args.beta1,
                      n=args.n, gamma=args.gamma, conditional=args.conditional,
                      width=args.width, layers=args.layers, sender_draws=args.sender_draws,
                      lr_final=args.lr_final,
                      seed=args.seed, checkpoint_every=args.checkpoint_every,
                      log_every=args.log_every)
    _echo({"command": "train-skeleton", "data": args.data, "out": args.out, "log": args.log,
           **config_echo(cfg)})
    splits, transform = load_splits(args.data)
    K = _vocab_size()
    _, history = train_skeleton(splits["train"], cfg, K, transform=transform,
                                checkpoint_path=args.out, log_path=args.log)
    print(f"final loss per position: {history[-1][1]:.6g}")


def cmd_train_guidance(args):
    from .shapes import load_splits
    from .training import GuidanceTrainConfig, config_echo, train_guidance
    cfg = GuidanceTrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                              beta1=args.beta1, n=args.n, width=args.width,
                              var_floor=args.var_floor, seed=args.seed,
                              checkpoint_every=args.checkpoint_every, log_every=args.log_every)
    _echo({"command": "train-guidance", "data": args.data, "out": args.out, "log": args.log,
           **config_echo(cfg)})
    splits, transform = load_splits(args.data)
    _, history = train_guidance(splits["train"], transform, cfg, _vocab_size(),
                                checkpoint_path=args.out, log_path=args.log)
    print(f"final loss: {history[-1][1]:.6g}")


def _vocab_size() -> int:
    from .shapes import DEFAULT_VOCAB
    return DEFAULT_VOCAB.K


def cmd_sample(args):
    import numpy as np

    from .sampling import run_sampler
    from .shapes import load_splits, normalize_condition, realized_properties
    cfg = _sampler_config(args)
    _echo({"command": "sample", **asdict(cfg), "denoiser": args.denoiser,
           "guidance": args.guidance, "area": args.area, "volume": args.volume,
           "count": args.count, "data": args.data, "out": args.out})
    if args.count < 1:
        raise InvalidArgument("--count must be >= 1")
    den, guide, transform = _load_pair(args)
    needs_targets = den.config.conditional or cfg.mode != "bfn"
    targets = None
    if args.area is not None or args.volume is not None:
        if args.area is None or args.volume is None:
            raise InvalidArgument("--area and --volume must be given together")
        targets = np.tile([args.area, args.volume], (args.count, 1))
    elif needs_targets:
        if not args.data:
            raise InvalidArgument("give --area/--volume or --data to draw test targets")
        splits, _ = load_splits(args.data)
        targets = splits["test"].conds[:args.count]
    cond = None
    if targets is not None:
        if transform is None:
            raise InvalidArgument("checkpoints carry no condition transform")
        cond = normalize_condition(targets, transform)
    res = run_sampler(den, cfg, cond=cond if needs_targets else None,
                      guidance=guide if cfg.mode != "bfn" else None,
                      count=None if needs_targets else args.count)
    records = []
    for j, row in enumerate(res.tokens):
        props = realized_properties(row)
        rec = {"tokens": [int(v) for v in row], "valid": props is not None,
               "area": None if props is None else float(props[0]),
               "volume": None if props is None else float(props[1])}
        if targets is not None:
            rec["target_area"], rec["target_volume"] = (float(v) for v in targets[j])
        records.append(rec)
        shown = "invalid" if props is None else f"area={props[0]:.4f} volume={props[1]:.4f}"
        print(" ".join(str(v) for v in row) + "  " + shown)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("".join(json.dumps(r) + "\n" for r in records),
                                  encoding="utf-8")


def cmd_evaluate(args):
    from .evaluate import evaluate_sampler
    from .shapes import load_splits
    cfg = _sampler_config(args)
    _echo({"command": "evaluate", **asdict(cfg), "denoiser": args.denoiser,
           "guidance": args.guidance, "data": args.data, "count": args.count, "out": args.out})
    den, guide, _ = _load_pair(args)
    splits, transform = load_splits(args.data)
    report, _ = evaluate_sampler(den, guide, splits["test"], transform, cfg, args.count)
    print(json.dumps(report.row(), sort_keys=True))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n",
                                  encoding="utf-8")


def cmd_ablate(args):
    from .evaluate import ablation_grid, reports_to_csv
    from .shapes import load_splits
    seeds = args.seeds if args.seeds else [args.seed]
    base = _sampler_config(args, m=1, H=1)
    _echo({"command": "ablate", **asdict(base), "m_values": args.m, "H_values": args.H,
           "seeds": seeds, "denoiser": args.denoiser, "guidance": args.guidance,
           "data": args.data, "count": args.count, "out": args.out})
    if args.mode != "tgbfn":
        raise InvalidArgument("ablate sweeps m and H, which requires --mode tgbfn")
    den, guide, _ = _load_pair(args)
    splits, transform = load_splits(args.data)
    rows = ablation_grid(den, guide, splits["test"], transform, args.m, args.H, base,
                         args.count, seeds)
    table = reports_to_csv(rows)
    sys.stdout.write(table)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table, encoding="utf-8")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-skeleton": cmd_train_skeleton,
    "train-guidance": cmd_train_guidance,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("tgbfn: error: --threads must be >= 1", file=sys.stderr)
        return 2
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    from .shapes import DecodeError
    try:
        COMMANDS[args.command](args)
    except (InvalidArgument, NumericalFailure, DecodeError, OSError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: kind={type(exc).__name__} command={args.command} message={message}",
              file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
