"""Full (m, H) grid on cached desk-scale networks, written as CSV.

    python3 scripts/ablation.py --m 1,2,4,8 --H 1,2,4,8 --seeds 3 --out grid.csv
"""
import argparse
import csv
import sys

from tgbfn.pipeline import PipelineConfig, evaluate_cached, prepare


def ints(text):
    return [int(v) for v in text.split(",")]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", default=".acceptance_cache")
    ap.add_argument("--m", type=ints, default=[1, 2, 4, 8])
    ap.add_argument("--H", type=ints, default=[1, 2, 4, 8])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--out", default="-")
    args = ap.parse_args()
    art = prepare(args.cache, PipelineConfig())
    rows = []
    for m in args.m:
        for H in args.H:
            for seed in range(args.seeds):
                rep, secs = evaluate_cached(art, "tgbfn", m, H, seed)
                rows.append({"m": m, "H": H, "seed": seed, **rep.row(), "seconds": round(secs, 1)})
                print(f"m={m} H={H} seed={seed} done", file=sys.stderr, flush=True)
    out = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    writer = csv.DictWriter(out, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)


if __name__ == "__main__":
    main()
