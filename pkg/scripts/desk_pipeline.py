"""Train (or reuse) the desk-scale networks and print the criterion 5-7 numbers.

    python3 scripts/desk_pipeline.py --cache .acceptance_cache
"""
import argparse
import json

import numpy as np

from tgbfn.pipeline import PipelineConfig, evaluate_cached, prepare

SETTINGS = [("bfn", 1, 1), ("tgbfn", 1, 1), ("tgbfn", 4, 1), ("tgbfn", 1, 4), ("tgbfn", 4, 4)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", default=".acceptance_cache")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    art = prepare(args.cache, PipelineConfig())
    print("timings", json.dumps(art.timings))
    for mode, m, H in SETTINGS:
        mse, pcc, valid, secs = [], [], [], 0.0
        for seed in range(args.seeds):
            rep, s = evaluate_cached(art, mode, m, H, seed)
            mse.append(rep.mse)
            pcc.append([np.nan if p is None else p for p in rep.pcc])
            valid.append(rep.validity_rate)
            secs += s
        print(f"{mode:5s} m={m} H={H}  median mse={np.median(mse, 0).round(4).tolist()} "
              f"mean pcc={np.nanmean(pcc, 0).round(3).tolist()} "
              f"validity={np.mean(valid):.3f}  {secs:.0f}s", flush=True)


if __name__ == "__main__":
    main()
