"""Occlusion benchmark: single-frame vs base model vs memory-enhanced, over one or more seeds.

    python3 scripts/run_benchmark.py --seeds 0,1,2,3 --out results/benchmark.json
"""
import argparse
import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from mega.experiments import BenchmarkConfig, run_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--steps", type=int, default=BenchmarkConfig.steps)
    ap.add_argument("--lr", type=float, default=BenchmarkConfig.learning_rate)
    ap.add_argument("--qlo", type=float, default=BenchmarkConfig.occluded_quality[0])
    ap.add_argument("--qhi", type=float, default=BenchmarkConfig.occluded_quality[1])
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        bench = BenchmarkConfig(seed=seed, steps=args.steps, learning_rate=args.lr,
                                occluded_quality=(args.qlo, args.qhi))
        res = run_benchmark(bench)
        m = {k: round(v["map"], 2) for k, v in res.items()}
        ordered = m["single_frame"] < m["base_model"] < m["mega"]
        print(f"seed {seed}: {m}  ordered={ordered}", flush=True)
        cfg = dataclasses.asdict(bench)
        rows.append({"seed": seed, "bench": cfg, "results": res, "ordered": ordered})

    if len(rows) > 1:
        for name in ("single_frame", "base_model", "mega"):
            vals = [r["results"][name]["map"] for r in rows]
            print(f"{name:>12}: mean {np.mean(vals):.2f}  sd {np.std(vals):.2f}")
        print(f"ordering held on {sum(r['ordered'] for r in rows)}/{len(rows)} seeds")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(rows, indent=2, default=str))


if __name__ == "__main__":
    main()
