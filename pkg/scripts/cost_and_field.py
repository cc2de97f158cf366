"""Receptive-field sweep and the memory-vs-enlarged-window cost comparison.

Prints the traced local/global slot counts next to the formula, then the
steady-state pair counts for T_m in 1..64 at the full-size structure.
"""
import argparse

from mega.analysis import linearity_report, receptive_field_sweep, steady_pairs
from mega.pipeline import PipelineConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--max-t-m", type=int, default=64)
    args = ap.parse_args()

    print("N_l T_m T_l | traced (local, global) | formula")
    for c in receptive_field_sweep():
        flag = "" if c.ok else "  MISMATCH"
        print(f"{c.N_l:3d} {c.T_m:3d} {c.T_l:3d} | ({c.traced_local:3d}, {c.traced_global:3d})"
              f"             | ({c.expected_local:3d}, {c.expected_global:3d}){flag}")

    cfg = PipelineConfig.full_scale()
    print("\nT_m   mega pairs   enlarged-window pairs   ratio")
    for t in [1, 2, 4, 8, 16, 32, 64]:
        if t > args.max_t_m:
            break
        c = cfg.replace(T_m=t)
        m, e = steady_pairs(c), steady_pairs(c, enlarged=True)
        print(f"{t:3d} {m:12d} {e:23d}   {e / m:5.2f}")
    rep = linearity_report(cfg)
    print(f"\nsecond differences: mega {[str(d) for d in rep.mega_second_diff]}, "
          f"enlarged {[str(d) for d in rep.enlarged_second_diff]}; crossover T_m = {rep.crossover}")


if __name__ == "__main__":
    main()
