"""Refinement ladder (dt/2, dx/2, 4x paths per level) for a config with a closed form.

    python3 scripts/convergence_ladder.py configs/eb.cfg [--levels 3] [--replications 2]
"""
import argparse
from dataclasses import replace
from pathlib import Path

from umfbsde.cli import convergence_ladder, write_ladder
from umfbsde.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--levels", type=int)
    ap.add_argument("--replications", type=int)
    ap.add_argument("--csv", default="convergence_ladder.csv")
    args = ap.parse_args()
    cfg = load_config(args.config)
    conv = cfg.convergence
    if args.levels:
        conv = replace(conv, levels=args.levels)
    if args.replications:
        conv = replace(conv, replications=args.replications)
    rows = convergence_ladder(replace(cfg, convergence=conv))
    write_ladder(rows, Path(args.csv))
    print("level  Y0_error   pi_error   bspde_rms  dbspde_rms  V(0,x0)   s.e.      seconds")
    for r in rows:
        print(f"{r.level:5d}  {r.Y0_error:.3e}  {r.pi_error:.3e}  {r.bspde_residual_rms:.3e}  "
              f"{r.bspde_derivative_residual_rms:.3e}   {r.v0:.5f}  {r.v0_stderr:.1e}  "
              f"{r.runtime_seconds:.1f}")


if __name__ == "__main__":
    main()
