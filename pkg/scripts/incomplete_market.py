"""Endowment 0.5 tanh(W2_T) on an orthogonal factor: identity report, residual
halving in dt, and Y / N_perp against the Gauss-Hermite certainty equivalent.

    python3 scripts/incomplete_market.py [--paths 20000] [--surface-paths 20000]
"""
import argparse

import numpy as np

from umfbsde.bridge import identity_report
from umfbsde.fbsde import (PicardConfig, residual_check_fbsde, solve_system_p_picard,
                           y_solution_from_p)
from umfbsde.market import EndowmentSpec, MarketSpec, TimeGrid, simulate_paths
from umfbsde.oracles import ExponentialOrthogonal
from umfbsde.surface import XGrid, marginal_surface
from umfbsde.utility import ExponentialUtility


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=20000)
    ap.add_argument("--surface-paths", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    market = MarketSpec(0.1, 0.2, orthogonal_factor=True)
    endowment = EndowmentSpec("orthogonal", 0.5)
    utility = ExponentialUtility(1.0)
    oracle = ExponentialOrthogonal()
    cfg = PicardConfig()

    print("steps  P-residual  Y-residual  ratio")
    prev = None
    for steps in (25, 50, 100):
        paths = simulate_paths(market, TimeGrid(1.0, steps), endowment, args.paths, args.seed)
        sol = solve_system_p_picard(paths, utility, 0.0, cfg)
        rp = residual_check_fbsde(sol, "P", market, utility).cumulative_rms
        ry = residual_check_fbsde(y_solution_from_p(sol, utility), "Y", market, utility).cumulative_rms
        print(f"{steps:5d}  {rp:.4e}  {ry:.4e}  {'' if prev is None else f'{prev / rp:.3f}'}")
        prev = rp

    sol_y = y_solution_from_p(sol, utility)
    k = np.arange(0, steps, 10)
    t = paths.t[k][:, None]
    print("Y rms error vs oracle      ", np.sqrt(np.mean((sol_y.Y[k] - oracle.y(t, paths.W2[k]))**2)))
    print("N_perp rms error vs oracle ",
          np.sqrt(np.mean((sol_y.n_perp[k] - oracle.n_perp(t, paths.W2[k]))**2)))
    surf = marginal_surface(paths, utility, sol.policy, XGrid.default(0.2, 2.5, 1.0),
                            t_stride=5, n_paths=args.surface_paths)
    print(identity_report(sol_y, sol, surf, market, utility).to_table())


if __name__ == "__main__":
    main()
