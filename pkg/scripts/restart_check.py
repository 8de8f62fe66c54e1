"""Decoupling restart: re-solve from (t_s, x) and compare Y_t with u(t, X_t).

    python3 scripts/restart_check.py [--s 20] [--x 0.3]
"""
import argparse

from umfbsde.bridge import AnalyticField, field_from_surface
from umfbsde.fbsde import PicardConfig, decoupling_restart_test, solve_system_p_picard
from umfbsde.market import EndowmentSpec, MarketSpec, TimeGrid, simulate_paths
from umfbsde.oracles import ExponentialBachelier
from umfbsde.surface import XGrid, marginal_surface
from umfbsde.utility import ExponentialUtility


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--s", type=int, default=20)
    ap.add_argument("--x", type=float, default=0.3)
    ap.add_argument("--paths", type=int, default=20000)
    args = ap.parse_args()
    utility = ExponentialUtility(1.0)
    cfg = PicardConfig()
    for mu, h in ((0.1, 0.5), (0.0, 0.0)):
        market = MarketSpec(mu, 0.2)
        paths = simulate_paths(market, TimeGrid(1.0, 100), EndowmentSpec("constant", h),
                               args.paths, 7)
        sol = solve_system_p_picard(paths, utility, 0.0, cfg)
        surf = marginal_surface(paths, utility, sol.policy, XGrid.default(0.2, 2.5, 1.0),
                                t_stride=5, n_paths=5000)
        oracle = ExponentialBachelier(mu=mu, h=h)
        fields = {"surface Y": (field_from_surface(surf, "Y", utility), "Y"),
                  "surface P": (field_from_surface(surf, "P", utility), "P"),
                  "closed-form Y": (AnalyticField(lambda t, x, s: oracle.y(t) + 0 * x,
                                                  paths.t), "Y")}
        for label, (field, which) in fields.items():
            r = decoupling_restart_test(field, args.s, args.x, paths, utility, cfg, which)
            print(f"mu={mu} h={h} {label:14s} rms={r.rms_discrepancy:.3e} "
                  f"scale={r.rms_scale:.3e} relative={r.relative:.3e}")


if __name__ == "__main__":
    main()
