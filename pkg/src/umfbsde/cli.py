"""Batch runner: ``umfbsde <command> --config <path> [--out DIR] [--seed S] [--paths N] [--steps N]``.

Exit codes: 0 pass, 1 identity failure, 2 configuration error, 3 solver
non-convergence.  Every run writes ``effective.cfg`` (the configuration with all
defaults resolved) and ``status.json`` into the output directory, including runs
that fail part way.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .bridge import identity_report
from .errors import ConfigurationError, DomainError, NumericalError
from .fbsde import (myopic_strategy, residual_check_fbsde, solution_to_csv,
                    solve_system_p_picard, solve_system_y, y_solution_from_p)
from .market import simulate_paths
from .oracles import ExponentialBachelier
from .policy import ConstantPolicy
from .surface import (XGrid, bspde_derivative_residual, bspde_residual,
                      estimate_value_surface, marginal_surface, surface_to_csv,
                      terminal_mismatch)
from .utility import ExponentialUtility

COMMANDS = ("simulate", "solve-p", "solve-y", "surface", "verify", "convergence")
EXIT_PASS, EXIT_IDENTITY, EXIT_CONFIG, EXIT_NONCONVERGENCE = 0, 1, 2, 3
STATUS = {0: "pass", 1: "identity_failure", 2: "config_error", 3: "non_convergence"}
EXPORT_PATHS = 1000     # per-path CSV exports keep the first paths only
LADDER_COLUMNS = ("level", "Y0_error", "pi_error", "bspde_residual_rms", "runtime_seconds")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _simulate(cfg, paths=None, steps=None, seed=None):
    grid = cfg.time_grid()
    if steps is not None:
        grid = replace(grid, n_steps=int(steps))
    return simulate_paths(cfg.market_spec(), grid, cfg.endowment_spec(),
                          cfg.grid.paths if paths is None else int(paths),
                          cfg.seed if seed is None else int(seed))


def _xgrid(cfg, utility, n_points=None) -> XGrid:
    s = cfg.surface
    n = s.x_points if n_points is None else int(n_points)
    if s.half_width > 0:
        return XGrid(cfg.grid.x0, s.half_width, n)
    pi_ref = myopic_strategy(cfg.grid.x0, cfg.market_spec(), utility)
    return XGrid.default(cfg.market.sigma, pi_ref, cfg.grid.horizon, cfg.grid.x0, n)


def _history(sol) -> dict:
    return {"converged": bool(sol.converged), "iterations": int(sol.iterations),
            "history": [float(h) for h in sol.history]}


# ------------------------------------------------------------------ commands

def cmd_simulate(cfg, out: Path) -> int:
    paths = _simulate(cfg)
    paths.to_csv(out / "paths.csv", max_paths=EXPORT_PATHS)
    _write_json(out / "summary.json", {
        "n_paths": paths.n_paths, "n_steps": paths.grid.n_steps,
        "mean_H": float(paths.H.mean()), "mean_S_T": float(paths.S[-1].mean()),
    })
    return EXIT_PASS


def cmd_solve_p(cfg, out: Path) -> int:
    utility = cfg.utility_spec()
    paths = _simulate(cfg)
    sol = solve_system_p_picard(paths, utility, cfg.grid.x0, cfg.picard_config())
    solution_to_csv(sol, out / "solution_p.csv", max_paths=EXPORT_PATHS)
    _write_json(out / "history.json", _history(sol))
    res = residual_check_fbsde(sol, "P", paths.market, utility)
    _write_json(out / "summary.json", {
        "P0": float(sol.P[0].mean()), "pi0": float(sol.pi[0].mean()),
        "terminal_rms": sol.terminal_rms, "residual_rms": res.cumulative_rms,
    })
    return EXIT_PASS if sol.converged else EXIT_NONCONVERGENCE


def cmd_solve_y(cfg, out: Path) -> int:
    utility = cfg.utility_spec()
    paths = _simulate(cfg)
    sol = solve_system_y(paths, utility, cfg.grid.x0, cfg.picard_config(), mode="direct")
    solution_to_csv(sol, out / "solution_y.csv", max_paths=EXPORT_PATHS)
    _write_json(out / "history.json", _history(sol))
    res = residual_check_fbsde(sol, "Y", paths.market, utility)
    y0 = sol.Y[0]
    _write_json(out / "summary.json", {
        "Y0": float(y0.mean()), "Y0_cross_path_std": float(y0.std()),
        "pi0": float(sol.pi[0].mean()), "terminal_rms": sol.terminal_rms,
        "residual_rms": res.cumulative_rms,
    })
    return EXIT_PASS if sol.converged else EXIT_NONCONVERGENCE


def cmd_surface(cfg, out: Path) -> int:
    utility = cfg.utility_spec()
    paths = _simulate(cfg)
    market = paths.market
    sol = solve_system_p_picard(paths, utility, cfg.grid.x0, cfg.picard_config())
    s = cfg.surface
    xg = _xgrid(cfg, utility)
    surf = estimate_value_surface(paths, utility, sol.policy, xg, t_stride=s.t_stride,
                                  n_paths=min(s.paths, paths.n_paths), smooth=s.smooth,
                                  basis=cfg.basis())
    surface_to_csv(surf, out / "surface.csv", market)
    j = int(np.argmin(np.abs(xg.points - cfg.grid.x0)))
    _write_json(out / "summary.json", {
        "V0_x0": float(surf.mean_slice()[0, j]), "V0_x0_stderr": float(surf.stderr[0, j]),
        "bspde_residual_rms": bspde_residual(surf, market).rms,
        "bspde_derivative_residual_rms": bspde_derivative_residual(surf, market).rms,
        "terminal_mismatch": {str(d): float(v) for d, v in terminal_mismatch(surf).items()},
        "picard_converged": bool(sol.converged),
    })
    return EXIT_PASS if sol.converged else EXIT_NONCONVERGENCE


def cmd_verify(cfg, out: Path) -> int:
    utility = cfg.utility_spec()
    paths = _simulate(cfg)
    market = paths.market
    sol_p = solve_system_p_picard(paths, utility, cfg.grid.x0, cfg.picard_config())
    _write_json(out / "history.json", _history(sol_p))
    sol_y = y_solution_from_p(sol_p, utility)
    s = cfg.surface
    surf = marginal_surface(paths, utility, sol_p.policy, _xgrid(cfg, utility),
                            t_stride=s.t_stride, n_paths=min(s.paths, paths.n_paths),
                            basis=cfg.basis())
    report = identity_report(sol_y, sol_p, surf, market, utility, cfg.tolerance,
                             n_eval=s.eval_paths)
    report.to_json(out / "report.json")
    (out / "report.txt").write_text(report.to_table() + "\n")
    print(report.to_table())
    if not sol_p.converged:
        return EXIT_NONCONVERGENCE
    return EXIT_PASS if report.passed else EXIT_IDENTITY


# ----------------------------------------------------------- convergence ladder

@dataclass(frozen=True)
class LadderRow:
    level: int
    Y0_error: float
    pi_error: float
    bspde_residual_rms: float
    runtime_seconds: float
    # not in the CSV: first-replication diagnostics
    bspde_derivative_residual_rms: float = float("nan")
    v0: float = float("nan")
    v0_stderr: float = float("nan")

    def errors(self) -> tuple:
        return (self.Y0_error, self.pi_error, self.bspde_residual_rms)


def _oracle(cfg) -> ExponentialBachelier:
    utility = cfg.utility_spec()
    if not isinstance(utility, ExponentialUtility) or cfg.endowment.kind != "constant":
        raise ConfigurationError("convergence ladder needs exponential utility and a "
                                 "constant endowment (closed-form oracle)")
    return ExponentialBachelier(utility.gamma, cfg.market.mu, cfg.market.sigma,
                                cfg.endowment.level, cfg.grid.horizon)


def ladder_level(cfg, level: int) -> LadderRow:
    """Level ``level``: steps, x-intervals and paths scaled by 2^l, 2^l and 4^l.

    Errors are root mean squares over ``convergence.replications`` seeds
    ``seed, seed + 1, ...``: Y0 against the oracle, pi (absolute, over paths and
    steps) against the oracle, and the BSPDE residual RMS of the value surface.
    The surface is estimated under the oracle strategy so that its column isolates
    the surface discretisation from the solver error.
    """
    oracle = _oracle(cfg)
    utility = cfg.utility_spec()
    c = cfg.convergence
    steps = c.base_steps * 2**level
    n_x = (c.base_x_points - 1) * 2**level + 1
    n_paths = c.base_paths * 4**level
    xg = _xgrid(cfg, utility, n_x)
    t0 = time.perf_counter()
    policy = ConstantPolicy(oracle.pi)
    j = int(np.argmin(np.abs(xg.points - cfg.grid.x0)))
    y_err, pi_err, res, extra = [], [], [], {}
    for r in range(c.replications):
        paths = _simulate(cfg, paths=n_paths, steps=steps, seed=cfg.seed + r)
        sol = solve_system_p_picard(paths, utility, cfg.grid.x0, cfg.picard_config())
        if not sol.converged:
            raise NumericalError(f"Picard did not converge at ladder level {level}",
                                 last_iterate=sol)
        y0 = y_solution_from_p(sol, utility).Y[0].mean()
        y_err.append(y0 - oracle.y0)
        pi_err.append(np.sqrt(np.mean((sol.pi - oracle.pi)**2)))
        surf = estimate_value_surface(paths, utility, policy, xg, t_stride=1,
                                      basis=cfg.basis())
        res.append(bspde_residual(surf, paths.market).rms)
        if r == 0:
            extra = {"bspde_derivative_residual_rms":
                     bspde_derivative_residual(surf, paths.market).rms,
                     "v0": float(surf.mean_slice()[0, j]), "v0_stderr": float(surf.stderr[0, j])}
    rms = lambda v: float(np.sqrt(np.mean(np.square(v))))
    return LadderRow(level, rms(y_err), rms(pi_err), rms(res), time.perf_counter() - t0,
                     **extra)


def convergence_ladder(cfg) -> list:
    return [ladder_level(cfg, level) for level in range(cfg.convergence.levels)]


LADDER_BAND = 0.2


def ladder_monotone(rows, band: float = LADDER_BAND) -> bool:
    """Every error column non-increasing across levels within the noise band."""
    for a, b in zip(rows, rows[1:]):
        if any(eb > (1 + band) * ea for ea, eb in zip(a.errors(), b.errors())):
            return False
    return True


def write_ladder(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LADDER_COLUMNS)
        for row in rows:
            w.writerow([row.level] + [f"{v:.17g}" for v in (*row.errors(), row.runtime_seconds)])


def cmd_convergence(cfg, out: Path) -> int:
    _oracle(cfg)
    rows = []
    try:
        for level in range(cfg.convergence.levels):
            rows.append(ladder_level(cfg, level))
    finally:
        write_ladder(rows, out / "convergence_ladder.csv")
    for row in rows:
        print(f"level {row.level}: Y0_error={row.Y0_error:.3e} pi_error={row.pi_error:.3e} "
              f"bspde_residual_rms={row.bspde_residual_rms:.3e} ({row.runtime_seconds:.1f}s)")
    return EXIT_PASS if ladder_monotone(rows) else EXIT_IDENTITY


HANDLERS = {"simulate": cmd_simulate, "solve-p": cmd_solve_p, "solve-y": cmd_solve_y,
            "surface": cmd_surface, "verify": cmd_verify, "convergence": cmd_convergence}


# ---------------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="umfbsde", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="flat section.key = value file")
    p.add_argument("--out", help="output directory (overrides the output key)")
    p.add_argument("--seed", type=int, help="overrides seed")
    p.add_argument("--paths", type=int, help="overrides grid.paths")
    p.add_argument("--steps", type=int, help="overrides grid.steps")
    return p


def run(command: str, config_path, out=None, seed=None, paths=None, steps=None) -> int:
    """Run ``command`` and return its exit code; artifacts go to the output directory."""
    out_dir = Path(out) if out is not None else None
    try:
        if command not in HANDLERS:
            raise ConfigurationError(f"unknown command {command!r}")
        if seed is not None and not 0 <= seed < 2**64:
            raise ConfigurationError("--seed must be an unsigned 64-bit integer")
        cfg = cfgmod.with_overrides(cfgmod.load_config(config_path), seed=seed, paths=paths,
                                    steps=steps, output=out)
        out_dir = Path(cfg.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "effective.cfg").write_text(cfgmod.echo(cfg))
        cfgmod.validate(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return _finish(out_dir, command, EXIT_CONFIG, str(exc))
    try:
        code = HANDLERS[command](cfg, out_dir)
        note = ""
    except ConfigurationError as exc:
        code, note = EXIT_CONFIG, str(exc)
    except (NumericalError, DomainError) as exc:
        code, note = EXIT_NONCONVERGENCE, str(exc)
    if note:
        print(f"{STATUS[code]}: {note}", file=sys.stderr)
    elif code != EXIT_PASS:
        print(f"{command}: {STATUS[code]} (see {out_dir})", file=sys.stderr)
    return _finish(out_dir, command, code, note)


def _finish(out_dir, command, code, note) -> int:
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            _write_json(out_dir / "status.json", {
                "command": command, "exit_code": code, "status": STATUS[code],
                "partial": code != EXIT_PASS, "note": note,
            })
        except OSError as exc:
            print(f"cannot write status: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.out, args.seed, args.paths, args.steps)


if __name__ == "__main__":
    sys.exit(main())
