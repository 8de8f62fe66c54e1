"""Generators, solvers and checks for the two forward-backward systems.

System Y:  (Y, Z, N, X) with Y_T = H and U'(X + Y) a martingale.
System P:  (P, psi, L, X) with P_T = U'(X_T + H) - U'(X_T) and P + U'(X) a martingale.

System P is solved by damped Picard iteration on the strategy:
policy -> forward wealth -> (P, psi) by regression -> strategy_from_p -> policy.
System Y is obtained from it through the map Y = -Ũ'(P + U'(X)) - X, or solved
directly by a backward regression scheme on its own generator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .market import EndowmentSpec, MarketSpec, PathEnsemble
from .policy import ConstantPolicy, forward_wealth, project_policy, step_states
from .regression import BasisSpec, integrand_step
from .utility import Utility


@dataclass(frozen=True)
class PicardConfig:
    max_iterations: int = 30
    damping: float = 0.5
    tolerance: float = 1e-3
    basis: BasisSpec = field(default_factory=BasisSpec)

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ConfigurationError("picard damping must lie in (0, 1]")
        if not self.tolerance > 0:
            raise ConfigurationError("picard tolerance must be > 0")
        if self.max_iterations < 1:
            raise ConfigurationError("picard max_iterations must be >= 1")


def state_variables(paths: PathEnsemble) -> tuple:
    """Markov state for conditional expectations and strategies.

    H(W_t), the endowment at the current Brownian state, comes first so that
    polynomials in it carry the non-polynomial terminal shape; the driver and
    wealth then enter through their residuals on it (see ``Features``).
    """
    out = []
    if paths.endowment.kind == "traded":
        out = ["H", "W1"]
    elif paths.endowment.kind == "orthogonal":
        out = ["H", "W2"]
    return tuple(out + ["X"])


# ---------------------------------------------------------------- generators

def generator_y(x, y, z, n_rate, market: MarketSpec, utility: Utility):
    """Drift rate of Y per unit time."""
    _, u1, u2, u3 = utility.derivatives(np.asarray(x) + np.asarray(y))
    lam, c = market.lam, market.covariance_rate
    return (lam * u1 / u2 - 0.5 * lam * u3 * u1**2 / u2**3 + z) * c * lam \
        - 0.5 * (u3 / u2) * n_rate


def generator_p(x, p, psi, market: MarketSpec, utility: Utility):
    """Drift rate of P per unit time; it has no orthogonal-bracket term."""
    _, u1, u2, u3 = utility.derivatives(x)
    lam, c = market.lam, market.covariance_rate
    q = lam * p + lam * u1 + psi
    return (lam - 0.5 * u3 * q / u2**2) * c * q


def strategy_from_y(x, y, z, market: MarketSpec, utility: Utility):
    _, u1, u2, _ = utility.derivatives(np.asarray(x) + np.asarray(y))
    return -(market.lam * u1 / u2 + z)


def strategy_from_p(x, p, psi, market: MarketSpec, utility: Utility):
    _, u1, u2, _ = utility.derivatives(x)
    return -(market.lam * p + market.lam * u1 + psi) / u2


def myopic_strategy(x: float, market: MarketSpec, utility: Utility) -> float:
    _, u1, u2, _ = utility.derivatives(x)
    return float(-market.lam * u1 / u2)


# ----------------------------------------------------------------- solutions

@dataclass(eq=False)
class FbsdeSolutionP:
    X: np.ndarray
    P: np.ndarray
    psi: np.ndarray
    l_perp: np.ndarray
    pi: np.ndarray
    E: np.ndarray            # E(U'(X_T + H) | F_t) = P + U'(X)
    psi_E: np.ndarray        # its M-integrand
    paths: PathEnsemble
    policy: object
    start: int = 0
    x0: float = 0.0
    converged: bool = True
    iterations: int = 0
    history: list = field(default_factory=list)
    utility: Utility | None = None

    @property
    def terminal_mismatch(self) -> np.ndarray:
        xT = self.X[-1]
        return self.P[-1] - (self.utility.du(xT + self.paths.H) - self.utility.du(xT))

    @property
    def terminal_rms(self) -> float:
        return float(np.sqrt(np.mean(self.terminal_mismatch**2)))


@dataclass(eq=False)
class FbsdeSolutionY:
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    n_perp: np.ndarray
    pi: np.ndarray
    paths: PathEnsemble
    policy: object
    start: int = 0
    x0: float = 0.0
    mode: str = "via_p"
    converged: bool = True
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def terminal_mismatch(self) -> np.ndarray:
        return self.Y[-1] - self.paths.H

    @property
    def terminal_rms(self) -> float:
        return float(np.sqrt(np.mean(self.terminal_mismatch**2)))


# ------------------------------------------------------------- system P

def construct_p_from_policy(policy, paths: PathEnsemble, utility: Utility,
                            basis: BasisSpec, x0: float = 0.0, start: int = 0,
                            endowment: EndowmentSpec | None = None) -> FbsdeSolutionP:
    """P_t = E(U'(X_T + H) | F_t) - U'(X_t) along the wealth generated by ``policy``.

    E = P + U'(X) is computed backward with one joint regression per step of
    E_{k+1}/U'(X_k) on ``[B, B dM, B dW2]``: the B-block is E_k/U'(X_k) and the
    driver blocks are the integrands psi_E, l_perp divided by U'(X_k).  The ratio
    is a much smoother function of the state than E itself, and the recursion
    keeps the estimate consistent with the tower property step by step.
    """
    if endowment is not None and endowment != paths.endowment:
        raise ConfigurationError("endowment differs from the one the ensemble was simulated with")
    basis = basis.with_variables(state_variables(paths))
    X, pi, states = forward_wealth(policy, paths, x0, start)
    K, n = pi.shape
    _, U1, U2, _ = utility.derivatives(X)
    E = np.empty_like(X)
    E[-1] = utility.du(X[-1] + paths.H)
    psi_E = np.empty((K, n))
    l_perp = np.zeros((K, n))
    dM, dW2 = paths.dM, paths.dW2
    for k in range(K - 1, -1, -1):
        j = start + k
        fit, _ = integrand_step(E[k + 1] / U1[k], dM[j], None if dW2 is None else dW2[j],
                                states[k], basis)
        mean, z, q = fit.evaluate(states[k], n)
        E[k] = U1[k] * mean
        psi_E[k] = U1[k] * z
        if q is not None:
            l_perp[k] = U1[k] * q
    P = E - U1
    psi = psi_E - U2[:-1] * pi
    return FbsdeSolutionP(X, P, psi, l_perp, pi, E, psi_E, paths, policy, start, x0,
                          utility=utility)


def policy_change(new, old) -> float:
    """Largest per-step RMS (over paths) of a strategy update.

    A sup over single paths would be driven by polynomial extrapolation at a
    handful of extreme states and never settle below the regression noise.
    """
    d = np.asarray(new) - np.asarray(old)
    return float(np.sqrt(np.mean(d**2, axis=1)).max())


def solve_system_p_picard(paths: PathEnsemble, utility: Utility, x: float,
                          config: PicardConfig, start: int = 0,
                          policy0=None) -> FbsdeSolutionP:
    """Damped Picard iteration on the strategy for system P.

    Starts from the myopic strategy -lambda U'(x)/U''(x) frozen at ``x`` unless
    ``policy0`` is given.  Returns the last iterate; ``converged`` is False if the
    strategy change never fell below the tolerance.
    """
    market = paths.market
    basis = config.basis.with_variables(state_variables(paths))
    policy = policy0 if policy0 is not None else ConstantPolicy(myopic_strategy(x, market, utility))
    history = []
    sol = None
    for it in range(1, config.max_iterations + 1):
        sol = construct_p_from_policy(policy, paths, utility, basis, x, start)
        K = sol.pi.shape[0]
        Xk = sol.X[:-1]
        target = (1 - config.damping) * sol.pi \
            + config.damping * strategy_from_p(Xk, sol.P[:-1], sol.psi, market, utility)
        states = [step_states(paths, start + k, Xk[k]) for k in range(K)]
        new_policy = project_policy(target, states, basis, start)
        new_vals = np.stack([new_policy(start + k, states[k]) for k in range(K)])
        change = policy_change(new_vals, sol.pi)
        history.append(change)
        sol.iterations = it
        sol.history = list(history)
        if change <= config.tolerance:
            sol.converged = True
            return sol
        policy = new_policy
    sol.converged = False
    return sol


# ------------------------------------------------------------- system Y

def y_solution_from_p(sol: FbsdeSolutionP, utility: Utility) -> FbsdeSolutionY:
    """Map (P, psi, L, X) to (Y, Z, N, X).

    Y = -Ũ'(E) - X with E = P + U'(X); Z and n_perp are the M- and W2-integrands
    of Y by Itô's formula: Z = -Ũ''(E) psi_E - pi, n_perp = -Ũ''(E) l_perp.
    """
    E = sol.E
    Y = -utility.dconj(E) - sol.X
    # at T the map is the terminal condition; impose it instead of its roundoff
    Y[-1] = sol.paths.H
    c2 = utility.d2conj(E[:-1])
    Z = -c2 * sol.psi_E - sol.pi
    n_perp = -c2 * sol.l_perp
    return FbsdeSolutionY(sol.X, Y, Z, n_perp, sol.pi, sol.paths, sol.policy, sol.start,
                          sol.x0, "via_p", sol.converged, sol.iterations, list(sol.history))


def backward_y(policy, paths: PathEnsemble, utility: Utility, basis: BasisSpec,
               x0: float, start: int = 0):
    """One backward regression sweep for Y under a fixed policy.

    Y_k = E_k[Y_{k+1}] - f(X_k, E_k[Y_{k+1}], Z_k, n_k^2) dt with Z_k, n_k the
    integrands of Y_{k+1} from the joint regression.
    """
    market = paths.market
    X, pi, states = forward_wealth(policy, paths, x0, start)
    K, n = pi.shape
    Y = np.empty_like(X)
    Z = np.empty((K, n))
    N = np.zeros((K, n))
    Y[-1] = paths.H
    dt = paths.grid.dt
    dM, dW2 = paths.dM, paths.dW2
    for k in range(K - 1, -1, -1):
        j = start + k
        fit, _ = integrand_step(Y[k + 1], dM[j], None if dW2 is None else dW2[j],
                                states[k], basis)
        mean, z, q = fit.evaluate(states[k], n)
        Z[k] = z
        if q is not None:
            N[k] = q
        Y[k] = mean - generator_y(X[k], mean, z, N[k]**2, market, utility) * dt
    return X, Y, Z, N, pi, states


def solve_system_y(paths: PathEnsemble, utility: Utility, x: float, config: PicardConfig,
                   mode: str = "via_p", start: int = 0, policy0=None,
                   p_solution: FbsdeSolutionP | None = None) -> FbsdeSolutionY:
    """Solve system Y either through system P (default) or directly."""
    if mode == "via_p":
        if p_solution is None:
            p_solution = solve_system_p_picard(paths, utility, x, config, start, policy0)
        return y_solution_from_p(p_solution, utility)
    if mode != "direct":
        raise ConfigurationError(f"unknown solve mode {mode!r}")
    market = paths.market
    basis = config.basis.with_variables(state_variables(paths))
    policy = policy0 if policy0 is not None else ConstantPolicy(myopic_strategy(x, market, utility))
    history = []
    for it in range(1, config.max_iterations + 1):
        X, Y, Z, N, pi, states = backward_y(policy, paths, utility, basis, x, start)
        target = (1 - config.damping) * pi \
            + config.damping * strategy_from_y(X[:-1], Y[:-1], Z, market, utility)
        new_policy = project_policy(target, states, basis, start)
        new_vals = np.stack([new_policy(start + k, states[k]) for k in range(pi.shape[0])])
        change = policy_change(new_vals, pi)
        history.append(change)
        if change <= config.tolerance:
            return FbsdeSolutionY(X, Y, Z, N, pi, paths, policy, start, x, "direct",
                                  True, it, history)
        policy = new_policy
    return FbsdeSolutionY(X, Y, Z, N, pi, paths, policy, start, x, "direct",
                          False, config.max_iterations, history)


# ------------------------------------------------------------- checks

@dataclass(frozen=True)
class ResidualStats:
    per_step_rms: np.ndarray
    cumulative_rms: float   # sqrt(E sum_k r_k^2): the L2 size of the discrete residual process
    terminal_rms: float


def residual_check_fbsde(solution, which: str, market: MarketSpec, utility: Utility,
                         integrand_override=None) -> ResidualStats:
    """Per-step residual of the backward equation.

    Y: dY - f_Y dt - Z dM - n dW2;  P: dP - f_P dt - psi dM - l dW2.
    ``integrand_override`` replaces Z (resp. psi), e.g. to test sensitivity.
    """
    paths = solution.paths
    s = solution.start
    dt = paths.grid.dt
    dM = paths.dM[s:]
    dW2 = None if paths.dW2 is None else paths.dW2[s:]
    X = solution.X[:-1]
    if which == "Y":
        B, zm, zp = solution.Y, solution.Z, solution.n_perp
        z = zm if integrand_override is None else integrand_override
        gen = generator_y(X, B[:-1], z, zp**2, market, utility)
        term = solution.Y[-1] - paths.H
    elif which == "P":
        B, zm, zp = solution.P, solution.psi, solution.l_perp
        z = zm if integrand_override is None else integrand_override
        gen = generator_p(X, B[:-1], z, market, utility)
        xT = solution.X[-1]
        term = B[-1] - (utility.du(xT + paths.H) - utility.du(xT))
    else:
        raise ConfigurationError("which must be 'Y' or 'P'")
    r = np.diff(B, axis=0) - gen * dt - z * dM
    if dW2 is not None:
        r = r - zp * dW2
    return ResidualStats(np.sqrt(np.mean(r**2, axis=1)),
                         float(np.sqrt(np.mean(np.sum(r**2, axis=0)))),
                         float(np.sqrt(np.mean(term**2))))


@dataclass(frozen=True)
class RestartReport:
    rms_discrepancy: float
    rms_scale: float
    relative: float
    terminal_rms: float     # discrepancy at the last field time
    converged: bool
    per_time: np.ndarray


def decoupling_restart_test(field, s: int, x: float, paths: PathEnsemble, utility: Utility,
                            config: PicardConfig, which: str = "Y",
                            policy0=None) -> RestartReport:
    """Restart the FBSDE at (t_s, x) with backward value u(s, x) and track u(t, X_t).

    The system is re-solved on [t_s, T] from wealth ``x``; the backward component
    is then integrated forward from the field value at (s, x) with the solved
    integrands, and compared with the field along the restarted wealth.
    """
    market = paths.market
    dt = paths.grid.dt
    psol = solve_system_p_picard(paths, utility, x, config, start=s, policy0=policy0)
    X = psol.X
    K = X.shape[0] - 1
    dM = paths.dM[s:]
    dW2 = None if paths.dW2 is None else paths.dW2[s:]
    if which == "Y":
        sol = y_solution_from_p(psol, utility)
        z, zp = sol.Z, sol.n_perp
    elif which == "P":
        z, zp = psol.psi, psol.l_perp
    else:
        raise ConfigurationError("which must be 'Y' or 'P'")
    B = np.empty_like(X)
    B[0] = field(s, X[0], step_states(paths, s, X[0]))
    for k in range(K):
        if which == "Y":
            gen = generator_y(X[k], B[k], z[k], zp[k]**2, market, utility)
        else:
            gen = generator_p(X[k], B[k], z[k], market, utility)
        B[k + 1] = B[k] + gen * dt + z[k] * dM[k]
        if dW2 is not None:
            B[k + 1] += zp[k] * dW2[k]
    diffs, scales, per_time = [], [], []
    for k in range(K + 1):
        j = s + k
        if not field.defined_at(j):
            continue
        d = B[k] - field(j, X[k], step_states(paths, j, X[k]))
        diffs.append(d)
        scales.append(B[k])
        per_time.append(float(np.sqrt(np.mean(d**2))))
    rms = float(np.sqrt(np.mean(np.concatenate(diffs)**2)))
    scale = float(np.sqrt(np.mean(np.concatenate(scales)**2)))
    return RestartReport(rms, scale, rms / scale if scale > 0 else 0.0,
                         per_time[-1] if per_time else float("nan"), psol.converged,
                         np.array(per_time))


# ------------------------------------------------------------- export

def solution_to_csv(solution, path, max_paths: int | None = None) -> None:
    """One row per (path, step): X, the backward value, its integrands and pi.

    Integrand and strategy columns are NaN on the last step.
    """
    if isinstance(solution, FbsdeSolutionY):
        cols = {"Y": solution.Y, "Z": solution.Z, "N_perp": solution.n_perp}
    else:
        cols = {"P": solution.P, "psi": solution.psi, "L_perp": solution.l_perp}
    cols["pi"] = solution.pi
    m, n = solution.X.shape
    n = n if max_paths is None else min(n, int(max_paths))
    t = solution.paths.t[solution.start:]
    pad = np.full((1, n), np.nan)
    data = {"path": np.repeat(np.arange(n), m), "step": np.tile(np.arange(m) + solution.start, n),
            "t": np.tile(t, n), "X": solution.X[:, :n].T.ravel()}
    for name, v in cols.items():
        v = v[:, :n]
        if v.shape[0] == m - 1:
            v = np.vstack([v, pad])
        data[name] = v.T.ravel()
    table = np.column_stack([np.asarray(c, dtype=float) for c in data.values()])
    np.savetxt(path, table, delimiter=",", header=",".join(data), comments="", fmt="%.17g")
