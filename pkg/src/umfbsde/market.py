"""Brownian desk-scale markets, path ensembles and density processes.

The traded asset is S = M + int lambda d<M> with M = sigma W1 (Bachelier
dynamics, S_0 = 0).  An optional second Brownian factor W2 never enters S and
only drives the endowment, which is what produces non-trivial orthogonal
martingale parts.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DomainError
from .utility import Utility

BLOCK = 256  # paths per random substream


@dataclass(frozen=True)
class TimeGrid:
    horizon: float = 1.0
    n_steps: int = 100

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigurationError(f"horizon must be > 0, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def points(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.horizon
        return t


@dataclass(frozen=True)
class MarketSpec:
    """Drift ``mu`` and volatility ``sigma`` of S; ``orthogonal_factor`` switches W2 on."""

    mu: float = 0.1
    sigma: float = 0.2
    orthogonal_factor: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be > 0, got {self.sigma}")

    @property
    def lam(self) -> float:
        """Market price density lambda = mu / sigma^2."""
        return self.mu / self.sigma**2

    @property
    def covariance_rate(self) -> float:
        """d<M>/dt, the constant Radon-Nikodym density of <M> w.r.t. the clock K = t."""
        return self.sigma**2

    @property
    def sharpe(self) -> float:
        return self.mu / self.sigma


ENDOWMENT_KINDS = ("constant", "traded", "orthogonal")


@dataclass(frozen=True)
class EndowmentSpec:
    """H = level (constant), level*tanh(W1_T) (traded) or level*tanh(W2_T) (orthogonal)."""

    kind: str = "constant"
    level: float = 0.0

    def __post_init__(self):
        if self.kind not in ENDOWMENT_KINDS:
            raise ConfigurationError(f"endowment kind must be one of {ENDOWMENT_KINDS}")

    @property
    def bound(self) -> float:
        return abs(self.level)

    @property
    def deterministic(self) -> bool:
        return self.kind == "constant"

    def evaluate(self, w1_T, w2_T=None):
        w1_T = np.asarray(w1_T, dtype=float)
        if self.kind == "constant":
            return np.full(w1_T.shape, float(self.level))
        if self.kind == "traded":
            return self.level * np.tanh(w1_T)
        if w2_T is None:
            raise ConfigurationError("orthogonal endowment needs the second factor switched on")
        return self.level * np.tanh(w2_T)


def _block_normals(seed: int, block: int, n_steps: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(block,))
    gen = np.random.Generator(np.random.Philox(ss))
    return gen.standard_normal((BLOCK, n_steps, 2))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Simulated Brownian factors on a grid plus the endowment per path.

    Arrays are time-major: ``W1[k]`` holds all paths at grid index ``k``.  Only
    W1, W2 and H are stored; M, S and the increments are derived on access.
    """

    market: MarketSpec
    grid: TimeGrid
    endowment: EndowmentSpec
    n_paths: int
    seed: int
    W1: np.ndarray
    W2: np.ndarray | None
    H: np.ndarray
    start: int = 0  # index of the first path inside the parent ensemble
    meta: dict = field(default_factory=dict)

    @property
    def t(self) -> np.ndarray:
        return self.grid.points

    @property
    def M(self) -> np.ndarray:
        return self.market.sigma * self.W1

    @property
    def quadratic_variation(self) -> np.ndarray:
        return self.market.covariance_rate * self.t

    @property
    def S(self) -> np.ndarray:
        return self.M + self.market.lam * self.quadratic_variation[:, None]

    @cached_property
    def dW1(self) -> np.ndarray:
        return np.diff(self.W1, axis=0)

    @cached_property
    def dW2(self) -> np.ndarray | None:
        return None if self.W2 is None else np.diff(self.W2, axis=0)

    @property
    def dM(self) -> np.ndarray:
        return self.market.sigma * self.dW1

    @property
    def dQV(self) -> np.ndarray:
        """Deterministic increments of <M>, one per step."""
        return np.diff(self.quadratic_variation)

    @property
    def dS(self) -> np.ndarray:
        return self.dM + self.market.lam * self.dQV[:, None]

    def states(self, k: int) -> dict:
        """Brownian state at grid index ``k`` plus H evaluated there (regression inputs)."""
        w2 = None if self.W2 is None else self.W2[k]
        out = {"W1": self.W1[k], "H": self.endowment.evaluate(self.W1[k], w2)}
        if w2 is not None:
            out["W2"] = w2
        return out

    def subset(self, n: int) -> "PathEnsemble":
        """The first ``n`` paths; identical to simulating ``n`` paths with the same seed."""
        if not 1 <= n <= self.n_paths:
            raise ConfigurationError(f"subset size {n} outside [1, {self.n_paths}]")
        return PathEnsemble(self.market, self.grid, self.endowment, n, self.seed,
                            self.W1[:, :n], None if self.W2 is None else self.W2[:, :n],
                            self.H[:n], self.start, dict(self.meta))

    def to_csv(self, path, max_paths: int | None = None) -> None:
        """One row per (path, step), for the first ``max_paths`` paths."""
        if max_paths is not None and max_paths < self.n_paths:
            return self.subset(max_paths).to_csv(path)
        m, n = self.W1.shape
        cols = {
            "path": np.repeat(np.arange(n), m),
            "step": np.tile(np.arange(m), n),
            "t": np.tile(self.t, n),
            "W1": self.W1.T.ravel(),
            "W2": (self.W2 if self.W2 is not None else np.zeros_like(self.W1)).T.ravel(),
            "M": self.M.T.ravel(),
            "S": self.S.T.ravel(),
            "H": np.repeat(self.H, m),
        }
        header = ",".join(cols)
        data = np.column_stack([np.asarray(c, dtype=float) for c in cols.values()])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def simulate_paths(market: MarketSpec, grid: TimeGrid, endowment: EndowmentSpec,
                   n_paths: int, seed: int, n_workers: int = 1) -> PathEnsemble:
    """Euler-Maruyama (exact for Brownian motion) simulation of the factors.

    Path ``i`` draws from the substream of block ``i // 256`` keyed by ``seed``, so
    the result does not depend on ``n_workers`` or on ``n_paths``.
    """
    if int(n_paths) != n_paths or n_paths < 1:
        raise ConfigurationError(f"n_paths must be a positive integer, got {n_paths}")
    if endowment.kind == "orthogonal" and not market.orthogonal_factor:
        raise ConfigurationError("orthogonal endowment requires market.orthogonal_factor = true")
    n_blocks = -(-n_paths // BLOCK)
    args = [(int(seed), b, grid.n_steps) for b in range(n_blocks)]
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            blocks = list(pool.map(lambda a: _block_normals(*a), args))
    else:
        blocks = [_block_normals(*a) for a in args]
    z = np.concatenate(blocks, axis=0)[:n_paths]
    sq = np.sqrt(grid.dt)
    W1 = np.zeros((grid.n_steps + 1, n_paths))
    W1[1:] = np.cumsum(z[:, :, 0].T * sq, axis=0)
    W2 = None
    if market.orthogonal_factor:
        W2 = np.zeros_like(W1)
        W2[1:] = np.cumsum(z[:, :, 1].T * sq, axis=0)
    H = endowment.evaluate(W1[-1], None if W2 is None else W2[-1])
    return PathEnsemble(market, grid, endowment, int(n_paths), int(seed), W1, W2, H)


@dataclass(frozen=True, eq=False)
class DensityProcess:
    """rho = E(-lambda . M + nu . W2), time-major like the ensemble."""

    rho: np.ndarray
    integrand: float
    orthogonal_integrand: float = 0.0

    @property
    def terminal(self) -> np.ndarray:
        return self.rho[-1]


def density_process(paths: PathEnsemble, market: MarketSpec | None = None,
                    orthogonal_integrand: float = 0.0) -> DensityProcess:
    market = market or paths.market
    lam = market.lam
    log_rho = -lam * paths.M - 0.5 * lam**2 * paths.quadratic_variation[:, None]
    if orthogonal_integrand:
        if paths.W2 is None:
            raise ConfigurationError("orthogonal integrand needs the second factor")
        nu = orthogonal_integrand
        log_rho = log_rho + nu * paths.W2 - 0.5 * nu**2 * paths.t[:, None]
    return DensityProcess(np.exp(log_rho), -lam, orthogonal_integrand)


@dataclass(frozen=True)
class DualEstimate:
    value: float
    stderr: float
    n_flagged: int
    label: str = "E[U~(y rho_T) + y rho_T]"


def dual_value_estimate(y: float, density: DensityProcess, utility: Utility) -> DualEstimate:
    """Monte Carlo estimate of E[Ũ(y rho_T) + y rho_T] for the given density.

    The integrand carries no endowment term; weak duality with endowment H reads
    E U(X_T + H) <= E Ũ(y rho_T) + y (x + E[rho_T H]).
    """
    if not y > 0:
        raise DomainError(f"y must be > 0, got {y}")
    z = y * density.terminal
    ok = np.isfinite(z) & (z > 0)
    vals = np.full(z.shape, np.nan)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        vals[ok] = utility.conj(z[ok]) + z[ok]
    good = np.isfinite(vals)
    v = vals[good]
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return DualEstimate(float(v.mean()), se, int((~good).sum()))
