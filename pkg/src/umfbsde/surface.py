"""Dynamic value surface V(t, x) by restart Monte Carlo, and its BSPDE checks.

V(t_k, x)(w) = E(U(x + int_{t_k}^T pi dS + H) | F_{t_k}) is estimated for every
x on a uniform grid by restarting the wealth at (t_k, x) along the ensemble and
regressing the terminal utilities on the Brownian state at t_k.  All cells of a
slice share the design, so a slice is a coefficient block ``(nb, nx)`` and
x-derivatives are finite differences of coefficients.

Each slice carries, per derivative order, the drift rate a (per unit time), the
M-integrand phi and the W2-integrand phi_perp of t -> V(t, x), obtained by
regressing one-step increments on ``[B, B dM, B dW2]``.  The drift uses the
pathwise increments of the restart targets, whose conditional mean is the same
but whose dominant dM-noise is absorbed by the regression; phi and phi_perp use
the increments of the fitted surface itself.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

from .errors import ConfigurationError
from .market import PathEnsemble
from .regression import BasisSpec, fit_conditional, integrand_step
from .utility import Utility

MIN_X_POINTS = 5
MAX_ORDER = 3
FLOOR = 1e-6


@dataclass(frozen=True)
class XGrid:
    """Uniform wealth grid ``center +- half_width`` with ``n_points`` nodes."""

    center: float = 0.0
    half_width: float = 2.0
    n_points: int = 41

    def __post_init__(self):
        if self.n_points < MIN_X_POINTS:
            raise ConfigurationError(f"x-grid needs at least {MIN_X_POINTS} points")
        if not self.half_width > 0:
            raise ConfigurationError("x-grid half_width must be > 0")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.center - self.half_width, self.center + self.half_width,
                           self.n_points)

    @property
    def dx(self) -> float:
        return 2 * self.half_width / (self.n_points - 1)

    @classmethod
    def default(cls, sigma: float, pi_ref: float, horizon: float, x0: float = 0.0,
                n_points: int = 41) -> "XGrid":
        width = 4 * sigma * abs(pi_ref) * np.sqrt(horizon)
        return cls(x0, width if width > 0 else 1.0, n_points)


def surface_state_variables(paths: PathEnsemble) -> tuple:
    if paths.endowment.kind == "traded":
        return ("H", "W1")
    if paths.endowment.kind == "orthogonal":
        return ("H", "W2")
    return ()


# ------------------------------------------------------------ x-differencing

def d1(values: np.ndarray, h: float, axis: int = -1) -> np.ndarray:
    """Central first difference, second-order one-sided at the edges."""
    return np.gradient(values, h, axis=axis, edge_order=2)


def d2(values: np.ndarray, h: float, axis: int = -1) -> np.ndarray:
    """Three-point second difference, second-order one-sided at the edges."""
    v = np.moveaxis(values, axis, -1)
    out = np.empty_like(v)
    out[..., 1:-1] = (v[..., 2:] - 2 * v[..., 1:-1] + v[..., :-2]) / h**2
    out[..., 0] = (2 * v[..., 0] - 5 * v[..., 1] + 4 * v[..., 2] - v[..., 3]) / h**2
    out[..., -1] = (2 * v[..., -1] - 5 * v[..., -2] + 4 * v[..., -3] - v[..., -4]) / h**2
    return np.moveaxis(out, -1, axis)


def _differentiate(coef: np.ndarray, h: float, k: int) -> np.ndarray:
    """k-th x-derivative of a coefficient block whose last axis is x."""
    if k == 0:
        return coef
    if k == 1:
        return d1(coef, h)
    if k == 2:
        return d2(coef, h)
    return d1(d2(coef, h), h)


def concave_projection(v: np.ndarray, increasing: bool = True) -> np.ndarray:
    """Least-squares projection of a slice onto concave (and increasing) sequences.

    The slice is written as v_j = c + sum_{i<j} D_i with D_{m-2} = s >= 0 and
    D_i = D_{i+1} + q_{i+1}, q >= 0, so every non-negative parameter vector is
    admissible.
    """
    m = v.size
    # columns: c, s, q_1..q_{m-2}
    L = np.zeros((m, m))
    L[:, 0] = 1.0
    j = np.arange(m)
    L[:, 1] = j  # s contributes to every difference before j
    for l in range(1, m - 1):
        # q_l adds to D_i for all i < l, hence to v_j by min(j, l)
        L[:, l + 1] = np.minimum(j, l)
    lo = np.zeros(m)
    lo[0] = -np.inf
    if not increasing:
        lo[1] = -np.inf
    res = lsq_linear(L, v, bounds=(lo, np.full(m, np.inf)), method="bvls")
    return L @ res.x


# ------------------------------------------------------------------ surface

@dataclass(eq=False)
class ValueSurface:
    """Coefficient representation of a value surface and its derivatives.

    ``coef[d][i]`` is the ``(nb_i, nx)`` block of the d-th x-derivative of the
    base quantity at surface time ``i``; ``drift``, ``phi``, ``phi_perp`` hold the
    same for the one-step decomposition (defined for all but the last time).
    ``base_order`` is 0 when the base quantity is V and 1 when it is V'.
    """

    paths: PathEnsemble
    utility: Utility
    t_index: np.ndarray
    x: np.ndarray
    base_order: int
    features: list
    coef: dict
    drift: dict
    phi: dict
    phi_perp: dict
    stderr: np.ndarray
    policy_label: str = ""
    smoothed: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.paths.grid.points[self.t_index]

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def orders(self) -> list:
        return sorted(self.coef)

    @property
    def deterministic(self) -> bool:
        return all(not f.names for f in self.features)

    def index_of(self, k: int) -> int:
        pos = np.searchsorted(self.t_index, k)
        if pos >= self.t_index.size or self.t_index[pos] != k:
            raise ConfigurationError(f"grid step {k} is not a surface time")
        return int(pos)

    def defined_at(self, k: int) -> bool:
        pos = np.searchsorted(self.t_index, k)
        return bool(pos < self.t_index.size and self.t_index[pos] == k)

    def _block(self, what: str, order: int) -> list:
        table = {"value": self.coef, "drift": self.drift, "phi": self.phi,
                 "phi_perp": self.phi_perp}[what]
        if order not in table:
            raise ConfigurationError(f"order {order} of {what} not available")
        return table[order]

    def nodes(self, what: str, order: int, i: int, states: dict, n: int) -> np.ndarray:
        """Values at all x nodes for surface time ``i`` on the given states: ``(nx, n)``."""
        c = self._block(what, order)[i]
        if c is None:
            return np.zeros((self.x.size, n))
        B = self.features[i].design(states, n)
        return (B @ c).T

    def at(self, what: str, order: int, k: int, x, states: dict) -> np.ndarray:
        """Per-path value at wealth ``x`` and absolute grid step ``k`` (cubic in x)."""
        x = np.asarray(x, dtype=float)
        n = x.size
        node = self.nodes(what, order, self.index_of(k), states, n)
        return lagrange_interp(self.x, node, x)

    def evaluation_states(self, i: int, m: int) -> dict:
        st = self.paths.states(self.t_index[i])
        return {k: v[:m] for k, v in st.items()}

    def evaluate_all(self, what: str, order: int, n_eval: int = 500) -> np.ndarray:
        """``(nt, nx, m)`` array on the first ``m`` ensemble paths; m = 1 if deterministic.

        Slices where the quantity is undefined (last time for drift and phi) are NaN.
        """
        m = 1 if self.deterministic else min(n_eval, self.paths.n_paths)
        blocks = self._block(what, order)
        out = np.full((self.t_index.size, self.x.size, m), np.nan)
        for i, c in enumerate(blocks):
            if c is None and what != "phi_perp":
                continue
            out[i] = self.nodes(what, order, i, self.evaluation_states(i, m), m)
        return out

    def mean_slice(self, what: str = "value", order: int | None = None) -> np.ndarray:
        """Cross-path mean over the whole ensemble, ``(nt, nx)``."""
        order = self.base_order if order is None else order
        blocks = self._block(what, order)
        out = np.full((self.t_index.size, self.x.size), np.nan)
        for i, c in enumerate(blocks):
            if c is None:
                continue
            st = self.paths.states(self.t_index[i])
            B = self.features[i].design(st, self.paths.n_paths)
            out[i] = B.mean(axis=0) @ c
        return out


def lagrange_interp(nodes_x: np.ndarray, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Four-point Lagrange interpolation on a uniform grid, one query per column.

    ``values`` is ``(nx, n)``; query ``x[p]`` uses column ``p``.  Outside the grid
    the edge stencil extrapolates.
    """
    h = nodes_x[1] - nodes_x[0]
    nx = nodes_x.size
    s = (x - nodes_x[0]) / h
    j0 = np.clip(np.floor(s).astype(int) - 1, 0, nx - 4)
    u = s - j0
    cols = np.arange(x.size)
    out = np.zeros(x.size)
    for a in range(4):
        w = np.ones(x.size)
        for b in range(4):
            if b != a:
                w *= (u - b) / (a - b)
        out += w * values[j0 + a, cols]
    return out


def _surface_times(n_steps: int, t_stride: int) -> np.ndarray:
    if t_stride < 1:
        raise ConfigurationError("t_stride must be >= 1")
    idx = list(range(0, n_steps + 1, t_stride))
    if idx[-1] != n_steps:
        idx.append(n_steps)
    return np.array(idx)


def _restart_targets(paths, policy, utility, x, k, gains, deriv):
    """U^(deriv)(X_T^{t_k, x_j} + H) per path, ``(n, nx)``."""
    if gains is not None:
        w = x[None, :] + (gains[k] + paths.H)[:, None]
    else:
        n = paths.n_paths
        X = np.repeat(x[:, None], n, axis=1)
        dS = paths.dS
        for step in range(k, paths.grid.n_steps):
            st = paths.states(step)
            st["X"] = X
            X = X + policy(step, st) * dS[step]
        w = (X + paths.H).T
    return utility.derivatives(w)[deriv]


def _estimate(paths, utility, policy, xgrid, t_stride, n_paths, smooth, base_order,
              basis) -> ValueSurface:
    if n_paths is not None:
        paths = paths.subset(int(n_paths))
    x = xgrid.points
    grid = paths.grid
    t_index = _surface_times(grid.n_steps, t_stride)
    basis = (basis or BasisSpec()).with_variables(surface_state_variables(paths))
    x_dep = bool(getattr(policy, "x_dependent", True))
    gains = None
    if not x_dep:
        # x-independent policy: the gain from t_k is a reverse cumulative sum
        pis = np.empty((grid.n_steps, paths.n_paths))
        zero = np.zeros(paths.n_paths)
        for step in range(grid.n_steps):
            st = paths.states(step)
            st["X"] = zero
            pis[step] = policy(step, st)
        inc = pis * paths.dS
        gains = np.zeros((grid.n_steps + 1, paths.n_paths))
        gains[:-1] = np.cumsum(inc[::-1], axis=0)[::-1]
    nt = t_index.size
    feats, coefs = [None] * nt, [None] * nt
    drift = [None] * nt
    stderr = np.zeros((nt, x.size))
    W1, W2 = paths.W1, paths.W2
    nxt = None
    for i in range(nt - 1, -1, -1):
        k = t_index[i]
        st = paths.states(k)
        targets = _restart_targets(paths, policy, utility, x, k, gains, base_order)
        fit = fit_conditional(targets, st, basis)
        c = fit.coef
        if fit.coef.ndim == 1:
            c = c[:, None]
        if smooth and base_order == 0 and not fit.features.names:
            c = concave_projection(c[0])[None, :]
        feats[i], coefs[i] = fit.features, c
        resid = targets - fit.features.design(st, paths.n_paths) @ c
        stderr[i] = resid.std(axis=0, ddof=1) / np.sqrt(paths.n_paths)
        if nxt is not None:
            k2, targets2 = nxt
            dM = paths.market.sigma * (W1[k2] - W1[k])
            dW2 = None if W2 is None else W2[k2] - W2[k]
            step_fit, _ = integrand_step(targets2 - targets, dM, dW2, st, basis)
            drift[i] = step_fit.drift / (grid.points[k2] - grid.points[k])
        nxt = (k, targets)
    # martingale parts from increments of the fitted surface
    phi, perp = [None] * nt, [None] * nt
    for i in range(nt - 1):
        k, k2 = t_index[i], t_index[i + 1]
        st, st2 = paths.states(k), paths.states(k2)
        n = paths.n_paths
        inc = feats[i + 1].design(st2, n) @ coefs[i + 1] - feats[i].design(st, n) @ coefs[i]
        dM = paths.market.sigma * (W1[k2] - W1[k])
        dW2 = None if W2 is None else W2[k2] - W2[k]
        step_fit, _ = integrand_step(inc, dM, dW2, st, basis)
        phi[i] = step_fit.psi
        perp[i] = step_fit.psi_perp
    surf = ValueSurface(paths, utility, t_index, x, base_order, feats,
                        {base_order: coefs}, {base_order: drift}, {base_order: phi},
                        {base_order: perp}, stderr, type(policy).__name__,
                        smoothed=bool(smooth), meta={"basis": basis})
    return surface_derivatives(surf)


def estimate_value_surface(paths: PathEnsemble, utility: Utility, policy, xgrid: XGrid,
                           t_stride: int = 1, n_paths: int | None = None,
                           smooth: bool = False, basis: BasisSpec | None = None
                           ) -> ValueSurface:
    """Restart Monte Carlo estimate of V on the surface times x ``xgrid``.

    ``policy`` is any callable ``policy(k, states)`` (see :mod:`umfbsde.policy`);
    ``n_paths`` restricts the estimate to a prefix of the ensemble and
    ``t_stride`` keeps every ``t_stride``-th grid time plus the horizon.
    ``smooth`` projects deterministic slices onto increasing concave sequences.
    """
    return _estimate(paths, utility, policy, xgrid, t_stride, n_paths, smooth, 0, basis)


def marginal_surface(paths: PathEnsemble, utility: Utility, policy, xgrid: XGrid,
                     t_stride: int = 1, n_paths: int | None = None,
                     basis: BasisSpec | None = None) -> ValueSurface:
    """Restart Monte Carlo of V'(t, x) = E(U'(X_T^{t,x} + H) | F_t); base order 1."""
    return _estimate(paths, utility, policy, xgrid, t_stride, n_paths, False, 1, basis)


def surface_derivatives(surface: ValueSurface) -> ValueSurface:
    """Fill x-derivatives up to V''' by finite differences of the base coefficients.

    For deterministic H the terminal slice is set from U^(d)(x + H) directly.
    """
    if surface.x.size < MIN_X_POINTS:
        raise ConfigurationError(f"x-grid needs at least {MIN_X_POINTS} points")
    b = surface.base_order
    h = surface.dx
    for d in range(b + 1, MAX_ORDER + 1):
        k = d - b
        for name in ("coef", "drift", "phi", "phi_perp"):
            table = getattr(surface, name)
            table[d] = [None if c is None else _differentiate(c, h, k) for c in table[b]]
    if surface.paths.endowment.deterministic and not surface.features[-1].names:
        H = surface.paths.endowment.level
        ders = surface.utility.derivatives(surface.x + H)
        for d in range(b, MAX_ORDER + 1):
            surface.coef[d][-1] = np.asarray(ders[d])[None, :].copy()
    return surface


# ---------------------------------------------------------------- residuals

@dataclass(frozen=True, eq=False)
class ResidualTable:
    """Per-cell residuals over surface times (all but the last) x nodes.

    ``cell_mean`` and ``cell_rms`` are over the evaluation paths; cells where the
    V'' floor is breached on some path are NaN and counted in ``excluded``.
    """

    cell_mean: np.ndarray
    cell_rms: np.ndarray
    excluded: int
    max_abs: float
    rms: float


def _concavity_floor(v2: np.ndarray) -> np.ndarray:
    """Mask of cells where V'' < -floor, the floor relative to each (t, path) slice."""
    scale = np.nanmax(np.abs(v2), axis=1, keepdims=True)
    return v2 < -FLOOR * scale


def _table(res: np.ndarray, ok: np.ndarray) -> ResidualTable:
    res = res[:-1]
    ok = ok[:-1]
    bad = ~np.all(ok, axis=2)
    r = np.where(ok, res, np.nan)
    mean = np.nanmean(r, axis=2)
    rms = np.sqrt(np.nanmean(r**2, axis=2))
    mean[bad] = np.nan
    rms[bad] = np.nan
    interior = rms[:, 1:-1]
    good = interior[np.isfinite(interior)]
    return ResidualTable(mean, rms, int(bad.sum()),
                         float(np.max(np.abs(good))) if good.size else float("nan"),
                         float(np.sqrt(np.mean(good**2))) if good.size else float("nan"))


def _slices(surface: ValueSurface, n_eval: int):
    out = {}
    for d in range(surface.base_order, MAX_ORDER + 1):
        out[("value", d)] = surface.evaluate_all("value", d, n_eval)
    for d in range(surface.base_order, MAX_ORDER):
        out[("drift", d)] = surface.evaluate_all("drift", d, n_eval)
        out[("phi", d)] = surface.evaluate_all("phi", d, n_eval)
    return out


def bspde_residual(surface: ValueSurface, market, n_eval: int = 500) -> ResidualTable:
    """drift(V) - (phi' + lambda V')^2 C / (2 V'') per cell, needs base order 0."""
    if surface.base_order != 0:
        raise ConfigurationError("the value BSPDE needs a surface of V (base order 0)")
    s = _slices(surface, n_eval)
    lam, c = market.lam, market.covariance_rate
    v1, v2 = s[("value", 1)], s[("value", 2)]
    q = s[("phi", 1)] + lam * v1
    ok = _concavity_floor(v2)
    with np.errstate(divide="ignore", invalid="ignore"):
        res = s[("drift", 0)] - 0.5 * q**2 * c / v2
    return _table(res, ok)


def bspde_derivative_residual(surface: ValueSurface, market, n_eval: int = 500) -> ResidualTable:
    """drift(V') - [(V''lambda + phi'')/V'' - V'''(V'lambda + phi')/(2V''^2)] C (V'lambda + phi')."""
    s = _slices(surface, n_eval)
    lam, c = market.lam, market.covariance_rate
    v1, v2, v3 = s[("value", 1)], s[("value", 2)], s[("value", 3)]
    q = v1 * lam + s[("phi", 1)]
    ok = _concavity_floor(v2)
    with np.errstate(divide="ignore", invalid="ignore"):
        bracket = (v2 * lam + s[("phi", 2)]) / v2 - 0.5 * v3 * q / v2**2
        res = s[("drift", 1)] - bracket * c * q
    return _table(res, ok)


def terminal_mismatch(surface: ValueSurface) -> np.ndarray:
    """Per order: max |V^(d)(T, x) - U^(d)(x + H)| over nodes and paths."""
    paths = surface.paths
    k = surface.t_index[-1]
    st = paths.states(k)
    out = {}
    for d in range(surface.base_order, MAX_ORDER + 1):
        node = surface.nodes("value", d, -1, st, paths.n_paths)
        exact = surface.utility.derivatives(surface.x[:, None] + paths.H[None, :])[d]
        out[d] = float(np.max(np.abs(node - exact)))
    return out


def strategy_from_surface(surface: ValueSurface, market, n_eval: int = 500) -> np.ndarray:
    """pi(t, x) = -(phi' + lambda V') / V'' as ``(nt, nx, m)``; floor breaches are NaN.

    phi' is unavailable at the horizon, so the last slice uses phi' = 0 there.
    """
    v1 = surface.evaluate_all("value", 1, n_eval)
    v2 = surface.evaluate_all("value", 2, n_eval)
    p1 = np.nan_to_num(surface.evaluate_all("phi", 1, n_eval))
    ok = _concavity_floor(v2)
    with np.errstate(divide="ignore", invalid="ignore"):
        pi = -(p1 + market.lam * v1) / v2
    return np.where(ok, pi, np.nan)


def surface_to_csv(surface: ValueSurface, path, market) -> None:
    """Cross-path means per cell: t, x, V, V', V'', V''', phi', a and residuals."""
    nt, nx = surface.t_index.size, surface.x.size
    cols = {"t": np.repeat(surface.times, nx), "x": np.tile(surface.x, nt)}
    names = {0: "V", 1: "V1", 2: "V2", 3: "V3"}
    for d in range(surface.base_order, MAX_ORDER + 1):
        cols[names[d]] = surface.mean_slice("value", d).ravel()
    cols["phi1"] = surface.mean_slice("phi", 1).ravel() if 1 in surface.phi else np.nan
    cols["a"] = surface.mean_slice("drift", surface.base_order).ravel()
    pad = np.full((1, nx), np.nan)
    if surface.base_order == 0:
        cols["bspde_residual"] = np.vstack([bspde_residual(surface, market).cell_mean,
                                            pad]).ravel()
    cols["bspde_derivative_residual"] = np.vstack(
        [bspde_derivative_residual(surface, market).cell_mean, pad]).ravel()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        data = np.column_stack([np.broadcast_to(np.asarray(v, float), (nt * nx,))
                                for v in cols.values()])
        for row in data:
            w.writerow([f"{v:.17g}" for v in row])


# ---------------------------------------------------------- decoupling field

@dataclass(eq=False)
class DecouplingField:
    """u(t, x) on the surface grid, for system Y (``kind='Y'``) or system P (``'P'``).

    ``kind='Y'``: u = -Ũ'(V') - x.  ``kind='P'``: u = V' - U'(x).  Node values are
    interpolated in x per path.
    """

    surface: ValueSurface
    kind: str
    utility: Utility

    def __post_init__(self):
        if self.kind not in ("Y", "P"):
            raise ConfigurationError("decoupling field kind must be 'Y' or 'P'")

    def defined_at(self, k: int) -> bool:
        return self.surface.defined_at(k)

    def node_values(self, i: int, states: dict, n: int) -> np.ndarray:
        v1 = self.surface.nodes("value", 1, i, states, n)
        x = self.surface.x[:, None]
        if self.kind == "Y":
            return -self.utility.dconj(v1) - x
        return v1 - self.utility.du(x)

    def grid_values(self, n_eval: int = 1) -> np.ndarray:
        """``(nt, nx, m)`` node values on the first ``m`` paths."""
        s = self.surface
        m = min(n_eval, s.paths.n_paths)
        return np.stack([self.node_values(i, s.evaluation_states(i, m), m)
                         for i in range(s.t_index.size)])

    def __call__(self, k: int, x, states: dict) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        n = x.size
        states = {name: np.broadcast_to(v, (n,)) for name, v in states.items() if name != "X"}
        node = self.node_values(self.surface.index_of(k), states, n)
        return lagrange_interp(self.surface.x, node, x)


__all__ = [
    "XGrid", "ValueSurface", "ResidualTable", "DecouplingField", "estimate_value_surface",
    "marginal_surface", "surface_derivatives", "bspde_residual", "bspde_derivative_residual",
    "strategy_from_surface", "terminal_mismatch", "surface_to_csv", "concave_projection",
    "lagrange_interp",
]
