"""Least-squares Monte Carlo: conditional expectations and GKW integrands.

Conditional expectations E(. | F_t) are cross-sectional polynomial regressions
on the Markov state at t.  Martingale-representation integrands are obtained by
regressing one-step increments jointly on ``[B, B*dM, B*dW2]`` where ``B`` is the
state basis, so the drift, the M-integrand and the orthogonal integrand are all
state dependent.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .errors import ConfigurationError, NumericalError

MAX_DEGREE = 8


@dataclass(frozen=True)
class BasisSpec:
    """Total-degree polynomial basis in the named state variables."""

    variables: tuple = ("X",)
    degree: int = 3
    ridge: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.degree <= MAX_DEGREE:
            raise ConfigurationError(f"basis degree must lie in [0, {MAX_DEGREE}]")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be >= 0")

    def with_variables(self, variables) -> "BasisSpec":
        return BasisSpec(tuple(variables), self.degree, self.ridge)


def monomial_exponents(n_vars: int, degree: int) -> list[tuple]:
    """Exponent tuples of all monomials of total degree <= ``degree`` (constant first)."""
    out = [tuple([0] * n_vars)]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n_vars), d):
            e = [0] * n_vars
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


COLLINEAR = 1e-6
WINSOR = 1e-3  # inputs are clamped to these sample quantiles


def _design_from_coords(z: list, exponents: list, n: int) -> np.ndarray:
    """Monomials of the coordinate arrays ``z`` with the given exponent tuples."""
    if not z:
        return np.ones((n, 1))
    deg = max(sum(e) for e in exponents)
    # powers per variable, reused across monomials
    pows = []
    for zi in z:
        p = [None, zi]
        for _ in range(2, deg + 1):
            p.append(p[-1] * zi)
        pows.append(p)
    out = np.empty((n, len(exponents)))
    for c, e in enumerate(exponents):
        nz = [(i, p) for i, p in enumerate(e) if p]
        if not nz:
            out[:, c] = 1.0
            continue
        i, p = nz[0]
        if len(nz) == 1:
            out[:, c] = pows[i][p]
        else:
            np.multiply(pows[i][p], pows[nz[1][0]][nz[1][1]], out=out[:, c])
            for i, p in nz[2:]:
                out[:, c] *= pows[i][p]
    return out


@dataclass(frozen=True, eq=False)
class _Coordinate:
    """One state variable turned into a basis coordinate.

    The raw value is clamped and standardised; for every variable after the first,
    the part spanned by polynomials of the earlier coordinates is subtracted and
    the remainder is clamped and standardised again.  Wealth along a near-constant
    strategy is almost a function of the Brownian driver: a polynomial in the raw
    pair is then fitted on a thin curve and explodes a little way off it, while
    the residual coordinate is clamped to the range it was fitted on.
    """

    name: str
    lower: float
    upper: float
    center: float
    scale: float
    proj: np.ndarray | None = None
    r_lower: float = 0.0
    r_upper: float = 0.0
    r_center: float = 0.0
    r_scale: float = 1.0

    def raw(self, a) -> np.ndarray:
        return (np.clip(np.asarray(a, dtype=float), self.lower, self.upper)
                - self.center) / self.scale

    def value(self, a, prior: list, n: int, degree: int) -> np.ndarray:
        u = self.raw(a)
        if self.proj is None:
            return u
        prev = _design_from_coords(prior, monomial_exponents(len(prior), degree), n)
        r = np.clip(u - prev @ self.proj, self.r_lower, self.r_upper)
        return (r - self.r_center) / self.r_scale


@dataclass(frozen=True, eq=False)
class Features:
    """Standardised polynomial features; constant state variables are dropped.

    Inputs are clamped to the [WINSOR, 1 - WINSOR] sample quantiles seen at fit
    time: a fitted polynomial is extended flat instead of extrapolated, and a few
    extreme paths cannot dominate the fit through their leverage.  Later variables
    enter through their residual on the earlier ones (see ``_Coordinate``); a
    variable whose residual variance is below COLLINEAR relative is dropped.
    """

    coords: tuple
    exponents: list
    degree: int = 0

    @property
    def names(self) -> tuple:
        return tuple(c.name for c in self.coords)

    @property
    def lower(self) -> np.ndarray:
        return np.array([c.lower for c in self.coords])

    @property
    def upper(self) -> np.ndarray:
        return np.array([c.upper for c in self.coords])

    @classmethod
    def from_states(cls, states: dict, basis: BasisSpec) -> "Features":
        coords, z = [], []
        for v in basis.variables:
            if v not in states:
                raise ConfigurationError(f"state variable {v!r} not available")
            a = np.asarray(states[v], dtype=float)
            q = np.quantile(a, [WINSOR, 1 - WINSOR])
            ac = np.clip(a, q[0], q[1])
            c = float(ac.mean())
            s = float(ac.std())
            if s <= 1e-12 * (1.0 + abs(c)):
                continue
            u = (ac - c) / s
            if not coords:
                coords.append(_Coordinate(v, float(q[0]), float(q[1]), c, s))
                z.append(u)
                continue
            prev = _design_from_coords(z, monomial_exponents(len(z), basis.degree), u.shape[0])
            proj = np.linalg.lstsq(prev, u, rcond=None)[0]
            r = u - prev @ proj
            if float(np.mean(r**2)) < COLLINEAR * float(np.mean(u**2)):
                continue
            rq = np.quantile(r, [WINSOR, 1 - WINSOR])
            rc = np.clip(r, rq[0], rq[1])
            coord = _Coordinate(v, float(q[0]), float(q[1]), c, s, proj, float(rq[0]),
                                float(rq[1]), float(rc.mean()), float(rc.std()))
            coords.append(coord)
            z.append((rc - coord.r_center) / coord.r_scale)
        exps = monomial_exponents(len(coords), basis.degree) if coords else [()]
        return cls(tuple(coords), exps, basis.degree)

    @property
    def size(self) -> int:
        return len(self.exponents)

    def design(self, states: dict, n: int | None = None) -> np.ndarray:
        if not self.coords:
            if n is None:
                n = len(next(iter(states.values())))
            return np.ones((n, 1))
        n = np.asarray(states[self.coords[0].name]).shape[0] if n is None else n
        z = []
        for c in self.coords:
            z.append(np.broadcast_to(c.value(states[c.name], z, n, self.degree), (n,)))
        return _design_from_coords(z, self.exponents, n)

    def predict_outer(self, states: dict, coef: np.ndarray, shape: tuple) -> np.ndarray:
        """``design @ coef`` when only the last variable carries extra leading axes.

        Restarting wealth from every node of an x-grid gives ``X`` of shape
        ``(nx, n)`` while the Brownian state is ``(n,)``.  The fit is regrouped as
        a polynomial in the last coordinate whose coefficients are evaluated once
        per path, instead of building the full design on ``nx * n`` rows.
        """
        n = shape[-1]
        if not self.coords:
            return np.broadcast_to(float(coef[0]), shape).copy()
        head, last = self.coords[:-1], self.coords[-1]
        z = []
        for c in head:
            z.append(np.broadcast_to(c.value(states[c.name], z, n, self.degree), (n,)))
        if np.ndim(states[last.name]) <= 1:
            z.append(np.broadcast_to(last.value(states[last.name], z, n, self.degree), (n,)))
            return np.broadcast_to(_design_from_coords(z, self.exponents, n) @ coef, shape).copy()
        u = np.broadcast_to(last.value(states[last.name], z, n, self.degree), shape)
        powers = np.array([e[-1] for e in self.exponents])
        if z:
            B0 = _design_from_coords(z, [e[:-1] for e in self.exponents], n)
        else:
            B0 = np.ones((n, len(self.exponents)))
        out = np.zeros(shape)
        for p in range(int(powers.max()), -1, -1):
            g = B0[:, powers == p] @ coef[powers == p]
            out = out * u + g  # Horner in the last coordinate
        return out


def _solve_normal(A: np.ndarray, y: np.ndarray, penalty: np.ndarray | None,
                  strict: bool) -> np.ndarray:
    """Least squares via normal equations with one step of iterative refinement.

    ``penalty`` is a diagonal Tikhonov term (zero for unpenalised columns).  If the
    Gram matrix is singular and ``strict`` is set, raise; otherwise fall back to
    the SVD minimum-norm solution.
    """
    G = A.T @ A
    if penalty is not None:
        G = G + np.diag(penalty)
    rhs = A.T @ y
    try:
        cho = sla.cho_factor(G, check_finite=False)
        if not np.all(np.isfinite(cho[0])):
            raise np.linalg.LinAlgError
        d = np.abs(np.diag(cho[0]))
        if d.min() <= 1e-7 * d.max():
            raise np.linalg.LinAlgError
        beta = sla.cho_solve(cho, rhs, check_finite=False)
        r = rhs - G @ beta
        beta = beta + sla.cho_solve(cho, r, check_finite=False)
        return beta
    except (np.linalg.LinAlgError, ValueError):
        if strict:
            raise NumericalError("singular regression design; set regression.ridge > 0")
        if penalty is not None and np.any(penalty > 0):
            Aa = np.vstack([A, np.diag(np.sqrt(penalty))])
            ya = np.concatenate([y, np.zeros((A.shape[1],) + y.shape[1:])])
            return np.linalg.lstsq(Aa, ya, rcond=None)[0]
        return np.linalg.lstsq(A, y, rcond=None)[0]


@dataclass(frozen=True, eq=False)
class LinearFit:
    """One cross-sectional regression: coefficients plus fit diagnostics."""

    features: Features
    coef: np.ndarray
    r2: float = float("nan")
    resid_var: float = float("nan")

    def predict(self, states: dict, n: int | None = None) -> np.ndarray:
        return self.features.design(states, n) @ self.coef


def fit_conditional(targets, states: dict, basis: BasisSpec) -> LinearFit:
    """L2 projection of ``targets`` (``(n,)`` or ``(n, m)``) on the basis span of ``states``."""
    y = np.asarray(targets, dtype=float)
    feats = Features.from_states(states, basis)
    A = feats.design(states, y.shape[0])
    if A.shape[0] <= A.shape[1]:
        raise ConfigurationError(
            f"need more paths ({A.shape[0]}) than basis functions ({A.shape[1]})")
    penalty = None
    if basis.ridge > 0 and A.shape[1] > 1:
        penalty = np.full(A.shape[1], basis.ridge * A.shape[0])
        penalty[0] = 0.0  # intercept unpenalised: fitted mean = target mean
    coef = _solve_normal(A, y, penalty, strict=basis.ridge == 0 and A.shape[1] > 1)
    fitted = A @ coef
    resid = y - fitted
    tv = float(np.mean(np.var(y, axis=0)))
    rv = float(np.mean(np.var(resid, axis=0)))
    r2 = 1.0 - rv / tv if tv > 0 else 1.0
    return LinearFit(feats, coef, r2, rv)


def conditional_expectation(targets, states: dict, basis: BasisSpec) -> np.ndarray:
    """Per-path fitted values of E(targets | states)."""
    return fit_conditional(targets, states, basis).predict(states, len(targets))


@dataclass(frozen=True, eq=False)
class ConditionalEstimator:
    """Per-time-step regression fits with their diagnostics."""

    fits: list

    @property
    def r2(self) -> np.ndarray:
        return np.array([f.r2 for f in self.fits])

    @property
    def resid_var(self) -> np.ndarray:
        return np.array([f.resid_var for f in self.fits])

    def predict(self, k: int, states: dict, n: int | None = None) -> np.ndarray:
        return self.fits[k].predict(states, n)


@dataclass(frozen=True, eq=False)
class IntegrandFit:
    """Drift, M-integrand and orthogonal integrand of one increment, as functions of state."""

    features: Features
    drift: np.ndarray
    psi: np.ndarray
    psi_perp: np.ndarray | None
    flagged: bool = False

    def evaluate(self, states: dict, n: int | None = None):
        B = self.features.design(states, n)
        perp = None if self.psi_perp is None else B @ self.psi_perp
        return B @ self.drift, B @ self.psi, perp


def integrand_step(increments, dM, dW2, states: dict, basis: BasisSpec):
    """Regress one-step increments on ``[B, B*dM, B*dW2]``.

    ``increments`` is ``(n,)`` or ``(n, m)``; a block of targets shares one design
    and yields coefficient arrays ``(nb, m)``.  Returns ``(IntegrandFit, residual)``;
    the residual is orthogonal in sample to every column, in particular to dM,
    dW2 and the constant.
    """
    y = np.asarray(increments, dtype=float)
    n = y.shape[0]
    feats = Features.from_states(states, basis)
    nb = feats.size
    drivers = [np.asarray(dM, dtype=float)]
    if dW2 is not None:
        drivers.append(np.asarray(dW2, dtype=float))
    flagged = False
    live = []
    for d in drivers:
        ok = float(np.var(d)) > 1e-300 and np.all(np.isfinite(d))
        live.append(ok)
        flagged |= not ok
    zero = np.zeros((nb,) + y.shape[1:])
    perp0 = None if dW2 is None else zero.copy()
    if not np.any(y):
        return IntegrandFit(feats, zero.copy(), zero.copy(), perp0, flagged), np.zeros_like(y)
    if np.all(y == y[0]):
        # path-independent increment: pure drift, no martingale part
        drift = zero.copy()
        drift[0] = y[0]
        return IntegrandFit(feats, drift, zero.copy(), perp0, flagged), np.zeros_like(y)
    B = feats.design(states, n)
    blocks = [B] + [B * d[:, None] for d, ok in zip(drivers, live) if ok]
    A = np.hstack(blocks)
    if A.shape[0] <= A.shape[1]:
        raise ConfigurationError("too few paths for the integrand regression")
    # scale driver blocks to unit size for conditioning
    colscale = np.sqrt(np.mean(A * A, axis=0))
    colscale[colscale == 0] = 1.0
    cs = colscale if y.ndim == 1 else colscale[:, None]
    coef = _solve_normal(A / colscale, y, None, strict=False) / cs
    resid = y - A @ coef
    parts = np.split(coef, len(blocks))
    drift = parts[0]
    it = iter(parts[1:])
    psi = next(it) if live[0] else zero.copy()
    perp = None
    if dW2 is not None:
        perp = next(it) if live[1] else zero.copy()
    return IntegrandFit(feats, drift, psi, perp, flagged), resid


@dataclass(frozen=True, eq=False)
class MartingaleIntegrands:
    """Drift E(dY|F), integrands psi, psi_perp and residuals, each ``(n_steps, n_paths)``."""

    drift: np.ndarray
    psi: np.ndarray
    psi_perp: np.ndarray
    residual: np.ndarray
    flagged: list = field(default_factory=list)
    fits: list = field(default_factory=list)


def martingale_integrands(increments, dM, dW2, states: Sequence[dict],
                          basis: BasisSpec) -> MartingaleIntegrands:
    """GKW integrands of a discretely observed process, step by step.

    ``increments``, ``dM`` and ``dW2`` are time-major ``(n_steps, n_paths)``;
    ``states[k]`` is the state dict at the left end of step ``k``.
    """
    inc = np.asarray(increments, dtype=float)
    K, n = inc.shape
    if np.shape(dM) != (K, n) or (dW2 is not None and np.shape(dW2) != (K, n)):
        raise ConfigurationError("increments and drivers must be aligned on the same grid")
    drift = np.empty((K, n))
    psi = np.empty((K, n))
    perp = np.zeros((K, n))
    resid = np.empty((K, n))
    flagged, fits = [], []
    for k in range(K):
        fit, r = integrand_step(inc[k], dM[k], None if dW2 is None else dW2[k],
                                states[k], basis)
        d, p, q = fit.evaluate(states[k], n)
        drift[k], psi[k], resid[k] = d, p, r
        if q is not None:
            perp[k] = q
        if fit.flagged:
            flagged.append(k)
        fits.append(fit)
    return MartingaleIntegrands(drift, psi, perp, resid, flagged, fits)
