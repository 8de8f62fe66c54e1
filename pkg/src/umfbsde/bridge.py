"""Maps between surface data and FBSDE solutions, and the identity report.

Pointwise maps (all exact algebra given their inputs):

    Y = -Ũ'(V') - X                       y_from_marginal
    Z = lambda Ũ''(V') V' + (lambda V' + phi') / V''      z_from_surface
    dN = -Ũ''(V') dL'                     n_from_orthogonal
    P = U'(X + Y) - U'(X),  Y = -Ũ'(P + U'(X)) - X        p_from_y / y_from_p

``identity_report`` evaluates every relation between a value surface and the Y-
and P-solutions on one ensemble and collects the discrepancies.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .market import MarketSpec, density_process
from .surface import FLOOR, DecouplingField, ValueSurface
from .utility import Utility


# ----------------------------------------------------------- pointwise maps

def y_from_marginal(v_marginal, X, utility: Utility) -> np.ndarray:
    v = np.asarray(v_marginal, dtype=float)
    if np.any(~(v > 0)):
        raise DomainError("marginal value must be > 0", count=int(np.sum(~(v > 0))))
    return -utility.dconj(v) - np.asarray(X, dtype=float)


def _floor_mask(v_second) -> np.ndarray:
    v2 = np.asarray(v_second, dtype=float)
    scale = np.max(np.abs(v2)) if v2.size else 0.0
    return v2 < -FLOOR * scale


def z_from_surface(v_marginal, v_second, phi_prime, market: MarketSpec,
                   utility: Utility) -> np.ndarray:
    """Z = lambda Ũ''(V') V' + (lambda V' + phi')/V''; NaN where V'' breaches the floor."""
    v1 = np.asarray(v_marginal, dtype=float)
    v2 = np.asarray(v_second, dtype=float)
    ok = _floor_mask(v2) & (v1 > 0)
    out = np.full(np.broadcast(v1, v2).shape, np.nan)
    lam = market.lam
    a, b, c = np.broadcast_arrays(v1, v2, np.asarray(phi_prime, dtype=float))
    out[ok] = lam * utility.d2conj(a[ok]) * a[ok] + (lam * a[ok] + c[ok]) / b[ok]
    return out


def z_variant_form(v_marginal, v_second, phi_prime, market: MarketSpec,
                     utility: Utility) -> np.ndarray:
    """The variant lambda Ũ'(V') + (phi' + lambda V')/V''; reported next to the main form."""
    v1 = np.asarray(v_marginal, dtype=float)
    v2 = np.asarray(v_second, dtype=float)
    ok = _floor_mask(v2) & (v1 > 0)
    out = np.full(np.broadcast(v1, v2).shape, np.nan)
    lam = market.lam
    a, b, c = np.broadcast_arrays(v1, v2, np.asarray(phi_prime, dtype=float))
    out[ok] = lam * utility.dconj(a[ok]) + (c[ok] + lam * a[ok]) / b[ok]
    return out


def n_from_orthogonal(l_prime_increments, v_marginal, utility: Utility) -> np.ndarray:
    """N increments -Ũ''(V') dL' along the path."""
    dl = np.asarray(l_prime_increments, dtype=float)
    if not np.any(dl):
        return np.zeros(np.broadcast(dl, np.asarray(v_marginal)).shape)
    return -utility.d2conj(v_marginal) * dl


def orthogonal_from_n(n_increments, x_plus_y, utility: Utility) -> np.ndarray:
    """Inverse of :func:`n_from_orthogonal`: dL' = U''(X + Y) dN."""
    return utility.d2u(x_plus_y) * np.asarray(n_increments, dtype=float)


def p_from_y(X, Y, utility: Utility) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return utility.du(X + np.asarray(Y, dtype=float)) - utility.du(X)


def y_from_p(X, P, utility: Utility) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    e = np.asarray(P, dtype=float) + utility.du(X)
    bad = ~(e > 0)
    if np.any(bad):
        raise DomainError("P + U'(X) must be > 0", count=int(bad.sum()))
    return -utility.dconj(e) - X


def p_y_roundtrip(X, utility: Utility, Y=None, P=None) -> np.ndarray:
    """Given exactly one of ``Y`` or ``P`` return the other."""
    if (Y is None) == (P is None):
        raise ConfigurationError("pass exactly one of Y or P")
    return p_from_y(X, Y, utility) if P is None else y_from_p(X, P, utility)


def strategy_surface_form(v_marginal, v_second, phi_prime, market: MarketSpec):
    return -(np.asarray(phi_prime) + market.lam * np.asarray(v_marginal)) / np.asarray(v_second)


# ---------------------------------------------------------------- fields

def field_from_surface(surface: ValueSurface, which: str, utility: Utility) -> DecouplingField:
    """Y-field u = -Ũ'(V') - x or P-field u2 = V' - U'(x) from a surface."""
    kind = {"Y": "Y", "Y-field": "Y", "P": "P", "P-field": "P"}.get(which)
    if kind is None:
        raise ConfigurationError("which must be 'Y' or 'P'")
    if 1 not in surface.coef:
        raise ConfigurationError("surface has no V' slices")
    return DecouplingField(surface, kind, utility)


@dataclass(frozen=True, eq=False)
class AnalyticField:
    """Decoupling field given as a function ``fn(t, x, states)`` on every grid step."""

    fn: object
    times: np.ndarray

    def defined_at(self, k: int) -> bool:
        return 0 <= k < self.times.size

    def __call__(self, k: int, x, states: dict) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.broadcast_to(self.fn(self.times[k], x, states), x.shape).astype(float)


# ---------------------------------------------------------------- report

@dataclass(frozen=True)
class Tolerances:
    marginal: float = 0.05
    integrand: float = 0.10
    orthogonal: float = 0.10
    martingale_se: float = 3.0
    local_martingale: float = 0.10
    duality_cv: float = 0.02
    strategy_spread: float = 0.05
    roundtrip: float = 1e-10


@dataclass(frozen=True)
class IdentityEntry:
    name: str
    relation: str
    discrepancy: float
    scale: float
    value: float
    tolerance: float
    passed: bool
    n_samples: int
    status: str = "checked"  # checked | skipped | info
    note: str = ""


@dataclass
class VerificationReport:
    entries: list
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries if e.status == "checked")

    def entry(self, name: str) -> IdentityEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "meta": self.meta,
                "identities": [asdict(e) for e in self.entries]}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, default=float)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_table(self) -> str:
        head = f"{'identity':<22}{'value':>12}{'tolerance':>12}{'scale':>12}{'n':>9}  result"
        lines = [head, "-" * len(head)]
        for e in self.entries:
            res = {"checked": "PASS" if e.passed else "FAIL"}.get(e.status, e.status)
            lines.append(f"{e.name:<22}{e.value:>12.4g}{e.tolerance:>12.3g}"
                         f"{e.scale:>12.4g}{e.n_samples:>9d}  {res}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _rms(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.mean(a**2))) if a.size else 0.0


def _relative(disc: float, scale: float) -> float:
    if disc == 0.0:
        return 0.0
    return disc / scale if scale > 0 else float("inf")


def _entry(name, relation, diff, ref, tol, note=""):
    diff = np.asarray(diff, dtype=float)
    ok = np.isfinite(diff)
    d = _rms(diff[ok])
    s = _rms(np.asarray(ref, dtype=float)[ok])
    v = _relative(d, s)
    return IdentityEntry(name, relation, d, s, v, tol, bool(v <= tol), int(ok.sum()),
                         note=note)


def _check_consistent(sol_y, sol_p, surface: ValueSurface):
    a, b, c = sol_y.paths, sol_p.paths, surface.paths
    if a is not b and (a.seed, a.n_paths) != (b.seed, b.n_paths):
        raise ConfigurationError("Y and P solutions come from different ensembles")
    for p in (b, c):
        if (p.market, p.grid, p.endowment, p.seed) != (a.market, a.grid, a.endowment, a.seed):
            raise ConfigurationError("solutions and surface come from different ensembles")
    if sol_y.start != 0 or sol_p.start != 0:
        raise ConfigurationError("identity report needs solutions started at t = 0")
    if not np.array_equal(sol_y.X, sol_p.X):
        raise ConfigurationError("Y and P solutions have different wealth paths")


def identity_report(solution_y, solution_p, surface: ValueSurface, market: MarketSpec,
                    utility: Utility, tolerances: Tolerances | None = None,
                    n_eval: int = 5000) -> VerificationReport:
    """Check every relation between the surface and the two solutions.

    Evaluated along the first ``n_eval`` solution paths at the surface times.
    ``surface`` must carry V', V'' and phi' (a marginal surface is preferred so
    that V' is estimated directly rather than by differencing V).
    """
    tol = tolerances or Tolerances()
    _check_consistent(solution_y, solution_p, surface)
    paths = solution_p.paths
    m = min(n_eval, paths.n_paths)
    lam = market.lam
    N = paths.grid.n_steps
    X, Y, Z = solution_y.X[:, :m], solution_y.Y[:, :m], solution_y.Z[:, :m]
    nperp = solution_y.n_perp[:, :m]
    pi = solution_p.pi[:, :m]
    E = solution_p.E[:, :m]
    psi_E = solution_p.psi_E[:, :m]
    l_perp = solution_p.l_perp[:, :m]

    def st(k):
        return {name: v[:m] for name, v in paths.states(k).items()}

    mg_d, mg_r = [], []
    ig_d, ig_r = [], []
    og_d, og_r = [], []
    lm_d, lm_r = [], []
    spread, piref = [], []
    zp_d, zs_d = [], []
    for k in surface.t_index:
        s = st(k)
        v1 = surface.at("value", 1, k, X[k], s)
        uxy = utility.du(X[k] + Y[k])
        mg_d.append(v1 - uxy)
        mg_r.append(uxy)
        if k == N:
            continue
        v2 = surface.at("value", 2, k, X[k], s)
        p1 = surface.at("phi", 1, k, X[k], s)
        _, u1, u2, _ = utility.derivatives(X[k] + Y[k])
        ok = _floor_mask(v2)
        rhs = (Z[k] + lam * u1 / u2) * v2 - lam * u1
        ig_d.append(np.where(ok, p1 - rhs, np.nan))
        ig_r.append(lam * u1)
        if paths.W2 is not None:
            q1 = surface.at("phi_perp", 1, k, X[k], s)
            og_d.append(q1 - u2 * nperp[k])
            og_r.append(u2 * nperp[k])
        lm_d.append(np.where(ok, p1 + v2 * pi[k] + lam * v1, np.nan))
        lm_r.append(lam * v1)
        with np.errstate(divide="ignore", invalid="ignore"):
            s_surf = np.where(ok, strategy_surface_form(v1, v2, p1, market), np.nan)
        s_y = -(lam * u1 / u2 + Z[k])
        _, e1, e2, _ = utility.derivatives(X[k])
        s_p = -(lam * (E[k] - e1) + lam * e1 + (psi_E[k] - e2 * pi[k])) / e2
        trio = np.stack([s_surf, s_y, s_p])
        spread.append(np.nanmax(trio, axis=0) - np.nanmin(trio, axis=0))
        piref.append(s_p)
        zp_d.append(z_from_surface(v1, v2, p1, market, utility) - Z[k])
        zs_d.append(z_variant_form(v1, v2, p1, market, utility) - Z[k])

    cat = np.concatenate
    entries = [
        _entry("marginal", "V'(t,X) = U'(X+Y)", cat(mg_d), cat(mg_r), tol.marginal),
        _entry("integrand", "phi'(t,X) = (Z + lam U'/U'')V'' - lam U'(X+Y)",
               cat(ig_d), cat(ig_r), tol.integrand),
    ]
    if og_d:
        entries.append(_entry("orthogonal", "L'(dt,X) = U''(X+Y) dN",
                              cat(og_d), cat(og_r), tol.orthogonal))
    else:
        entries.append(IdentityEntry("orthogonal", "L'(dt,X) = U''(X+Y) dN", 0.0, 0.0,
                                     0.0, tol.orthogonal, True, 0,
                                     note="no orthogonal factor: both sides vanish"))
    entries.append(_martingale_entry(utility.du(X + Y), tol.martingale_se))
    entries.append(_entry("local_martingale", "M-integrand of V'(t,X_t) = -lam V'(t,X_t)",
                          cat(lm_d), cat(lm_r), tol.local_martingale))
    entries.append(_duality_entry(solution_p, utility, m, tol.duality_cv))
    entries.append(_entry("strategy_three_way", "surface, Y and P strategy formulas agree",
                          cat(spread), cat(piref), tol.strategy_spread))
    entries.append(_roundtrip_entry(X, Y, solution_p.P[:, :m], utility, tol.roundtrip))
    for name, d in (("z_main_form", zp_d), ("z_variant_form", zs_d)):
        e = _entry(name, "Z from surface data vs solution Z", cat(d), cat(piref), np.inf,
                   note="informational")
        entries.append(IdentityEntry(**{**asdict(e), "status": "info"}))
    meta = {"seed": paths.seed, "n_paths": paths.n_paths, "n_eval": m, "n_steps": N,
            "surface_times": int(surface.t_index.size), "surface_paths": surface.paths.n_paths,
            "mu": market.mu, "sigma": market.sigma, "utility": utility.name,
            "endowment": paths.endowment.kind, "level": paths.endowment.level,
            "converged_p": bool(solution_p.converged)}
    return VerificationReport(entries, meta)


def martingale_zscores(values: np.ndarray) -> np.ndarray:
    """z-score of the mean of (value_T - value_t) per time, time-major input."""
    d = values[-1][None, :] - values
    n = values.shape[1]
    sd = d.std(axis=1, ddof=1)
    mean = d.mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, mean / (sd / np.sqrt(n)), np.where(mean == 0, 0.0, np.inf))
    return z


def _martingale_entry(values, tol) -> IdentityEntry:
    z = np.abs(martingale_zscores(values))
    zmax = float(np.max(z))
    return IdentityEntry("martingale", "E U'(X_t+Y_t) constant in t", zmax, 1.0, zmax, tol,
                         bool(zmax <= tol), int(values.size), note="max |z| over time")


def _duality_entry(solution_p, utility, m, tol) -> IdentityEntry:
    paths = solution_p.paths
    rel = "U'(X_T+H)/rho_T constant"
    if paths.W2 is not None:
        return IdentityEntry("duality_ratio", rel, float("nan"), float("nan"), float("nan"),
                             tol, True, 0, status="skipped",
                             note="minimal-martingale density is not the dual optimiser here")
    rho = density_process(paths).terminal[:m]
    ratio = utility.du(solution_p.X[-1, :m] + paths.H[:m]) / rho
    mean = float(ratio.mean())
    sd = float(ratio.std(ddof=1))
    cv = sd / mean if sd > 0 else 0.0
    return IdentityEntry("duality_ratio", rel, sd, mean, cv, tol, bool(cv <= tol), int(m),
                         note=f"mean ratio estimates y = {mean:.6g}")


def _roundtrip_entry(X, Y, P, utility, tol) -> IdentityEntry:
    p = p_from_y(X, Y, utility)
    y = y_from_p(X, p, utility)
    yy = y_from_p(X, P, utility)
    pp = p_from_y(X, yy, utility)
    err = max(float(np.max(np.abs(y - Y) / (1 + np.abs(Y)))),
              float(np.max(np.abs(pp - P) / (1 + np.abs(P)))))
    return IdentityEntry("p_y_roundtrip", "Y -> P -> Y and P -> Y -> P", err, 1.0, err,
                         tol, bool(err <= tol), int(X.size), note="max relative error")
