"""Utility functions on the whole real line and their convex conjugates.

Two families are provided. :class:`ExponentialUtility` has closed forms for
everything; :class:`GenericUtility` takes U and three derivatives as callables
and evaluates the conjugate through a safeguarded Newton inversion of U'.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, NumericalError


def _check_finite(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("utility argument must be finite")
    return x


def _check_positive(y):
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        raise DomainError("conjugate argument must be finite and > 0",
                          count=int(np.sum(~(y > 0))))
    return y


class Utility:
    """Common interface. Subclasses implement ``derivatives`` and ``inverse_marginal``."""

    name = "utility"
    closed_form = False

    def derivatives(self, x):
        """Return ``(U, U', U'', U''')`` evaluated at ``x``."""
        raise NotImplementedError

    def inverse_marginal(self, y):
        raise NotImplementedError

    # convenience accessors used all over the solvers
    def u(self, x):
        return self.derivatives(x)[0]

    def du(self, x):
        return self.derivatives(x)[1]

    def d2u(self, x):
        return self.derivatives(x)[2]

    def d3u(self, x):
        return self.derivatives(x)[3]

    def conjugate_derivatives(self, y):
        """Return ``(Ũ, Ũ', Ũ'', Ũ''')`` at ``y > 0``.

        Uses x = I(y) = (U')^{-1}(y): Ũ = U(x) - xy, Ũ' = -x,
        Ũ'' = -1/U''(x), Ũ''' = U'''(x)/U''(x)^3.
        """
        y = _check_positive(y)
        x = self.inverse_marginal(y)
        u0, _, u2, u3 = self.derivatives(x)
        return u0 - x * y, -x, -1.0 / u2, u3 / u2**3

    def conj(self, y):
        return self.conjugate_derivatives(y)[0]

    def dconj(self, y):
        return -self.inverse_marginal(_check_positive(y))

    def d2conj(self, y):
        return self.conjugate_derivatives(y)[2]

    def d3conj(self, y):
        return self.conjugate_derivatives(y)[3]


@dataclass(frozen=True)
class ExponentialUtility(Utility):
    """U(x) = -exp(-gamma x)."""

    gamma: float = 1.0
    name = "exponential"
    closed_form = True

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError(f"gamma must be > 0, got {self.gamma}")

    def derivatives(self, x):
        x = _check_finite(x)
        g = self.gamma
        e = np.exp(-g * x)
        return -e, g * e, -g**2 * e, g**3 * e

    def inverse_marginal(self, y):
        y = _check_positive(y)
        return -np.log(y / self.gamma) / self.gamma

    def conjugate_derivatives(self, y):
        y = _check_positive(y)
        g = self.gamma
        ly = np.log(y / g)
        return (y / g) * (ly - 1.0), ly / g, 1.0 / (g * y), -1.0 / (g * y**2)


@dataclass(frozen=True)
class GenericUtility(Utility):
    """Utility given by four callables; conjugate by safeguarded Newton.

    The Inada conditions guarantee a unique root of U'(x) = y; the bracket is
    grown geometrically from x = 0 until it straddles the root.
    """

    u_fn: Callable
    du_fn: Callable
    d2u_fn: Callable
    d3u_fn: Callable
    label: str = "generic"
    max_iter: int = 200
    name = "generic"

    def derivatives(self, x):
        x = _check_finite(x)
        return self.u_fn(x), self.du_fn(x), self.d2u_fn(x), self.d3u_fn(x)

    def inverse_marginal(self, y):
        y = _check_positive(y)
        scalar = y.ndim == 0
        y = np.atleast_1d(y)
        lo = np.full(y.shape, -1.0)
        hi = np.full(y.shape, 1.0)
        # U' is decreasing: need U'(lo) > y > U'(hi)
        for _ in range(2000):
            bad = self.du_fn(lo) <= y
            if not bad.any():
                break
            lo[bad] *= 2.0
        for _ in range(2000):
            bad = self.du_fn(hi) >= y
            if not bad.any():
                break
            hi[bad] *= 2.0
        x = 0.5 * (lo + hi)
        done = np.zeros(y.shape, dtype=bool)
        for _ in range(self.max_iter):
            f = self.du_fn(x) - y
            done = np.abs(f) <= 1e-14 * y
            if done.all():
                break
            # keep bracket: f > 0 means x is left of the root
            lo = np.where(f > 0, x, lo)
            hi = np.where(f < 0, x, hi)
            step = f / self.d2u_fn(x)
            xn = x - step
            outside = ~((xn > lo) & (xn < hi)) | ~np.isfinite(xn)
            xn = np.where(outside, 0.5 * (lo + hi), xn)
            stalled = np.abs(xn - x) <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(x))
            x = np.where(done, x, xn)
            if np.all(done | stalled):
                break
        resid = np.abs(self.du_fn(x) - y)
        if np.any(resid > 1e-8 * y):
            raise NumericalError("Newton inversion of U' did not converge",
                                 last_iterate=x)
        return x[0] if scalar else x


def mixed_exponential(weight: float = 0.5, a: float = 1.0, b: float = 2.0) -> GenericUtility:
    """U(x) = -(w e^{-a x}/a + (1-w) e^{-b x}/b); strictly concave, Inada on R."""
    if not 0 <= weight <= 1 or a <= 0 or b <= 0:
        raise DomainError("mixed_exponential needs 0 <= weight <= 1 and a, b > 0")
    w = weight

    def u(x):
        return -(w * np.exp(-a * x) / a + (1 - w) * np.exp(-b * x) / b)

    def du(x):
        return w * np.exp(-a * x) + (1 - w) * np.exp(-b * x)

    def d2u(x):
        return -(w * a * np.exp(-a * x) + (1 - w) * b * np.exp(-b * x))

    def d3u(x):
        return w * a**2 * np.exp(-a * x) + (1 - w) * b**2 * np.exp(-b * x)

    return GenericUtility(u, du, d2u, d3u, label=f"mixed_exponential({w},{a},{b})")


def make_utility(family: str, **params) -> Utility:
    if family == "exponential":
        return ExponentialUtility(gamma=float(params.get("gamma", 1.0)))
    if family == "mixed_exponential":
        return mixed_exponential(float(params.get("weight", 0.5)),
                                 float(params.get("a", 1.0)),
                                 float(params.get("b", 2.0)))
    raise DomainError(f"unknown utility family {family!r}")


# Module-level functional forms mirroring the operation names.

def u_derivatives(spec: Utility, x):
    return spec.derivatives(x)


def conjugate_derivatives(spec: Utility, y):
    return spec.conjugate_derivatives(y)


def inverse_marginal(spec: Utility, y):
    return spec.inverse_marginal(y)
