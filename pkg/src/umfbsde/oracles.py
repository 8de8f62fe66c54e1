"""Closed forms for exponential utility in the Bachelier market with constant H.

With U(x) = -exp(-gamma x), S = sigma W + mu t and H = h constant, the optimal
strategy is the constant lambda/gamma and, with theta = mu/sigma,

    V(t, x) = -exp(-gamma (x + h) - theta^2 (T - t) / 2)
    Y_t     = h + theta^2 (T - t) / (2 gamma)
    P_t     = U'(X_t) (exp(-gamma h - theta^2 (T - t)/2) - 1)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss


@dataclass(frozen=True)
class ExponentialBachelier:
    gamma: float = 1.0
    mu: float = 0.1
    sigma: float = 0.2
    h: float = 0.5
    horizon: float = 1.0

    @property
    def theta(self) -> float:
        return self.mu / self.sigma

    @property
    def lam(self) -> float:
        return self.mu / self.sigma**2

    @property
    def pi(self) -> float:
        return self.lam / self.gamma

    def _decay(self, t):
        return np.exp(-0.5 * self.theta**2 * (self.horizon - np.asarray(t, dtype=float)))

    def value(self, t, x):
        return -np.exp(-self.gamma * (np.asarray(x, dtype=float) + self.h)) * self._decay(t)

    def value_dx(self, t, x, order: int = 1):
        """d^order V / dx^order = (-gamma)^order V."""
        return (-self.gamma)**order * self.value(t, x)

    def value_drift(self, t, x):
        """dV/dt = theta^2 V / 2."""
        return 0.5 * self.theta**2 * self.value(t, x)

    def y(self, t):
        return self.h + self.theta**2 * (self.horizon - np.asarray(t, dtype=float)) / (2 * self.gamma)

    def p(self, t, x):
        x = np.asarray(x, dtype=float)
        c = np.exp(-self.gamma * self.h) * self._decay(t)
        return self.gamma * np.exp(-self.gamma * x) * (c - 1.0)

    def psi(self, t, x):
        """M-integrand of P along the optimal wealth: -lambda P."""
        return -self.lam * self.p(t, x)

    def marginal(self, t, x):
        """V'(t, x) = U'(x + Y_t)."""
        return self.value_dx(t, x, 1)

    @property
    def y0(self) -> float:
        return float(self.y(0.0))

    @property
    def p0(self) -> float:
        return float(self.p(0.0, 0.0))

    @property
    def v0(self) -> float:
        return float(self.value(0.0, 0.0))


@dataclass(frozen=True)
class ExponentialOrthogonal:
    """Exponential utility with H = h tanh(W2_T) independent of the traded asset.

    Then Y_t = theta^2 (T - t) / (2 gamma) + f(t, W2_t) with
    f(t, w) = -log E[exp(-gamma h tanh(w + sqrt(T - t) xi))] / gamma, xi ~ N(0, 1),
    and the W2-integrand of Y is df/dw.  Expectations by Gauss-Hermite quadrature.
    """

    gamma: float = 1.0
    mu: float = 0.1
    sigma: float = 0.2
    h: float = 0.5
    horizon: float = 1.0
    nodes: int = 80

    def _quad(self, t, w):
        xi, wt = hermegauss(self.nodes)
        wt = wt / wt.sum()
        s = np.sqrt(np.maximum(self.horizon - np.asarray(t, dtype=float), 0.0))
        arg = np.asarray(w, dtype=float)[..., None] + np.asarray(s)[..., None] * xi
        th = np.tanh(arg)
        e = np.exp(-self.gamma * self.h * th)
        a = (e * wt).sum(-1)
        da = (e * self.h * (1 - th**2) * wt).sum(-1)
        return a, da

    def f(self, t, w):
        a, _ = self._quad(t, w)
        return -np.log(a) / self.gamma

    def y(self, t, w):
        theta = self.mu / self.sigma
        tt = np.asarray(t, dtype=float)
        return theta**2 * (self.horizon - tt) / (2 * self.gamma) + self.f(t, w)

    def n_perp(self, t, w):
        a, da = self._quad(t, w)
        return da / a


@dataclass(frozen=True)
class ExponentialTraded:
    """Exponential utility with H = h tanh(W1_T) on the traded factor (complete market).

    H is replicable, so Y_t = E^Q(H | F_t) + theta^2 (T - t) / (2 gamma) and the
    optimal strategy is lambda/gamma less the replicating position
    (h/sigma) E^Q(sech^2(W1_T) | F_t).  Under Q, W1_T = w + sqrt(T - t) xi - theta (T - t).
    """

    gamma: float = 1.0
    mu: float = 0.1
    sigma: float = 0.2
    h: float = 0.5
    horizon: float = 1.0
    nodes: int = 80

    def _terminal(self, t, w):
        """tanh(W1_T) at the quadrature nodes under Q, and the normalised weights."""
        xi, wt = hermegauss(self.nodes)
        tau = np.maximum(self.horizon - np.asarray(t, dtype=float), 0.0)[..., None]
        theta = self.mu / self.sigma
        arg = np.asarray(w, dtype=float)[..., None] + np.sqrt(tau) * xi - theta * tau
        return np.tanh(arg), wt / wt.sum()

    def y(self, t, w):
        th, wt = self._terminal(t, w)
        theta = self.mu / self.sigma
        tau = self.horizon - np.asarray(t, dtype=float)
        return self.h * (th * wt).sum(-1) + theta**2 * tau / (2 * self.gamma)

    def pi(self, t, w):
        th, wt = self._terminal(t, w)
        hedge = self.h / self.sigma * ((1 - th**2) * wt).sum(-1)
        return self.mu / (self.sigma**2 * self.gamma) - hedge
