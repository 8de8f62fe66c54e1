"""Trading strategies as feedback functions of (step, wealth, Brownian state)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import PathEnsemble
from .regression import BasisSpec, fit_conditional


@dataclass(frozen=True)
class ConstantPolicy:
    value: float = 0.0
    x_dependent = False

    def __call__(self, k: int, states: dict) -> np.ndarray:
        return np.full(np.shape(states["X"]), float(self.value))


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    """pi(t_k, state) given by one polynomial fit per grid step (absolute index)."""

    fits: dict

    @property
    def x_dependent(self) -> bool:
        return any("X" in f.features.names for f in self.fits.values())

    def __call__(self, k: int, states: dict) -> np.ndarray:
        shape = np.shape(states["X"])
        fit = self.fits[k]
        if len(shape) > 1 and all(np.ndim(v) <= 1 for name, v in states.items() if name != "X"):
            return fit.features.predict_outer(states, fit.coef, shape)
        flat = {name: np.broadcast_to(v, shape).ravel() for name, v in states.items()}
        return fit.predict(flat, int(np.prod(shape))).reshape(shape)


def project_policy(values: np.ndarray, state_list: list, basis: BasisSpec,
                   start: int = 0) -> FeedbackPolicy:
    """Fit per-step pathwise strategy values ``(K, n_paths)`` onto the state basis."""
    fits = {start + k: fit_conditional(values[k], state_list[k], basis)
            for k in range(values.shape[0])}
    return FeedbackPolicy(fits)


def step_states(paths: PathEnsemble, k: int, X) -> dict:
    st = paths.states(k)
    st["X"] = X
    return st


def forward_wealth(policy, paths: PathEnsemble, x0, start: int = 0):
    """X_{k+1} = X_k + pi_k dS_k from ``X_start = x0`` along the ensemble increments.

    Returns time-major ``(X, pi, states)``: ``X`` is ``(K + 1, n)``, ``pi`` is
    ``(K, n)`` with ``K = n_steps - start``, and ``states[k]`` the state dicts.
    """
    n = paths.n_paths
    K = paths.grid.n_steps - start
    dS = paths.dS
    X = np.empty((K + 1, n))
    X[0] = x0
    pi = np.empty((K, n))
    states = []
    for i in range(K):
        st = step_states(paths, start + i, X[i])
        states.append(st)
        pi[i] = policy(start + i, st)
        X[i + 1] = X[i] + pi[i] * dS[start + i]
    return X, pi, states
