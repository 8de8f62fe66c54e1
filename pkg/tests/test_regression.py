import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from umfbsde.errors import ConfigurationError
from umfbsde.market import EndowmentSpec, MarketSpec, TimeGrid, simulate_paths
from umfbsde.regression import (BasisSpec, Features, conditional_expectation,
                                fit_conditional, integrand_step, martingale_integrands,
                                monomial_exponents)

from conftest import rms


@pytest.fixture(scope="module")
def bm():
    return simulate_paths(MarketSpec(0.0, 0.2, True), TimeGrid(1.0, 10),
                          EndowmentSpec("constant", 0.0), 20000, 5)


def test_monomials():
    assert monomial_exponents(2, 2) == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    assert len(monomial_exponents(3, 3)) == 20


def test_basis_validation():
    with pytest.raises(ConfigurationError):
        BasisSpec(degree=9)
    with pytest.raises(ConfigurationError):
        BasisSpec(ridge=-1.0)


def test_constant_target(bm):
    st_ = {"W1": bm.W1[4]}
    fit = conditional_expectation(np.full(bm.n_paths, 2.5), st_, BasisSpec(("W1",)))
    assert np.allclose(fit, 2.5, atol=1e-12)


def test_brownian_martingale_target(bm):
    k = 4
    fit = conditional_expectation(bm.W1[-1], {"W1": bm.W1[k]}, BasisSpec(("W1",)))
    t = bm.t[k]
    err = rms(fit - bm.W1[k])
    assert err <= 3 * np.sqrt(1 - t) * np.sqrt(4 / bm.n_paths)


def test_second_moment_target(bm):
    k = 4
    t = bm.t[k]
    errs = []
    for n in (2000, 20000):
        w = bm.W1[:, :n]
        fit = conditional_expectation(w[-1]**2, {"W1": w[k]}, BasisSpec(("W1",), degree=2))
        errs.append(np.mean(np.abs(fit - (w[k]**2 + 1 - t))))
    assert errs[1] < errs[0] and errs[1] < 0.05


def test_fitted_mean_equals_target_mean(bm):
    y = np.exp(bm.W1[-1])
    fit = conditional_expectation(y, {"W1": bm.W1[3]}, BasisSpec(("W1",), ridge=1e-4))
    assert fit.mean() == pytest.approx(y.mean(), rel=1e-12)


def test_projection_idempotent(bm):
    b = BasisSpec(("W1", "W2"), ridge=0.0)
    st_ = {"W1": bm.W1[5], "W2": bm.W2[5]}
    f1 = conditional_expectation(np.sin(bm.W1[-1]) + bm.W2[-1]**2, st_, b)
    f2 = conditional_expectation(f1, st_, b)
    assert np.max(np.abs(f2 - f1)) <= 1e-9 * np.max(np.abs(f1))


def test_tower_property(bm):
    b = BasisSpec(("W1",), degree=3)
    y = bm.W1[-1]**3
    inner = conditional_expectation(y, {"W1": bm.W1[7]}, b)
    nested = conditional_expectation(inner, {"W1": bm.W1[3]}, b)
    direct_fit = fit_conditional(y, {"W1": bm.W1[3]}, b)
    direct = direct_fit.predict({"W1": bm.W1[3]})
    assert rms(nested - direct) <= 2 * np.sqrt(direct_fit.resid_var / bm.n_paths) * 10


def test_singular_design_without_ridge():
    x = np.r_[np.zeros(50), np.ones(50)]
    states = {"a": x, "b": x.copy()}
    feats = Features.from_states(states, BasisSpec(("a", "b"), degree=1, ridge=0.0))
    # the duplicate variable is screened out instead of producing a singular system
    assert feats.names == ("a",)
    with pytest.raises(ConfigurationError):
        fit_conditional(np.ones(3), {"a": np.arange(3.0)}, BasisSpec(("a",), degree=3))


def test_integrands_of_scaled_driver(bm):
    K = bm.grid.n_steps
    states = [{"W1": bm.W1[k]} for k in range(K)]
    c = 1.7
    mi = martingale_integrands(c * bm.dM, bm.dM, bm.dW2, states, BasisSpec(("W1",)))
    assert np.allclose(mi.psi, c, atol=1e-8)
    assert np.allclose(mi.psi_perp, 0, atol=1e-8)


def test_integrands_of_constant_process(bm):
    K = bm.grid.n_steps
    states = [{"W1": bm.W1[k]} for k in range(K)]
    mi = martingale_integrands(np.zeros((K, bm.n_paths)), bm.dM, bm.dW2, states, BasisSpec(("W1",)))
    assert not mi.psi.any() and not mi.psi_perp.any() and not mi.drift.any()


def test_integrands_of_orthogonal_factor(bm):
    K = bm.grid.n_steps
    states = [{"W1": bm.W1[k], "W2": bm.W2[k]} for k in range(K)]
    mi2 = martingale_integrands(bm.dW2, bm.dM, bm.dW2, states, BasisSpec(("W1", "W2")))
    assert np.allclose(mi2.psi, 0, atol=1e-8) and np.allclose(mi2.psi_perp, 1, atol=1e-8)


@given(st.integers(0, 2**31 - 1))
def test_residual_orthogonal_to_drivers(seed):
    rng = np.random.default_rng(seed)
    n = 400
    x = rng.normal(size=n)
    dM = rng.normal(size=n) * 0.1
    dW = rng.normal(size=n) * 0.1
    inc = np.sin(x) * dM + x**2 * dW + 0.3 * rng.normal(size=n) * 0.1
    _, r = integrand_step(inc, dM, dW, {"X": x}, BasisSpec(("X",)))
    for d in (dM, dW, np.ones(n)):
        scale = np.sqrt(np.mean(inc**2) * np.mean(d**2))
        assert abs(np.mean(r * d)) <= 1e-10 * scale


def test_degenerate_driver_flagged(bm):
    n = bm.n_paths
    fit, _ = integrand_step(bm.dM[0] + 1.0, np.zeros(n), None, {"W1": bm.W1[1]},
                            BasisSpec(("W1",)))
    assert fit.flagged and not fit.psi.any()


def test_ridge_free_exact_system_solves():
    rng = np.random.default_rng(0)
    x = rng.normal(size=200)
    basis = BasisSpec(("X",), degree=3, ridge=0.0)
    # inputs are winsorised at extreme sample quantiles: a cubic in the clipped
    # input lies in the span exactly
    feats = Features.from_states({"X": x}, basis)
    xc = np.clip(x, feats.lower[0], feats.upper[0])
    y = 1 + 2 * xc - xc**3
    fit = fit_conditional(y, {"X": x}, basis)
    assert np.allclose(fit.predict({"X": x}), y, atol=1e-9)


@pytest.mark.parametrize("names", [("X",), ("W1", "X"), ("W1", "W2", "X")])
def test_outer_prediction_matches_flattened(bm, names):
    rng = np.random.default_rng(2)
    st_ = bm.states(4)
    st_["X"] = 0.5 * st_["W1"] + 0.2 * rng.standard_normal(bm.n_paths)
    target = np.sin(st_["X"]) + st_["W2"] * st_["X"]
    fit = fit_conditional(target, st_, BasisSpec(names))
    X = np.linspace(-1, 1, 7)[:, None] + st_["X"][None, :]
    outer = fit.features.predict_outer({**st_, "X": X}, fit.coef, X.shape)
    flat = {k: np.broadcast_to(v, X.shape).ravel() for k, v in {**st_, "X": X}.items()}
    assert np.allclose(outer, fit.predict(flat, X.size).reshape(X.shape), rtol=0, atol=1e-12)


def test_residual_coordinate_is_clamped(bm):
    # X almost a function of W1: evaluation far off that curve stays bounded
    st_ = bm.states(4)
    rng = np.random.default_rng(3)
    st_["X"] = st_["W1"] + 1e-2 * rng.standard_normal(bm.n_paths)
    fit = fit_conditional(st_["X"]**2, st_, BasisSpec(("W1", "X")))
    off = {**st_, "X": st_["W1"] + 5.0}
    assert np.max(np.abs(fit.predict(off))) <= 2 * np.max(np.abs(st_["X"]**2)) + 1
