import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from umfbsde.errors import ConfigurationError, DomainError
from umfbsde.market import (EndowmentSpec, MarketSpec, TimeGrid, density_process,
                            dual_value_estimate, simulate_paths)
from umfbsde.utility import ExponentialUtility


def _sim(mu=0.1, sigma=0.2, kind="constant", level=0.5, n=4000, steps=20, seed=1,
         factor=False, **kw):
    return simulate_paths(MarketSpec(mu, sigma, factor), TimeGrid(1.0, steps),
                          EndowmentSpec(kind, level), n, seed, **kw)


@given(st.floats(0.1, 10), st.integers(1, 500))
def test_time_grid_invariants(T, n):
    g = TimeGrid(T, n)
    t = g.points
    assert t[0] == 0 and t[-1] == T and t.size == n + 1
    assert np.all(np.diff(t) > 0)
    assert np.allclose(np.diff(t), T / n)
    assert g.dt == T / n


@given(st.floats(-1, 1), st.floats(0.01, 2))
def test_market_lambda(mu, sigma):
    m = MarketSpec(mu, sigma)
    assert m.lam * sigma**2 == pytest.approx(mu, rel=1e-15, abs=1e-300)
    assert m.covariance_rate == sigma**2


def test_bad_parameters():
    with pytest.raises(ConfigurationError):
        MarketSpec(0.1, 0.0)
    with pytest.raises(ConfigurationError):
        TimeGrid(1.0, 0)
    with pytest.raises(ConfigurationError):
        EndowmentSpec("power")
    with pytest.raises(ConfigurationError):
        _sim(kind="orthogonal")
    with pytest.raises(ConfigurationError):
        _sim(n=0)


def test_structure_condition_exact():
    p = _sim(factor=True, kind="orthogonal")
    lhs = p.S - p.M - p.market.lam * p.quadratic_variation[:, None]
    assert np.max(np.abs(lhs)) <= 1e-14
    # one value per step, shared by every path
    assert p.dQV.ndim == 1 and np.all(p.dQV > 0)
    assert np.allclose(p.dQV, 0.04 * p.grid.dt, rtol=1e-12)


def test_endowment_bounded():
    for kind in ("constant", "traded"):
        p = _sim(kind=kind, level=0.7)
        assert np.all(np.abs(p.H) <= 0.7)
    p = _sim(kind="orthogonal", level=0.7, factor=True)
    assert np.all(np.abs(p.H) <= 0.7)
    assert np.array_equal(p.H, 0.7 * np.tanh(p.W2[-1]))


def test_driftless_mean_and_moments():
    p = _sim(mu=0.0, n=20000)
    st_ = p.S[-1]
    assert abs(st_.mean()) <= 4 * st_.std() / np.sqrt(p.n_paths)
    w = p.W1[-1]
    assert abs(w.mean()) <= 4 / np.sqrt(p.n_paths)
    assert abs(w.var() - 1.0) <= 4 * np.sqrt(2 / p.n_paths)


def test_quadratic_variation_lln():
    p = _sim(n=20000, steps=50)
    qv = np.sum(p.dM**2, axis=0)
    se = qv.std(ddof=1) / np.sqrt(qv.size)
    assert abs(qv.mean() - 0.04) <= 4 * se


def test_seed_determinism_and_worker_independence():
    a = _sim(seed=9, n=700, factor=True, kind="orthogonal")
    b = _sim(seed=9, n=700, factor=True, kind="orthogonal", n_workers=3)
    assert np.array_equal(a.W1, b.W1) and np.array_equal(a.W2, b.W2)
    assert np.array_equal(a.H, b.H)
    c = _sim(seed=9, n=300, factor=True, kind="orthogonal")
    assert np.array_equal(a.W1[:, :300], c.W1)
    assert not np.array_equal(a.W1, _sim(seed=10, n=700).W1)


def test_subset_is_prefix():
    a = _sim(n=1000)
    s = a.subset(100)
    assert np.array_equal(s.W1, a.W1[:, :100]) and s.n_paths == 100


def test_csv_dump(tmp_path):
    p = _sim(n=30, steps=4, factor=True, kind="orthogonal")
    p.to_csv(tmp_path / "p.csv", max_paths=5)
    rows = np.loadtxt(tmp_path / "p.csv", delimiter=",", skiprows=1)
    assert rows.shape == (5 * 5, 8)
    assert np.array_equal(rows[:5, 3], p.W1[:, 0])


def test_density_zero_lambda():
    d = density_process(_sim(mu=0.0))
    assert np.all(d.rho == 1.0)


def test_density_martingale_and_lognormal_variance():
    p = _sim(n=20000)
    d = density_process(p)
    assert np.all(d.rho[0] == 1.0) and np.all(d.rho > 0)
    rT = d.terminal
    assert abs(rT.mean() - 1) <= 4 * rT.std(ddof=1) / np.sqrt(rT.size)
    lr = np.log(rT)
    target = p.market.lam**2 * 0.04 * 1.0
    se = target * np.sqrt(2 / (rT.size - 1))
    assert abs(lr.var(ddof=1) - target) <= 4 * se


def test_dual_value_degenerate():
    d = density_process(_sim(mu=0.0))
    est = dual_value_estimate(1.0, d, ExponentialUtility(1.0))
    assert est.value == 0.0 and est.stderr == 0.0 and est.n_flagged == 0
    with pytest.raises(DomainError):
        dual_value_estimate(0.0, d, ExponentialUtility(1.0))


def test_weak_duality_against_primal(eb):
    # optimal EB wealth is 2.5 S_T; y = E U'(X_T + H)
    p = _sim(n=20000)
    u = ExponentialUtility(1.0)
    xT = eb.pi * p.S[-1]
    primal = u.u(xT + p.H).mean()
    y = u.du(xT + p.H).mean()
    est = dual_value_estimate(y, density_process(p), u)
    assert est.value >= primal
