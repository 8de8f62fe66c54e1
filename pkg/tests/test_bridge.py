import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from umfbsde.bridge import (IdentityEntry, Tolerances, field_from_surface, identity_report,
                            n_from_orthogonal, orthogonal_from_n, p_from_y, p_y_roundtrip,
                            strategy_surface_form, y_from_marginal, y_from_p, z_from_surface,
                            z_variant_form)
from umfbsde.errors import ConfigurationError, DomainError
from umfbsde.fbsde import PicardConfig, solve_system_p_picard, y_solution_from_p
from umfbsde.market import EndowmentSpec, MarketSpec, TimeGrid, simulate_paths
from umfbsde.policy import ConstantPolicy
from umfbsde.surface import XGrid, estimate_value_surface, marginal_surface
from umfbsde.utility import ExponentialUtility, mixed_exponential

XG = XGrid(0.0, 1.0, 21)
EB_MARKET = MarketSpec(0.1, 0.2)
utilities = st.sampled_from([ExponentialUtility(1.0), ExponentialUtility(2.5),
                             mixed_exponential(0.5, 1.0, 2.0)])


# ----------------------------------------------------------- pointwise maps

def test_y_from_marginal_examples(expu):
    x = np.linspace(-1, 1, 7)
    assert np.allclose(y_from_marginal(expu.du(x), x, expu), 0.0, atol=1e-14)
    assert y_from_marginal(np.exp(-0.625), 0.0, expu) == pytest.approx(0.625, abs=1e-14)


@given(u=utilities, x=st.floats(-2, 2), v=st.floats(0.05, 20))
def test_y_from_marginal_inverts_marginal_utility(u, x, v):
    y = y_from_marginal(v, x, u)
    assert abs(u.du(x + y) - v) <= 1e-10 * v


def test_y_from_marginal_rejects_nonpositive(expu):
    with pytest.raises(DomainError) as err:
        y_from_marginal(np.array([1.0, 0.0, -1.0]), 0.0, expu)
    assert err.value.count == 2


def test_z_examples(expu):
    zero = MarketSpec(0.0, 0.2)
    assert z_from_surface(1.0, -1.0, 0.0, zero, expu) == 0.0
    # EB: V' = -gamma V, V'' = gamma^2 V, phi' = 0 give Z = 0
    for g in (1.0, 3.0):
        u = ExponentialUtility(g)
        v = -np.exp(-0.625)
        z = z_from_surface(-g * v, g * g * v, 0.0, EB_MARKET, u)
        assert abs(z) <= 1e-12


@given(u=utilities, x=st.floats(-1, 1), y=st.floats(-1, 1), z=st.floats(-3, 3),
       v2=st.floats(-5, -0.01), mu=st.floats(-0.3, 0.3))
def test_strategy_displays_agree_on_consistent_inputs(u, x, y, z, v2, mu):
    market = MarketSpec(mu, 0.2)
    lam = market.lam
    _, u1, u2, _ = u.derivatives(x + y)
    v1 = u1
    phi1 = (z + lam * u1 / u2) * v2 - lam * u1
    pi_y = -(lam * u1 / u2 + z)
    pi_s = strategy_surface_form(v1, v2, phi1, market)
    assert abs(pi_y - pi_s) <= 1e-10 * (1 + abs(pi_y))
    zz = z_from_surface(v1, v2, phi1, market, u)
    assert abs(zz - z) <= 1e-10 * (1 + abs(z) + abs(lam * u1 / u2))


def test_z_variant_form_differs_in_eb(expu):
    v = -np.exp(-0.625)
    zs = z_variant_form(-v, v, 0.0, EB_MARKET, expu)
    assert abs(zs) > 0.1


def test_z_floor_breach_is_nan(expu):
    z = z_from_surface(np.ones(3), np.array([-1.0, 0.0, -1e-9]), 0.0, EB_MARKET, expu)
    assert np.isfinite(z[0]) and np.isnan(z[1]) and np.isnan(z[2])


def test_n_from_orthogonal_examples(expu):
    assert not np.any(n_from_orthogonal(np.zeros(5), np.ones(5), expu))
    assert n_from_orthogonal(0.3, 1.0, expu) == pytest.approx(-0.3, abs=1e-15)


@given(u=utilities, xy=st.floats(-2, 2), dl=st.floats(-1, 1))
def test_orthogonal_roundtrip(u, xy, dl):
    dn = n_from_orthogonal(dl, u.du(xy), u)
    assert abs(orthogonal_from_n(dn, xy, u) - dl) <= 1e-10 * (1 + abs(dl))


def test_p_y_examples(expu):
    assert p_from_y(0.3, 0.0, expu) == 0.0
    assert y_from_p(0.3, 0.0, expu) == pytest.approx(0.0, abs=1e-15)
    assert p_from_y(0.0, 0.625, expu) == pytest.approx(np.exp(-0.625) - 1, abs=1e-15)
    assert y_from_p(0.0, np.exp(-0.625) - 1, expu) == pytest.approx(0.625, abs=1e-14)


@given(u=utilities, x=st.lists(st.floats(-2, 2), min_size=1, max_size=8),
       y=st.floats(-2, 2))
def test_p_y_roundtrip_property(u, x, y):
    x = np.array(x)
    Y = np.full_like(x, y)
    P = p_y_roundtrip(x, u, Y=Y)
    assert np.max(np.abs(p_y_roundtrip(x, u, P=P) - Y)) <= 1e-10


def test_p_y_roundtrip_errors(expu):
    with pytest.raises(DomainError) as err:
        y_from_p(np.zeros(3), np.array([-1.0, -2.0, 0.0]), expu)
    assert err.value.count == 2
    with pytest.raises(ConfigurationError):
        p_y_roundtrip(0.0, expu)
    with pytest.raises(ConfigurationError):
        p_y_roundtrip(0.0, expu, Y=0.0, P=0.0)


@given(u=utilities, x=st.floats(-2, 2), y=st.floats(-2, 2))
def test_p_from_y_increasing_in_y(u, x, y):
    # U' is decreasing, so P = U'(x + y) - U'(x) falls as y rises
    assert p_from_y(x, y + 0.1, u) < p_from_y(x, y, u)


# ------------------------------------------------------------------ fields

def test_fields_terminal_identity(eb_paths, expu, eb):
    s = estimate_value_surface(eb_paths, expu, ConstantPolicy(eb.pi), XG)
    y_field = field_from_surface(s, "Y", expu)
    p_field = field_from_surface(s, "P-field", expu)
    x = XG.points
    assert np.allclose(y_field.grid_values()[-1, :, 0], eb.h, rtol=0, atol=1e-14)
    assert np.allclose(p_field.grid_values()[-1, :, 0], expu.du(x + eb.h) - expu.du(x),
                       rtol=0, atol=1e-15)
    # u(0, x) = Y_0 for every x in the EB case
    assert np.allclose(y_field.grid_values()[0, :, 0], eb.y0, rtol=0.05)
    with pytest.raises(ConfigurationError):
        field_from_surface(s, "Q", expu)


# ------------------------------------------------------------------ report

def _run(paths, utility):
    sol_p = solve_system_p_picard(paths, utility, 0.0, PicardConfig())
    sol_y = y_solution_from_p(sol_p, utility)
    surf = marginal_surface(paths, utility, sol_p.policy, XG)
    return sol_y, sol_p, surf


def test_degenerate_report_is_all_zero(zero_paths, expu):
    sol_y, sol_p, surf = _run(zero_paths, expu)
    report = identity_report(sol_y, sol_p, surf, zero_paths.market, expu)
    assert report.passed
    for e in report.entries:
        assert e.discrepancy <= 1e-12, e.name


def test_report_structure(eb_paths, expu, tmp_path):
    sol_y, sol_p, surf = _run(eb_paths, expu)
    report = identity_report(sol_y, sol_p, surf, eb_paths.market, expu)
    names = [e.name for e in report.entries]
    assert len(names) == len(set(names))
    assert {"marginal", "integrand", "orthogonal", "martingale", "duality_ratio",
            "strategy_three_way", "p_y_roundtrip"} <= set(names)
    for e in report.entries:
        if e.status == "checked":
            assert e.passed == (e.value <= e.tolerance)
    d = json.loads(report.to_json(tmp_path / "r.json"))
    assert d["passed"] == report.passed
    assert len(d["identities"]) == len(names)
    assert "overall" in report.to_table()


def test_tight_tolerances_fail(eb_paths, expu):
    sol_y, sol_p, surf = _run(eb_paths, expu)
    tight = Tolerances(marginal=1e-12, integrand=1e-12, orthogonal=1e-12, martingale_se=1e-12,
                       local_martingale=1e-12, duality_cv=1e-12, strategy_spread=1e-12)
    assert not identity_report(sol_y, sol_p, surf, eb_paths.market, expu, tight).passed


def test_mismatched_ensembles_rejected(eb_paths, expu):
    sol_y, sol_p, surf = _run(eb_paths, expu)
    other = simulate_paths(eb_paths.market, eb_paths.grid, eb_paths.endowment, 4000, 99)
    surf2 = marginal_surface(other, expu, sol_p.policy, XG)
    with pytest.raises(ConfigurationError):
        identity_report(sol_y, sol_p, surf2, eb_paths.market, expu)
    traded = simulate_paths(EB_MARKET, TimeGrid(1.0, 20), EndowmentSpec("traded", 0.5), 4000, 3)
    with pytest.raises(ConfigurationError):
        identity_report(sol_y, sol_p, marginal_surface(traded, expu, sol_p.policy, XG),
                        eb_paths.market, expu)


def test_entry_is_plain_record():
    e = IdentityEntry("a", "r", 0.1, 1.0, 0.1, 0.2, True, 10)
    assert e.status == "checked" and e.note == ""
