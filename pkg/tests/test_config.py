from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from umfbsde.config import (RunConfig, echo, load_config, parse_config, validate,
                            with_overrides)
from umfbsde.errors import ConfigurationError

BASE = """
# comment line
market.mu = 0.1
market.sigma = 0.2
utility.family = exponential
endowment.kind = constant
grid.steps = 10   # trailing comment
"""


def test_parse_minimal():
    cfg = parse_config(BASE)
    assert cfg.market.mu == 0.1 and cfg.grid.steps == 10
    assert cfg.grid.paths == RunConfig().grid.paths
    validate(cfg)


@pytest.mark.parametrize("text", [
    "market.mu = 0.1\nutility.gamma = 1\nendowment.level = 0",              # no grid
    BASE + "market.rho = 0.3\n",                                           # unknown key
    BASE + "volatility.sigma = 0.3\n",                                     # unknown section
    BASE + "colour = red\n",                                               # unknown top key
    BASE + "grid.steps = ten\n",                                           # bad int
    BASE + "market.orthogonal_factor = yes\n",                             # bad bool
    BASE + "grid.paths\n",                                                 # no '='
])
def test_parse_rejects(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


@pytest.mark.parametrize("line", [
    "utility.gamma = -1", "market.sigma = 0", "grid.steps = 0", "regression.degree = 12",
    "picard.damping = 0", "endowment.kind = orthogonal", "utility.family = power",
    "grid.paths = 0",
])
def test_validate_rejects(line):
    with pytest.raises(ConfigurationError):
        validate(parse_config(BASE + line + "\n"))


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.cfg")


@given(mu=st.floats(-1, 1, allow_nan=False), paths=st.integers(1, 10**6),
       factor=st.booleans(), seed=st.integers(0, 2**63), ridge=st.floats(0, 1))
def test_echo_roundtrip(mu, paths, factor, seed, ridge):
    cfg = parse_config(BASE)
    cfg = replace(cfg, seed=seed, market=replace(cfg.market, mu=mu, orthogonal_factor=factor),
                  grid=replace(cfg.grid, paths=paths),
                  regression=replace(cfg.regression, ridge=ridge))
    assert parse_config(echo(cfg)) == cfg


def test_overrides():
    cfg = with_overrides(parse_config(BASE), seed=3, paths=100, steps=7, output="x")
    assert (cfg.seed, cfg.grid.paths, cfg.grid.steps, cfg.output) == (3, 100, 7, "x")
    assert with_overrides(cfg) == cfg
