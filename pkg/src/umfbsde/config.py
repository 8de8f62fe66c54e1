"""Flat ``section.key = value`` run configuration.

Every key has a default; a file overrides some of them.  Unknown sections or
keys are rejected, and the problem-defining sections (market, utility,
endowment, grid) must appear in the file.  ``echo`` writes the effective
configuration with every default resolved, and parsing the echo reproduces the
same object.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .bridge import Tolerances
from .errors import ConfigurationError, DomainError
from .fbsde import PicardConfig
from .market import EndowmentSpec, MarketSpec, TimeGrid
from .regression import BasisSpec
from .utility import Utility, make_utility

REQUIRED_SECTIONS = ("market", "utility", "endowment", "grid")


@dataclass(frozen=True)
class MarketSection:
    mu: float = 0.1
    sigma: float = 0.2
    orthogonal_factor: bool = False


@dataclass(frozen=True)
class UtilitySection:
    family: str = "exponential"
    gamma: float = 1.0
    weight: float = 0.5
    a: float = 1.0
    b: float = 2.0


@dataclass(frozen=True)
class EndowmentSection:
    kind: str = "constant"
    level: float = 0.5


@dataclass(frozen=True)
class GridSection:
    horizon: float = 1.0
    steps: int = 100
    paths: int = 50000
    x0: float = 0.0


@dataclass(frozen=True)
class RegressionSection:
    degree: int = 3
    ridge: float = 1e-8


@dataclass(frozen=True)
class PicardSection:
    max_iterations: int = 30
    damping: float = 0.5
    tolerance: float = 1e-3


@dataclass(frozen=True)
class SurfaceSection:
    x_points: int = 41
    half_width: float = 0.0  # 0 means 4 sigma pi_ref sqrt(T)
    t_stride: int = 5
    paths: int = 5000
    smooth: bool = False
    eval_paths: int = 5000


@dataclass(frozen=True)
class ConvergenceSection:
    levels: int = 3
    base_steps: int = 25
    base_x_points: int = 21
    base_paths: int = 5000
    replications: int = 2


@dataclass(frozen=True)
class RunConfig:
    market: MarketSection = field(default_factory=MarketSection)
    utility: UtilitySection = field(default_factory=UtilitySection)
    endowment: EndowmentSection = field(default_factory=EndowmentSection)
    grid: GridSection = field(default_factory=GridSection)
    regression: RegressionSection = field(default_factory=RegressionSection)
    picard: PicardSection = field(default_factory=PicardSection)
    surface: SurfaceSection = field(default_factory=SurfaceSection)
    tolerance: Tolerances = field(default_factory=Tolerances)
    convergence: ConvergenceSection = field(default_factory=ConvergenceSection)
    seed: int = 7
    output: str = "runs/default"

    # -- model objects
    def market_spec(self) -> MarketSpec:
        m = self.market
        return MarketSpec(m.mu, m.sigma, m.orthogonal_factor)

    def endowment_spec(self) -> EndowmentSpec:
        return EndowmentSpec(self.endowment.kind, self.endowment.level)

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.grid.horizon, self.grid.steps)

    def utility_spec(self) -> Utility:
        u = self.utility
        return make_utility(u.family, gamma=u.gamma, weight=u.weight, a=u.a, b=u.b)

    def basis(self) -> BasisSpec:
        return BasisSpec(degree=self.regression.degree, ridge=self.regression.ridge)

    def picard_config(self) -> PicardConfig:
        p = self.picard
        return PicardConfig(p.max_iterations, p.damping, p.tolerance, self.basis())


SECTIONS = tuple(f.name for f in fields(RunConfig) if f.name not in ("seed", "output"))
TOP_LEVEL = ("seed", "output")


def _coerce(value: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {value!r} as {type(default).__name__}")
    return value


def parse_config(text: str, require_sections: bool = True) -> RunConfig:
    cfg = RunConfig()
    updates: dict = {}
    top: dict = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            if key not in TOP_LEVEL:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            top[key] = _coerce(value, getattr(cfg, key), f"line {lineno}")
            continue
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigurationError(f"line {lineno}: unknown section {section!r}")
        current = getattr(cfg, section)
        if name not in {f.name for f in fields(current)}:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        seen.add(section)
        updates.setdefault(section, {})[name] = _coerce(value, getattr(current, name),
                                                         f"line {lineno}")
    if require_sections:
        missing = [s for s in REQUIRED_SECTIONS if s not in seen]
        if missing:
            raise ConfigurationError(f"missing config sections: {', '.join(missing)}")
    try:
        sections = {s: replace(getattr(cfg, s), **kv) for s, kv in updates.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc))
    return replace(cfg, **sections, **top)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}")
    return parse_config(text)


def with_overrides(cfg: RunConfig, seed=None, paths=None, steps=None, output=None) -> RunConfig:
    grid = cfg.grid
    if paths is not None:
        grid = replace(grid, paths=int(paths))
    if steps is not None:
        grid = replace(grid, steps=int(steps))
    return replace(cfg, grid=grid,
                   seed=cfg.seed if seed is None else int(seed),
                   output=cfg.output if output is None else str(output))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def echo(cfg: RunConfig) -> str:
    """Effective configuration, every key resolved."""
    lines = [f"seed = {cfg.seed}", f"output = {cfg.output}"]
    for name in SECTIONS:
        sec = getattr(cfg, name)
        lines.append("")
        for f in fields(sec):
            lines.append(f"{name}.{f.name} = {_fmt(getattr(sec, f.name))}")
    return "\n".join(lines) + "\n"


def validate(cfg: RunConfig) -> None:
    """Build every model object once so that bad values fail before any work."""
    cfg.market_spec()
    cfg.endowment_spec()
    cfg.time_grid()
    try:
        cfg.utility_spec()
    except DomainError as exc:
        raise ConfigurationError(f"utility: {exc}")
    cfg.picard_config()
    if cfg.endowment.kind == "orthogonal" and not cfg.market.orthogonal_factor:
        raise ConfigurationError("endowment.kind = orthogonal needs market.orthogonal_factor = true")
    if cfg.grid.paths < 1:
        raise ConfigurationError("grid.paths must be >= 1")
