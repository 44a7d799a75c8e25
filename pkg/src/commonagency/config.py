"""Run configuration: TOML sections mapped onto dataclasses.

Precedence, lowest first: built-in defaults, the config file, command-line
flags. Unknown sections or keys are rejected with the offending dotted key.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError

SCHEMA_VERSION = 1
SWEEP_PARAMETERS = ("rho", "gamma1", "gamma2", "k1", "k2", "risk_aversion")


@dataclass
class ModelSection:
    k1: float = 1.0
    k2: float = 1.0
    rho: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    risk_aversion: float = 1.0
    reservation_utility: float = -1.0
    horizon: float = 1.0
    x0: list = field(default_factory=lambda: [0.0, 0.0])
    # Explicit 2x2 volatility; overrides rho when given.
    sigma: list | None = None
    y_shares: list = field(default_factory=lambda: [0.5, 0.5])
    alpha_shares: list = field(default_factory=lambda: [0.5, 0.5])
    # "lq" or "polynomial" (b = K nu, c = nu^2/2 + quartic nu^4/4 on a box)
    spec: str = "lq"
    quartic: float = 0.0
    effort_bound: float = 50.0


@dataclass
class GridSection:
    lo: float = -3.0
    hi: float = 3.0
    n_x: int = 61
    # 0 picks the smallest stable explicit step count
    n_t: int = 0
    scheme: str = "explicit"
    boundary: str = "linear"
    snapshots: int = 11
    # extra levels, each halving h, for the error table
    refine: int = 0
    # optional symmetric 2x2 terminal curvatures of each Principal
    curvature1: list | None = None
    curvature2: list | None = None
    export: bool = True


@dataclass
class SimulationSection:
    n_paths: int = 10_000
    dt: float = 1e-2
    antithetic: bool = True
    block_size: int = 4096
    budget: float = 1e10
    # "equilibrium" (closed form), "grid" (from the HJB solver) or "fixed"
    contracts: str = "equilibrium"
    # multiplies every sensitivity of the chosen contracts
    beta_scale: float = 1.0
    # used by contracts = "fixed": deterministic total wage, zero sensitivity
    wage: float = 0.0
    best_response_check: bool = True
    offsets: list = field(default_factory=lambda: [-0.2, -0.05, 0.05, 0.2])
    dump_paths: bool = False
    record_stride: int = 10


@dataclass
class NashSection:
    principal: int = 1
    offsets: list = field(default_factory=lambda: [-0.2, -0.05, 0.05, 0.2])
    free_rider: bool = True
    identical: bool = True
    # axis offsets for the concavity fit of the delta profile
    profile: list = field(default_factory=lambda: [-0.2, -0.05, 0.0, 0.05, 0.2])


@dataclass
class SweepSection:
    parameter: str = "rho"
    lo: float = -0.99
    hi: float = 0.99
    count: int = 100
    log: bool = False


@dataclass
class OutputSection:
    dir: str = "out"
    format: str = "csv"


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    model: ModelSection = field(default_factory=ModelSection)
    grid: GridSection = field(default_factory=GridSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    nash: NashSection = field(default_factory=NashSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **dataclasses.asdict(self)}


_SECTIONS = {
    "model": ModelSection,
    "grid": GridSection,
    "simulation": SimulationSection,
    "nash": NashSection,
    "sweep": SweepSection,
    "output": OutputSection,
}


def _coerce(value, default, key):
    """Match the type of the default; ints are accepted where floats are expected."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        return value
    if isinstance(value, list):
        return value
    raise ConfigError(f"expected a list, got {value!r}", key)


def _fill(obj, table: dict, prefix: str):
    defaults = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    for key, value in table.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in defaults:
            raise ConfigError("unknown key", dotted)
        default = defaults[key]
        if default is None or isinstance(default, list):
            if value is None and default is None:
                continue
            if not isinstance(value, list):
                raise ConfigError(f"expected a list, got {value!r}", dotted)
            setattr(obj, key, value)
        else:
            setattr(obj, key, _coerce(value, default, dotted))


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    top = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError("expected a table", key)
            _fill(getattr(cfg, key), value, key)
        elif key == "schema_version":
            if value != SCHEMA_VERSION:
                raise ConfigError(f"unsupported schema version {value!r}", key)
        else:
            top[key] = value
    _fill(cfg, top, "")
    validate(cfg)
    return cfg


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_dict({})
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError("file not found", str(path)) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", str(path)) from exc
    return from_dict(data)


def override(cfg: RunConfig, seed=None, out=None, fmt=None, threads=None) -> RunConfig:
    """Apply command-line flags on top of file values."""
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.output.dir = out
    if fmt is not None:
        cfg.output.format = fmt
    if threads is not None:
        cfg.threads = threads
    validate(cfg)
    return cfg


def _choice(value, options, key):
    if value not in options:
        raise ConfigError(f"must be one of {list(options)}, got {value!r}", key)


def validate(cfg: RunConfig) -> None:
    """Checks that do not need a solver; model values are validated on construction."""
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("must be an unsigned 64-bit integer", "seed")
    if cfg.threads < 1:
        raise ConfigError("must be >= 1", "threads")
    _choice(cfg.output.format, ("csv", "json"), "output.format")
    _choice(cfg.model.spec, ("lq", "polynomial"), "model.spec")
    _choice(cfg.grid.scheme, ("explicit", "semi-implicit"), "grid.scheme")
    _choice(cfg.grid.boundary, ("linear", "quadratic"), "grid.boundary")
    _choice(cfg.simulation.contracts, ("equilibrium", "grid", "fixed"), "simulation.contracts")
    _choice(cfg.sweep.parameter, SWEEP_PARAMETERS, "sweep.parameter")
    if cfg.grid.refine < 0:
        raise ConfigError("must be >= 0", "grid.refine")
    if cfg.grid.n_t < 0:
        raise ConfigError("must be >= 0", "grid.n_t")
    if cfg.grid.snapshots < 2:
        raise ConfigError("must be >= 2", "grid.snapshots")
    if cfg.sweep.count < 1:
        raise ConfigError("must be >= 1", "sweep.count")
    if cfg.sweep.log and not cfg.sweep.lo > 0:
        raise ConfigError("log sweeps need lo > 0", "sweep.lo")
    if cfg.nash.principal not in (1, 2):
        raise ConfigError("must be 1 or 2", "nash.principal")
    for key in ("x0", "y_shares", "alpha_shares"):
        value = getattr(cfg.model, key)
        if len(value) != 2 or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError("expected two numbers", f"model.{key}")
    for key, value in (("model.sigma", cfg.model.sigma), ("grid.curvature1", cfg.grid.curvature1),
                       ("grid.curvature2", cfg.grid.curvature2)):
        if value is not None and (len(value) != 2 or any(len(r) != 2 for r in value)):
            raise ConfigError("expected a 2x2 matrix", key)
