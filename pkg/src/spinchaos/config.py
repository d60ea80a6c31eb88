"""INI configuration files for model parameters and experiment knobs.

Sections: [model] [potential] [disorder] [initial] [grid] [experiment].
Every key must name a field of the corresponding spec (or, in [experiment],
a keyword of the experiment driver); anything else is an error.  Lists are
comma separated.
"""

from __future__ import annotations

import configparser
import dataclasses
import inspect
from dataclasses import dataclass, field

from .model import DisorderSpec, InitialLawSpec, ModelParams, PotentialSpec, TimeGrid, default_params

SECTIONS = ("model", "potential", "disorder", "initial", "grid", "experiment")
# driver arguments supplied by the command line rather than the [experiment] section
RESERVED = frozenset({"params", "seed", "threads", "out", "law", "fmt"})
# knobs defaulting to None that take a list of floats
FLOAT_LIST_KNOBS = ("slope_window", "times")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    params: ModelParams
    knobs: dict = field(default_factory=dict)
    seed: int = 0
    output: str | None = None


def _parse_value(raw: str, default):
    """Convert ``raw`` using the type of ``default`` (tuples and lists split on commas)."""
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, (tuple, list)):
        items = [s for s in (p.strip() for p in raw.split(",")) if s]
        elem = default[0] if len(default) else None
        return tuple(_parse_value(s, elem) for s in items)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, str):
        return raw
    # no typed default: int, then float, then string
    if raw.lower() in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def _fields(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
        else:
            out[f.name] = None
    return out


def _section(parser, name: str, defaults: dict, float_keys=()) -> dict:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in defaults:
            raise ConfigError(f"unknown key [{name}] {key}")
        d = defaults[key]
        if key in FLOAT_LIST_KNOBS and name == "experiment":
            d = (0.0,)
        elif key in float_keys:
            d = (0.0,) if isinstance(d, tuple) else 0.0
        try:
            out[key] = _parse_value(raw, d)
        except ValueError as exc:
            raise ConfigError(f"bad value for [{name}] {key}: {exc}") from exc
    return out


def params_from_parser(parser: configparser.ConfigParser, potential: str = "LogBarrier") -> ModelParams:
    pot = _section(parser, "potential", _fields(PotentialSpec), ("knots", "convex_grad", "lipschitz_grad", "c_lip"))
    kind = pot.get("kind", potential)
    base = default_params(kind)
    model = _section(parser, "model", {k: v for k, v in _fields(ModelParams).items()
                                       if k not in ("potential", "disorder", "initial", "grid")},
                     ("beta", "big_a", "horizon"))
    dis = _section(parser, "disorder", _fields(DisorderSpec), ("t2_constant", "beta_shape"))
    init = _section(parser, "initial", _fields(InitialLawSpec),
                    ("half_width", "knots", "density", "chaotic_constant", "poincare_constant"))
    grid = _section(parser, "grid", {"n_steps": 200})
    horizon = model.get("horizon", base.horizon)
    return dataclasses.replace(
        base,
        **model,
        potential=dataclasses.replace(base.potential, **pot),
        disorder=dataclasses.replace(base.disorder, **dis),
        initial=dataclasses.replace(base.initial, **init),
        grid=TimeGrid(grid.get("n_steps", base.grid.n_steps), horizon),
    )


def _driver_defaults(fn) -> dict:
    sig = inspect.signature(fn)
    return {k: p.default for k, p in sig.parameters.items()
            if k not in RESERVED and p.default is not inspect.Parameter.empty}


def experiment_knobs(parser, fn) -> dict:
    defaults = _driver_defaults(fn)
    knobs = _section(parser, "experiment", {"name": "", **defaults})
    knobs.pop("name", None)
    check_knobs(knobs)
    return knobs


def check_knobs(knobs: dict) -> None:
    """Knob invariants: size grids strictly increasing, at least 100 disorder draws."""
    grid = knobs.get("n_grid")
    if grid is not None:
        g = list(grid)
        if any(b <= a for a, b in zip(g, g[1:])):
            raise ConfigError("n_grid must be strictly increasing")
    nd = knobs.get("n_disorder")
    if nd is not None and nd < 100:
        raise ConfigError("n_disorder must be at least 100 for statistical experiments")


def read_parser(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    with open(path) as fh:
        parser.read_file(fh)
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    return parser


def load_params(path, potential: str = "LogBarrier") -> ModelParams:
    return params_from_parser(read_parser(path), potential)


def load_experiment(path, experiment: str | None = None, seed: int = 0) -> ExperimentConfig:
    """Parse a config file into an ExperimentConfig.

    The experiment name comes from ``experiment`` or the [experiment] ``name`` key.
    """
    from .experiments import EXPERIMENTS

    parser = read_parser(path)
    name = experiment
    if name is None:
        if not parser.has_option("experiment", "name"):
            raise ConfigError(f"{path}: no experiment name")
        name = parser.get("experiment", "name").strip()
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}")
    spec = EXPERIMENTS[name]
    params = params_from_parser(parser, spec.potential)
    knobs = experiment_knobs(parser, spec.fn)
    return ExperimentConfig(name, params, knobs, seed)
