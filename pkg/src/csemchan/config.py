"""YAML scenario schema with line-level diagnostics.

Lengths are in metres, frequencies in Hz, times in seconds and powers in dBm
relative to a noise power ``N`` (default 1), converted as
``P_T[W] = 10 ** ((dBm - 30) / 10)``. Unknown keys are rejected.

Sections (all optional except ``geometry``)::

    seed: 0
    f_c: 30.0e9
    geometry:    {R_t, R_r, D, rx_axis, rx_kind}
    users:       {K, positions, fill, w}
    environment: EnvParams fields except seed
    solver:      {P, eps1, max_iter, method, mom_D, N_s, basis, n_trunc, norm_tol}
    power:       {dBm, N, efficiency}
    grid:        {deltas, sample_interval, rx_fraction}
    stats:       {ensemble_size, lags, t_refs, offsets, speed, current, mom_D, N_s}
    capacity:    {ensemble_size, scattering, precoders, rows}
    sweep:       {K_values, P_values, R_t_values, R_r_values, D_values}
    pattern:     {cut, resolution, fixed_angle, radius}
    output:      {dir}
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from scipy import constants as _const

from . import capacity as cp, channel_stats as cs, stochastic_env as se, swf
from .errors import ConfigError, CsemError

DEFAULT_SEED = 0


class _Loc:
    """Line lookup for dotted key paths of one YAML document."""

    def __init__(self, source: str, marks: dict[str, int]):
        self.source, self.marks = source, marks

    def at(self, path: str) -> str:
        line = self.marks.get(path)
        while line is None and "." in path:
            path = path.rsplit(".", 1)[0]
            line = self.marks.get(path)
        return f"{self.source}:{line}" if line is not None else self.source


def _construct(node, path: str, marks: dict[str, int]):
    """Plain Python value from a composed node, recording key lines under dotted paths."""
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = str(_construct(k, path, marks))
            sub = f"{path}.{key}" if path else key
            if key in out:
                raise ConfigError(f"line {k.start_mark.line + 1}: duplicate key '{sub}'")
            marks[sub] = k.start_mark.line + 1
            out[key] = _construct(v, sub, marks)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_construct(v, f"{path}[{i}]", marks) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def load_yaml(text: str, source: str = "<config>") -> tuple[dict, _Loc]:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: YAML parse error: {getattr(e, 'problem', e)}") from e
    marks: dict[str, int] = {}
    data = {} if node is None else _construct(node, "", marks)
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    return data, _Loc(source, marks)


# --------------------------------------------------------------------------- sections


@dataclass(frozen=True)
class GeometryCfg:
    R_t: float
    R_r: float
    D: float
    rx_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    rx_kind: str = "ball"


@dataclass(frozen=True)
class UsersCfg:
    K: int = 10
    positions: tuple[tuple[float, float, float], ...] | None = None
    fill: float = 1.0
    w: tuple[float, float, float] | None = None


@dataclass(frozen=True)
class SolverCfg:
    P: int = 30
    eps1: float = 1e-3
    max_iter: int = 20
    method: str = "fixed_point"
    mom_D: int = 16
    N_s: int = 64
    basis: str = "full"
    n_trunc: int | None = None
    norm_tol: float = 1e-6


@dataclass(frozen=True)
class PowerCfg:
    dBm: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0)
    N: float = 1.0
    efficiency: float = 1.0


@dataclass(frozen=True)
class StatsCfg:
    ensemble_size: int = 200
    lags: tuple[float, ...] = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05)
    t_refs: tuple[float, ...] = (0.0, 2.0)
    offsets: tuple[float, ...] = (0.0, 0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06)
    speed: float = 1.0
    current: tuple[float, float, float] = (0.0, 0.0, 1.0)
    mom_D: int = 48
    N_s: int = 32


@dataclass(frozen=True)
class GridCfg:
    """Sample intervals: ``deltas`` for the statistics sweeps, ``sample_interval`` for precoded Tx rows
    (half a wavelength when null); the Rx sample sits at ``rx_fraction * R_r`` from the Rx centre."""

    deltas: tuple[float, ...] = (0.005, 0.0025)
    sample_interval: float | None = None
    rx_fraction: float = 0.95


@dataclass(frozen=True)
class CapacityCfg:
    ensemble_size: int = 100
    scattering: tuple[bool, ...] = (True, False)
    precoders: tuple[str, ...] = ()
    rows: str = "modes"


@dataclass(frozen=True)
class SweepCfg:
    K_values: tuple[int, ...] = (2, 6, 10)
    P_values: tuple[int, ...] | None = None
    R_t_values: tuple[float, ...] | None = None
    R_r_values: tuple[float, ...] | None = None
    D_values: tuple[float, ...] | None = None


@dataclass(frozen=True)
class PatternCfg:
    cut: str = "phi_cut"
    resolution: int = 721
    fixed_angle: float | None = None
    radius: float | None = None


@dataclass(frozen=True)
class OutputCfg:
    dir: str = "out"


_SECTIONS: dict[str, type] = {
    "geometry": GeometryCfg, "users": UsersCfg, "solver": SolverCfg, "power": PowerCfg, "grid": GridCfg, "stats": StatsCfg,
    "capacity": CapacityCfg, "sweep": SweepCfg, "pattern": PatternCfg, "output": OutputCfg,
}
_ENV_FIELDS = {f.name for f in fields(se.EnvParams)} - {"seed"}


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _section(cls, data, name: str, loc: _Loc):
    if not isinstance(data, dict):
        raise ConfigError(f"{loc.at(name)}: section '{name}' must be a mapping")
    allowed = {f.name for f in fields(cls)}
    for k in data:
        if k not in allowed:
            raise ConfigError(f"{loc.at(f'{name}.{k}')}: unknown key '{k}' in section '{name}'")
    try:
        obj = cls(**{k: _tuplify(v) for k, v in data.items()})
    except TypeError as e:
        raise ConfigError(f"{loc.at(name)}: section '{name}': {e}") from e
    for f in fields(cls):
        if f.name in data and not _type_ok(f.type, getattr(obj, f.name)):
            raise ConfigError(f"{loc.at(f'{name}.{f.name}')}: '{name}.{f.name}' must be of type {f.type}")
    return obj


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _type_ok(annotation: str, v) -> bool:
    """Shallow check against the string annotation of a section field."""
    if v is None:
        return "None" in annotation
    head = annotation.split("[")[0].split(" |")[0]
    if head == "tuple":
        if not isinstance(v, tuple):
            return False
        inner = annotation[annotation.index("[") + 1:]
        if inner.startswith("bool"):
            return all(isinstance(x, bool) for x in v)
        if inner.startswith("str"):
            return all(isinstance(x, str) for x in v)
        if inner.startswith(("float", "int")):
            return all(_is_num(x) for x in v)
        return all(isinstance(x, tuple) and all(_is_num(y) for y in x) for x in v)
    if head == "int":
        return isinstance(v, int) and not isinstance(v, bool)
    if head == "float":
        return _is_num(v)
    if head == "str":
        return isinstance(v, str)
    return True


@dataclass(frozen=True)
class Scenario:
    """Fully resolved configuration."""

    geometry: GeometryCfg
    seed: int = DEFAULT_SEED
    f_c: float = 30.0e9
    users: UsersCfg = field(default_factory=UsersCfg)
    environment: dict = field(default_factory=dict)
    solver: SolverCfg = field(default_factory=SolverCfg)
    power: PowerCfg = field(default_factory=PowerCfg)
    grid: GridCfg = field(default_factory=GridCfg)
    stats: StatsCfg = field(default_factory=StatsCfg)
    capacity: CapacityCfg = field(default_factory=CapacityCfg)
    sweep: SweepCfg = field(default_factory=SweepCfg)
    pattern: PatternCfg = field(default_factory=PatternCfg)
    output: OutputCfg = field(default_factory=OutputCfg)
    flags: tuple[str, ...] = ()
    source: str = "<config>"

    # ---- derived objects
    @property
    def wavelength(self) -> float:
        return _const.c / self.f_c

    @property
    def k(self) -> float:
        return 2 * np.pi / self.wavelength

    def geometry_obj(self, **over) -> swf.Geometry:
        g = dataclasses.asdict(self.geometry)
        g.update(over)
        return swf.Geometry(g["R_t"], g["R_r"], g["D"], rx_axis=tuple(g["rx_axis"]), rx_kind=g["rx_kind"])

    def env(self) -> se.EnvParams:
        return se.EnvParams(**self.environment, seed=self.seed)

    def operator(self, **over) -> swf.RadiationOperator:
        return swf.normalize_modes(self.geometry_obj(**over), self.k, self.solver.n_trunc, tol=self.solver.norm_tol)

    def powers_W(self) -> np.ndarray:
        return cp.dbm_to_watts(self.power.dBm)

    def multi_user(self, operator: swf.RadiationOperator, **over) -> cp.MultiUserScenario:
        kw = dict(K=self.users.K, P=self.solver.P, params=self.env(), D=self.solver.mom_D, N_s=self.solver.N_s,
                  basis=self.solver.basis, method=self.solver.method, eps1=self.solver.eps1,
                  max_iter=self.solver.max_iter, delta=self.grid.sample_interval, efficiency=self.power.efficiency,
                  user_fill=self.users.fill, rows=self.capacity.rows, user_positions=self.users.positions)
        if self.users.w is not None:
            kw["w"] = tuple(self.users.w)
        kw.update(over)
        return cp.MultiUserScenario(operator, **kw)

    def stats_scenario(self, delta: float | None = None) -> cs.StatsScenario:
        g = self.geometry_obj()
        axis = se.placement_frame(g)[0]
        rx = g.rx_center + self.grid.rx_fraction * g.R_r * axis
        return cs.StatsScenario(g, self.env(), self.k, self.grid.deltas[0] if delta is None else delta,
                                rx_point=tuple(rx), speed=self.stats.speed, D=self.stats.mom_D, N_s=self.stats.N_s,
                                basis=self.solver.basis, current=tuple(self.stats.current))

    # ---- serialization
    def to_dict(self) -> dict:
        d = {"seed": self.seed, "f_c": self.f_c, "environment": dict(sorted(self.environment.items()))}
        for name in _SECTIONS:
            d[name] = json.loads(json.dumps(dataclasses.asdict(getattr(self, name))))
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _check_physical(sc: Scenario, loc: _Loc):
    g = sc.geometry
    if not (g.R_t > 0 and g.R_r > 0 and g.D > 0):
        raise ConfigError(f"{loc.at('geometry')}: geometry lengths must be positive")
    if g.rx_kind == "shell":
        if g.D - g.R_r <= g.R_t:
            raise ConfigError(f"{loc.at('geometry.D')}: geometry: receive shell overlaps the source (D - R_r <= R_t)")
    elif g.D <= g.R_t + g.R_r:
        raise ConfigError(f"{loc.at('geometry.D')}: geometry: D must exceed R_t + R_r "
                          f"(D={g.D}, R_t + R_r={g.R_t + g.R_r})")
    if not sc.f_c > 0:
        raise ConfigError(f"{loc.at('f_c')}: f_c must be positive")
    if sc.users.positions is not None and len(sc.users.positions) != sc.users.K:
        raise ConfigError(f"{loc.at('users.positions')}: users.positions must list K={sc.users.K} points")
    if sc.solver.method not in ("fixed_point", "direct"):
        raise ConfigError(f"{loc.at('solver.method')}: unknown method '{sc.solver.method}'")
    if sc.stats.ensemble_size < 1 or sc.capacity.ensemble_size < 1:
        raise ConfigError(f"{loc.at('stats')}: ensemble_size must be >= 1")
    bad = [p for p in sc.capacity.precoders if p not in ("mmse", "slnr")]
    if bad:
        raise ConfigError(f"{loc.at('capacity.precoders')}: unknown precoder '{bad[0]}'")
    try:
        sc.geometry_obj()
        sc.env()
    except CsemError as e:
        raise ConfigError(f"{loc.source}: {e}") from e


def scenario_from_mapping(data: dict, loc: _Loc | None = None) -> Scenario:
    loc = loc or _Loc("<config>", {})
    allowed = set(_SECTIONS) | {"seed", "f_c", "environment"}
    for k in data:
        if k not in allowed:
            raise ConfigError(f"{loc.at(k)}: unknown top-level key '{k}'")
    if "geometry" not in data:
        raise ConfigError(f"{loc.source}: missing required section 'geometry'")
    kw: dict[str, Any] = {name: _section(cls, data[name], name, loc) for name, cls in _SECTIONS.items()
                          if name in data}
    env = data.get("environment", {}) or {}
    if not isinstance(env, dict):
        raise ConfigError(f"{loc.at('environment')}: section 'environment' must be a mapping")
    for k in env:
        if k not in _ENV_FIELDS:
            raise ConfigError(f"{loc.at(f'environment.{k}')}: unknown key '{k}' in section 'environment'")
    flags = []
    if "seed" not in data:
        flags.append(f"seed missing; using default {DEFAULT_SEED}")
    seed = data.get("seed", DEFAULT_SEED)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"{loc.at('seed')}: seed must be a non-negative integer")
    f_c = data.get("f_c", 30.0e9)
    if not isinstance(f_c, (int, float)) or isinstance(f_c, bool):
        raise ConfigError(f"{loc.at('f_c')}: f_c must be a number")
    sc = Scenario(seed=seed, f_c=float(f_c), environment=dict(env), flags=tuple(flags), source=loc.source, **kw)
    _check_physical(sc, loc)
    return sc


def set_override(data: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` (value parsed as YAML) to a nested mapping."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' must look like key.path=value")
    path, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw)
    cur = data
    keys = path.strip().split(".")
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"override '{assignment}': '{k}' is not a section")
    cur[keys[-1]] = value
    return data


def load_scenario(path: str | Path, overrides: list[str] = ()) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"{p}: cannot read config: {e.strerror}") from e
    data, loc = load_yaml(text, str(p))
    for o in overrides:
        set_override(data, o)
    return scenario_from_mapping(data, loc)


def validate(path: str | Path, overrides: list[str] = ()) -> dict:
    """Schema and physical checks plus the implied mode count; no simulation."""
    sc = load_scenario(path, overrides)
    g = sc.geometry_obj()
    nt = sc.solver.n_trunc or swf.default_truncation(sc.k, g.R_t)
    return {
        "valid": True,
        "source": str(path),
        "flags": list(sc.flags),
        "wavelength_m": sc.wavelength,
        "n_trunc": int(nt),
        "P_max": int(swf.mode_count(nt)),
        "kR_t": sc.k * g.R_t,
        "cost_estimate": {
            "operator_modes": int(swf.mode_count(nt)),
            "mom_unknowns_per_scatterer": sc.solver.mom_D,
            "expected_scatterers": sc.env().Q_mean,
        },
    }
