"""Run configuration: one YAML file holding every tunable, with strict key checking.

Each section maps onto a dataclass; unknown keys anywhere raise
:class:`ConfigError`.  ``--set section.key=value`` overrides from the command
line go through the same validation.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .disturbance import DisturbanceParams
from .kinodynamic import SearchConfig
from .planner import PlannerConfig
from .reachability import ErrorSystem, default_initial_shape, make_error_system
from .simulation import SimConfig
from .trajectory_opt import CostWeights, OptimizerConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class VehicleConfig:
    radius: float = 0.15  # body sphere used for clearance and simulated collisions
    v_max: float = 1.5
    a_max: float = 2.0
    kp: float = 4.0
    kv: float = 4.0

    def __post_init__(self):
        if min(self.v_max, self.a_max, self.kp, self.kv) <= 0 or self.radius < 0:
            raise ValueError("vehicle limits and gains must be positive")


@dataclass
class FieldConfig:
    params: DisturbanceParams = field(default_factory=DisturbanceParams)
    k_sigma: float = 3.0
    resolution: float = 0.1  # query grid spacing

    def __post_init__(self):
        if self.k_sigma <= 0 or self.resolution <= 0:
            raise ValueError("k_sigma and resolution must be positive")


@dataclass
class ReachabilityConfig:
    eps: float = 1e-4
    command_rate: float = 50.0
    initial_pos_std: float = 0.01
    initial_vel_std: float = 0.05

    def __post_init__(self):
        if self.eps <= 0 or self.command_rate <= 0:
            raise ValueError("eps and command_rate must be positive")


@dataclass
class SearchSection:
    """Search settings; speed and acceleration limits come from ``vehicle``."""

    levels: tuple = (-1.0, -0.5, 0.0, 0.5, 1.0)
    durations: tuple = (0.1, 0.2, 0.4)
    rho: float = 10.0
    goal_tol_pos: float = 0.2
    goal_tol_vel: float = 0.2
    pos_bin: float | None = 0.2
    vel_bin: float | None = 0.5
    fine_radius: float = 1.0
    max_expansions: int = 20_000
    heuristic_weight: float = 2.0
    detour_heuristic: bool = True


@dataclass
class OptimizerSection:
    degree: int = 3
    knot_interval: float = 0.1
    weights: CostWeights = field(default_factory=CostWeights)
    block_iterations: int = 10
    max_iterations: int = 500
    rel_tol: float = 1e-6
    grad_tol: float = 1e-5
    buffer: float = 0.02
    escalations: int = 4
    retime: bool = True

    def __post_init__(self):
        if self.degree < 1 or self.knot_interval <= 0:
            raise ValueError("degree must be >= 1 and knot_interval positive")
        if self.block_iterations < 1 or self.max_iterations < 1:
            raise ValueError("iteration budgets must be positive")


@dataclass
class RunConfig:
    # ``field`` names a section here, so the dataclass helper is spelled out in full.
    vehicle: VehicleConfig = dataclasses.field(default_factory=VehicleConfig)
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    reachability: ReachabilityConfig = dataclasses.field(default_factory=ReachabilityConfig)
    search: SearchSection = dataclasses.field(default_factory=SearchSection)
    optimizer: OptimizerSection = dataclasses.field(default_factory=OptimizerSection)
    sim: SimConfig = dataclasses.field(default_factory=SimConfig)

    def error_system(self) -> ErrorSystem:
        return make_error_system(self.vehicle.kp, self.vehicle.kv)

    def initial_shape(self) -> np.ndarray:
        return default_initial_shape(self.reachability.initial_pos_std, self.reachability.initial_vel_std)

    def planner_config(self) -> PlannerConfig:
        v, o = self.vehicle, self.optimizer
        search = SearchConfig(a_max=v.a_max, v_max=v.v_max, **dataclasses.asdict(self.search))
        opt = OptimizerConfig(degree=o.degree, knot_interval=o.knot_interval,
                              block_iterations=o.block_iterations, max_iterations=o.max_iterations,
                              rel_tol=o.rel_tol, grad_tol=o.grad_tol, buffer=o.buffer,
                              escalations=o.escalations)
        return PlannerConfig(vehicle_radius=v.radius, eps=self.reachability.eps,
                             command_dt=1.0 / self.reachability.command_rate, k_sigma=self.field.k_sigma,
                             retime=o.retime, search=search, optimizer=opt,
                             weights=CostWeights(**dataclasses.asdict(o.weights)))

    def sim_config(self) -> SimConfig:
        """The simulation section with its rate tied to the command rate."""
        if self.sim.rate != self.reachability.command_rate:
            raise ConfigError("sim.rate: must equal reachability.command_rate")
        return self.sim

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(float(v) for v in value)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)) and not (
                isinstance(value, float) and value.is_integer()):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, where: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a RunConfig YAML (or defaults when ``path`` is None) and apply ``key=value`` overrides."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
