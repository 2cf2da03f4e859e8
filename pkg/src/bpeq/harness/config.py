"""Scenario configuration files.

A scenario config is YAML (or JSON). Only ``network`` and ``demand`` are
required; everything else falls back to the defaults below, which are the
published parameter values of the estimation and control method.

    name: isolated_high
    network: four_leg.network.yaml     # relative to this file, or bundled:<name>
    demand:
      rates:                           # per entry link: a rate or [start, rate] steps
        N_in: 600 veh/h
        E_in: [[0, 400 veh/h], [20 min, 800 veh/h]]
      turning:
        N_in: {S_out: 0.82, W_out: 0.18}
    controllers: bp_eq                 # or {I1: bp_eq, I2: fixed}
    penetration: 0.3
    seeds: [0, 1, 2, 3, 4]
    duration: 1 h
    window: 10 min
    out_dir: results/high          # optional; beats the BPEQ_OUT_DIR variable

Quantities accept unit suffixes (``"60 km/h"``, ``"10 min"``); bare numbers
are SI (m, s, m/s, veh/m) except flows, which are veh/h.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..control import ControllerKind, ControlParams
from ..estimation import EstimatorParams
from ..network import Network, load_network
from ..scenarios import scenario_path
from ..simulation import DemandProfile, SimParams
from ..units import kmh, parse_quantity, per_km

BUNDLED_PREFIX = "bundled:"
ControllerName = Literal["bp_perfect", "bp_eq", "fixed"]


class ConfigError(ValueError):
    """Invalid scenario config; ``line`` is 1-based when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None) -> None:
        self.message = message
        self.path = path
        self.line = line
        where = ""
        if path:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(where + message)


def _quantity(kind: str):
    def parse(v: Any) -> float:
        return parse_quantity(v, kind)

    return parse


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EstimatorConfig(_Model):
    sigma: float = 20.0
    tau: float | None = None  # half the reporting interval when unset
    horizon: float = 40.0
    z_floor: float = 1e-6

    _sigma = field_validator("sigma", mode="before")(_quantity("length"))
    _horizon = field_validator("horizon", mode="before")(_quantity("time"))

    @field_validator("tau", mode="before")
    @classmethod
    def _tau(cls, v: Any) -> Any:
        return None if v is None else parse_quantity(v, "time")

    @field_validator("sigma", "horizon", "z_floor", "tau")
    @classmethod
    def _positive(cls, v: float | None) -> float | None:
        if v is not None and not v > 0:
            raise ValueError("must be positive")
        return v


class TrafficConfig(_Model):
    free_flow_speed: float = kmh(60.0)
    wave_speed: float = kmh(25.0)
    jam_density: float = per_km(143.0)
    stop_speed: float = kmh(5.0)

    _speeds = field_validator("free_flow_speed", "wave_speed", "stop_speed", mode="before")(_quantity("speed"))
    _density = field_validator("jam_density", mode="before")(_quantity("density"))

    @field_validator("free_flow_speed", "wave_speed", "jam_density", "stop_speed")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v


class ControlConfig(_Model):
    slot: float = 10.0
    yellow: float = 3.0
    all_red: float = 2.0
    saturation_flow: float = 1800.0

    _times = field_validator("slot", "yellow", "all_red", mode="before")(_quantity("time"))
    _flow = field_validator("saturation_flow", mode="before")(_quantity("flow"))

    @model_validator(mode="after")
    def _lost_time(self) -> ControlConfig:
        if self.slot <= 0:
            raise ValueError("slot must be positive")
        if self.yellow < 0 or self.all_red < 0:
            raise ValueError("yellow and all_red cannot be negative")
        if self.yellow + self.all_red >= self.slot:
            raise ValueError("yellow + all_red must be shorter than the slot")
        if self.saturation_flow <= 0:
            raise ValueError("saturation_flow must be positive")
        return self


class DemandConfig(_Model):
    rates: dict[str, list[tuple[float, float]]]
    turning: dict[str, dict[str, float]] = Field(default_factory=dict)

    @field_validator("rates", mode="before")
    @classmethod
    def _rates(cls, v: Any) -> Any:
        if not isinstance(v, Mapping):
            return v
        out = {}
        for link, steps in v.items():
            if not isinstance(steps, list):
                steps = [[0.0, steps]]
            parsed = []
            for step in steps:
                if not isinstance(step, (list, tuple)) or len(step) != 2:
                    raise ValueError(f"rate step for {link} must be [start, rate]")
                parsed.append((parse_quantity(step[0], "time"), parse_quantity(step[1], "flow")))
            out[str(link)] = parsed
        return out

    @field_validator("rates")
    @classmethod
    def _check(cls, v: dict[str, list[tuple[float, float]]]) -> dict[str, list[tuple[float, float]]]:
        if not v:
            raise ValueError("at least one entry link needs a rate")
        for link, steps in v.items():
            if not steps:
                raise ValueError(f"link {link} has no rate steps")
            if any(r < 0 for _, r in steps):
                raise ValueError(f"negative rate on link {link}")
            starts = [s for s, _ in steps]
            if starts != sorted(set(starts)):
                raise ValueError(f"rate steps of link {link} must have increasing start times")
        return v

    def profile(self) -> DemandProfile:
        return DemandProfile({k: list(v) for k, v in self.rates.items()}, self.turning)


class ScenarioConfig(_Model):
    network: str
    demand: DemandConfig
    name: str = "scenario"
    controllers: Union[ControllerName, dict[str, ControllerName]] = "bp_eq"
    penetration: float = 1.0
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    duration: float = 3600.0
    window: float = 600.0
    dt: float = 0.5
    reporting_interval: float = 10.0
    estimator: EstimatorConfig = EstimatorConfig()
    traffic: TrafficConfig = TrafficConfig()
    control: ControlConfig = ControlConfig()
    probe_noise: float = 0.0
    check_invariants: bool = False
    out_dir: str | None = None
    # directory that relative network paths resolve against; not serialized
    base_dir: str | None = Field(default=None, exclude=True)

    _times = field_validator("duration", "window", "dt", "reporting_interval", mode="before")(_quantity("time"))
    _noise = field_validator("probe_noise", mode="before")(_quantity("speed"))

    @field_validator("penetration")
    @classmethod
    def _penetration(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"penetration rate {v} outside [0, 1]")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v: list[int]) -> list[int]:
        if not v:
            raise ValueError("at least one seed is required")
        return v

    @model_validator(mode="after")
    def _timing(self) -> ScenarioConfig:
        if self.duration < 0 or self.window <= 0 or self.dt <= 0 or self.reporting_interval <= 0:
            raise ValueError("duration must be >= 0; window, dt and reporting_interval must be positive")
        if self.probe_noise < 0:
            raise ValueError("probe_noise cannot be negative")
        if not _divides(self.window, self.duration):
            raise ValueError(f"window {self.window:g} s does not divide duration {self.duration:g} s")
        for what, interval in (("reporting_interval", self.reporting_interval), ("control.slot", self.control.slot)):
            if not _divides(self.dt, interval):
                raise ValueError(f"time step {self.dt:g} s does not divide {what} {interval:g} s")
        return self

    # -- builders ---------------------------------------------------------------

    def network_path(self) -> Path:
        if self.network.startswith(BUNDLED_PREFIX):
            return scenario_path(self.network[len(BUNDLED_PREFIX):])
        path = Path(self.network)
        if not path.is_absolute() and self.base_dir is not None:
            path = Path(self.base_dir) / path
        return path

    def load_network(self) -> Network:
        return load_network(self.network_path())

    def controller_map(self, network: Network) -> dict[str, ControllerKind]:
        if isinstance(self.controllers, str):
            return {nid: ControllerKind(self.controllers) for nid in network.intersections}
        unknown = set(self.controllers) - set(network.intersections)
        if unknown:
            raise ConfigError(f"controllers name unknown intersections {sorted(unknown)}")
        missing = set(network.intersections) - set(self.controllers)
        if missing:
            raise ConfigError(f"no controller assigned to intersections {sorted(missing)}")
        return {nid: ControllerKind(k) for nid, k in self.controllers.items()}

    def sim_params(self, record_events: bool = False) -> SimParams:
        t = self.traffic
        return SimParams(
            dt=self.dt,
            reporting_interval=self.reporting_interval,
            window=self.window,
            penetration=self.penetration,
            free_flow_speed=t.free_flow_speed,
            wave_speed=t.wave_speed,
            jam_density=t.jam_density,
            stop_speed=t.stop_speed,
            probe_noise=self.probe_noise,
            check_invariants=self.check_invariants,
            record_events=record_events,
        )

    def estimator_params(self) -> EstimatorParams:
        e, t = self.estimator, self.traffic
        return EstimatorParams(
            sigma=e.sigma,
            tau=e.tau if e.tau is not None else self.reporting_interval / 2.0,
            horizon=e.horizon,
            free_flow_speed=t.free_flow_speed,
            wave_speed=t.wave_speed,
            jam_density=t.jam_density,
            z_floor=e.z_floor,
        )

    def control_params(self) -> ControlParams:
        c = self.control
        return ControlParams(c.slot, c.yellow, c.all_red, c.saturation_flow)

    def with_overrides(self, **changes: Any) -> ScenarioConfig:
        """Copy with top-level fields replaced and re-validated."""
        data = self.model_dump()
        data.update({k: v for k, v in changes.items() if v is not None})
        return ScenarioConfig.model_validate({**data, "base_dir": self.base_dir})


def _divides(step: float, total: float) -> bool:
    if total == 0:
        return True
    n = round(total / step)
    return n >= 1 and math.isclose(n * step, total, rel_tol=0, abs_tol=1e-9)


# -- loading with line diagnostics ----------------------------------------------


def _node_line(root: yaml.Node | None, loc: tuple[Any, ...]) -> int | None:
    """1-based line of the YAML node at ``loc``, or of its deepest existing parent."""
    node, line = root, None
    if node is not None:
        line = node.start_mark.line + 1
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
        if node is None:
            break
    return line


def _first_error(exc: ValidationError) -> tuple[str, tuple[Any, ...]]:
    err = exc.errors()[0]
    loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and "[" in p))
    field = ".".join(str(p) for p in loc) or "config"
    msg = err["msg"].removeprefix("Value error, ")
    return f"{field}: {msg}", loc


def parse_config(text: str, path: str | None = None, base_dir: str | Path | None = None) -> ScenarioConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"cannot parse: {getattr(exc, 'problem', exc)}", path, mark.line + 1 if mark else None) from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping", path, 1)
    try:
        return ScenarioConfig.model_validate({**data, "base_dir": None if base_dir is None else str(base_dir)})
    except ValidationError as exc:
        msg, loc = _first_error(exc)
        raise ConfigError(msg, path, _node_line(root, loc)) from None


def load_config(path: str | Path) -> ScenarioConfig:
    """Read, validate and fill defaults; errors carry the offending line."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path), path.parent)


def config_to_dict(config: ScenarioConfig) -> dict[str, Any]:
    return config.model_dump(mode="json")


def dump_config(config: ScenarioConfig, stream=None, fmt: str = "yaml") -> str:
    data = config_to_dict(config)
    text = json.dumps(data, indent=2) + "\n" if fmt == "json" else yaml.safe_dump(data, sort_keys=False)
    if stream is not None:
        stream.write(text)
    return text
