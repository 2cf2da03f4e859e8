"""Experiment orchestration: single runs, sweeps over controllers and penetration rates."""

from __future__ import annotations

import itertools
import json
import logging
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..control import ControllerKind
from ..network import Network
from ..simulation import MetricsWindow, run_scenario, write_events
from .config import ConfigError, ScenarioConfig, _node_line, load_config

log = logging.getLogger(__name__)

DEFAULT_CAP = 500


@dataclass
class RunRecord:
    """Outcome of one (scenario, controller, penetration, seed) run."""

    scenario: str
    controller: str
    penetration: float
    seed: int
    summary: dict[str, float] = field(default_factory=dict)
    windows: list[MetricsWindow] = field(default_factory=list)
    vehicle_counts: list[tuple[float, int, int]] = field(default_factory=list)
    agreement: float | None = None
    error: str | None = None

    @property
    def key(self) -> tuple[str, str, float, int]:
        return (self.scenario, self.controller, self.penetration, self.seed)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict[str, Any]:
        out = asdict(self)
        out["windows"] = [w.as_row() for w in self.windows]
        out["vehicle_counts"] = [list(c) for c in self.vehicle_counts]
        return out

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> RunRecord:
        return cls(
            scenario=data["scenario"],
            controller=data["controller"],
            penetration=float(data["penetration"]),
            seed=int(data["seed"]),
            summary=dict(data.get("summary") or {}),
            windows=[MetricsWindow(**w) for w in data.get("windows") or []],
            vehicle_counts=[tuple(c) for c in data.get("vehicle_counts") or []],
            agreement=data.get("agreement"),
            error=data.get("error"),
        )


def controller_label(config: ScenarioConfig) -> str:
    if isinstance(config.controllers, str):
        return config.controllers
    kinds = set(config.controllers.values())
    return kinds.pop() if len(kinds) == 1 else "mixed"


def run_config(
    config: ScenarioConfig, seed: int, events_path: str | Path | None = None, network: Network | None = None
) -> RunRecord:
    """Run one seed of a scenario; simulation errors propagate.

    ``network`` replaces the config's network file when given.
    """
    network = network or config.load_network()
    result = run_scenario(
        network,
        config.demand.profile(),
        config.controller_map(network),
        config.sim_params(record_events=events_path is not None),
        seed=seed,
        duration=config.duration,
        control=config.control_params(),
        estimator=config.estimator_params(),
    )
    if events_path is not None:
        with open(events_path, "w") as fh:
            write_events(result.events or [], fh)
    shadow = [d for d in result.decisions if d.perfect_phase is not None]
    agreement = sum(d.phase == d.perfect_phase for d in shadow) / len(shadow) if shadow else None
    return RunRecord(
        scenario=config.name,
        controller=controller_label(config),
        penetration=config.penetration,
        seed=seed,
        summary=result.summary(),
        windows=list(result.windows),
        vehicle_counts=list(result.vehicle_counts),
        agreement=agreement,
    )


def _guarded(config: ScenarioConfig, seed: int) -> RunRecord:
    try:
        return run_config(config, seed)
    except Exception as exc:  # a failed run is recorded, the sweep goes on
        log.warning("run %s/%s p=%s seed=%s failed: %s", config.name, controller_label(config), config.penetration, seed, exc)
        return RunRecord(config.name, controller_label(config), config.penetration, seed, error=f"{type(exc).__name__}: {exc}")


@dataclass
class SweepSpec:
    """Cross product of axis values over a base scenario, replicated over seeds."""

    base: ScenarioConfig
    controllers: Sequence[str] | None = None
    penetrations: Sequence[float] | None = None
    seeds: Sequence[int] | None = None
    cap: int = DEFAULT_CAP

    def __post_init__(self) -> None:
        for name in ("controllers", "penetrations", "seeds"):
            value = getattr(self, name)
            if value is not None and len(value) == 0:
                raise ConfigError(f"sweep axis {name} is empty")
        for kind in self.controllers or ():
            ControllerKind(kind)
        for p in self.penetrations or ():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"penetration rate {p} outside [0, 1]")
        if self.size > self.cap:
            raise ConfigError(f"sweep has {self.size} runs, above the cap of {self.cap}")

    def points(self) -> list[ScenarioConfig]:
        controllers = list(self.controllers) if self.controllers else [None]
        penetrations = list(self.penetrations) if self.penetrations else [None]
        out = []
        for kind, p in itertools.product(controllers, penetrations):
            out.append(self.base.with_overrides(controllers=kind, penetration=p))
        return out

    def seed_list(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else list(self.base.seeds)

    @property
    def size(self) -> int:
        return (
            len(self.controllers or [None]) * len(self.penetrations or [None]) * len(self.seed_list())
        )


def load_sweep(path: str | Path) -> SweepSpec:
    """Sweep file: ``base`` config path, ``axes`` (controller, penetration), ``replications`` or ``seeds``, ``cap``."""
    path = Path(path)
    try:
        text = path.read_text()
        data = yaml.safe_load(text) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read sweep: {exc.strerror}", str(path)) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse sweep: {exc}", str(path)) from None
    root = yaml.compose(text)

    def fail(msg: str, *loc: Any) -> ConfigError:
        return ConfigError(msg, str(path), _node_line(root, loc))

    if "base" not in data:
        raise fail("sweep needs a base scenario config")
    base_path = Path(data["base"])
    if not base_path.is_absolute():
        base_path = path.parent / base_path
    base = load_config(base_path)
    axes = data.get("axes") or {}
    unknown = set(axes) - {"controller", "penetration"}
    if unknown:
        raise fail(f"unknown sweep axes {sorted(unknown)}", "axes")
    seeds = data.get("seeds")
    if seeds is None and "replications" in data:
        n = int(data["replications"])
        if n < 1:
            raise fail("replications must be >= 1", "replications")
        seeds = list(range(n))
    try:
        return SweepSpec(
            base,
            controllers=axes.get("controller"),
            penetrations=[float(p) for p in axes["penetration"]] if "penetration" in axes else None,
            seeds=seeds,
            cap=int(data.get("cap", DEFAULT_CAP)),
        )
    except ConfigError as exc:
        raise fail(exc.message, "axes") from None
    except ValueError as exc:
        raise fail(str(exc), "axes") from None


def run_sweep(spec: SweepSpec, workers: int = 1) -> list[RunRecord]:
    """Run every axis point for every seed; results come back in a fixed order.

    The same seed gives every controller and penetration rate the same
    demand realization, so rows can be compared seed by seed.
    """
    jobs = [(cfg, seed) for cfg in spec.points() for seed in spec.seed_list()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_guarded, *zip(*jobs)))
    else:
        records = [_guarded(cfg, seed) for cfg, seed in jobs]
    return sorted(records, key=lambda r: r.key)


def write_records(records: Iterable[RunRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_json(json.loads(line)) for line in fh if line.strip()]
