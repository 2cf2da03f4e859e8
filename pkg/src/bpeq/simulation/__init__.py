"""Deterministic seeded traffic simulation."""

from .demand import Arrival, DemandError, DemandGenerator, DemandProfile, spawn_vehicles, validate_demand
from .engine import (
    Decision,
    InvariantViolation,
    ScenarioError,
    ScenarioResult,
    SimParams,
    Simulation,
    VehicleState,
    run_scenario,
    write_events,
)
from .metrics import MetricsWindow, collect_metrics, stopped_queue_length

__all__ = [
    "Arrival",
    "DemandError",
    "DemandGenerator",
    "DemandProfile",
    "Decision",
    "InvariantViolation",
    "MetricsWindow",
    "ScenarioError",
    "ScenarioResult",
    "SimParams",
    "Simulation",
    "VehicleState",
    "collect_metrics",
    "run_scenario",
    "spawn_vehicles",
    "stopped_queue_length",
    "validate_demand",
    "write_events",
]
