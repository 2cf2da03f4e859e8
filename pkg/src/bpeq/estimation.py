"""Queue estimation from connected-vehicle probe reports.

Pipeline, per lane: kernel-interpolate probe speeds onto the cell centers,
map each cell speed to a density through the Newell-Franklin relation,
then sum density times cell length over the lanes of a link.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TextIO

import numpy as np

from .network import Lane, Link, Network
from .units import kmh, per_km

log = logging.getLogger(__name__)

# inputs this close to free-flow speed map to zero density
FREE_FLOW_EPS = 1e-9
# densities below 1e-6 veh/km snap to zero
DENSITY_SNAP = per_km(1e-6)
_DOMAIN_TOL = 1e-9


class EstimationDomainError(ValueError):
    """Speed or density outside the fundamental-diagram domain."""


@dataclass(frozen=True)
class ProbeReading:
    vehicle: int | str
    lane: str
    x: float
    t: float
    v: float


@dataclass(frozen=True)
class EstimatorParams:
    """Kernel and fundamental-diagram parameters, SI units throughout."""

    sigma: float = 20.0
    tau: float = 5.0
    horizon: float = 40.0
    free_flow_speed: float = kmh(60.0)
    wave_speed: float = kmh(25.0)
    jam_density: float = per_km(143.0)
    z_floor: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("sigma", "tau", "horizon", "free_flow_speed", "wave_speed", "jam_density", "z_floor"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"estimator parameter {name} must be positive, got {value}")

    @classmethod
    def for_reporting_interval(cls, interval: float, **overrides: float) -> EstimatorParams:
        """Params with tau set to half the probe reporting interval unless overridden."""
        overrides.setdefault("tau", interval / 2.0)
        return cls(**overrides)

    def with_tau_for(self, interval: float) -> EstimatorParams:
        return replace(self, tau=interval / 2.0)


def kernel_weight(dx: float, dt: float, params: EstimatorParams) -> float:
    """Unnormalized space-time kernel, exp(-|dx|/sigma - |dt|/tau)."""
    return math.exp(-abs(dx) / params.sigma - abs(dt) / params.tau)


def kernel_weights(
    x_i: float, t_i: float, xs: np.ndarray, ts: np.ndarray, params: EstimatorParams
) -> np.ndarray:
    """Normalized weights of readings at (xs, ts) for the point (x_i, t_i).

    Returns an empty array when the total kernel mass is below ``z_floor``.
    """
    phi = np.exp(-np.abs(x_i - xs) / params.sigma - np.abs(t_i - ts) / params.tau)
    z = phi.sum()
    if z < params.z_floor:
        return np.empty(0)
    return phi / z


def estimate_speed(
    x_i: float, t_i: float, readings: Iterable[ProbeReading] | ProbeArrays, params: EstimatorParams
) -> float:
    """Kernel-weighted mean of probe speeds around (x_i, t_i), clamped to [0, v_f].

    With no informative data (total kernel mass below ``z_floor``) the
    estimate falls back to free-flow speed.
    """
    arrays = readings if isinstance(readings, ProbeArrays) else ProbeArrays.from_readings(readings)
    if len(arrays) == 0:
        return params.free_flow_speed
    phi = np.exp(-np.abs(x_i - arrays.x) / params.sigma - np.abs(t_i - arrays.t) / params.tau)
    z = phi.sum()
    if z < params.z_floor:
        return params.free_flow_speed
    v = float(np.dot(phi, arrays.v) / z)
    return min(max(v, 0.0), params.free_flow_speed)


def estimate_speeds(
    centers: np.ndarray, t_i: float, arrays: ProbeArrays, params: EstimatorParams
) -> np.ndarray:
    """:func:`estimate_speed` evaluated at every position in ``centers``."""
    centers = np.asarray(centers, dtype=float)
    out = np.full(centers.shape, params.free_flow_speed)
    if len(arrays) == 0:
        return out
    phi = np.exp(
        -np.abs(centers[:, None] - arrays.x[None, :]) / params.sigma
        - np.abs(t_i - arrays.t)[None, :] / params.tau
    )
    z = phi.sum(axis=1)
    informed = z >= params.z_floor
    if informed.any():
        v = (phi[informed] @ arrays.v) / z[informed]
        out[informed] = np.clip(v, 0.0, params.free_flow_speed)
    return out


def speed_to_density(v: float, params: EstimatorParams) -> float:
    """Newell-Franklin density for speed ``v`` (veh/m)."""
    v_f = params.free_flow_speed
    if v < -_DOMAIN_TOL * v_f or v > v_f * (1 + _DOMAIN_TOL):
        raise EstimationDomainError(f"speed {v} m/s outside [0, {v_f}]")
    if v >= v_f * (1 - FREE_FLOW_EPS):
        return 0.0
    v = max(v, 0.0)
    rho = params.jam_density / (1.0 - (v_f / params.wave_speed) * math.log1p(-v / v_f))
    return 0.0 if rho < DENSITY_SNAP else rho


def speeds_to_densities(v: np.ndarray, params: EstimatorParams) -> np.ndarray:
    """Vectorized :func:`speed_to_density`."""
    v = np.asarray(v, dtype=float)
    v_f = params.free_flow_speed
    if np.any(v < -_DOMAIN_TOL * v_f) or np.any(v > v_f * (1 + _DOMAIN_TOL)):
        raise EstimationDomainError(f"speeds outside [0, {v_f}]")
    free = v >= v_f * (1 - FREE_FLOW_EPS)
    vc = np.clip(np.where(free, 0.0, v), 0.0, None)
    rho = params.jam_density / (1.0 - (v_f / params.wave_speed) * np.log1p(-vc / v_f))
    rho[free | (rho < DENSITY_SNAP)] = 0.0
    return rho


def density_to_speed(rho: float, params: EstimatorParams) -> float:
    """Inverse of :func:`speed_to_density`."""
    jam = params.jam_density
    if rho < -_DOMAIN_TOL * jam or rho > jam * (1 + _DOMAIN_TOL):
        raise EstimationDomainError(f"density {rho} veh/m outside [0, {jam}]")
    if rho <= 0:
        return params.free_flow_speed
    rho = min(rho, jam)
    v_f = params.free_flow_speed
    return -v_f * math.expm1((params.wave_speed / v_f) * (1.0 - jam / rho))


# -- probe storage ------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeArrays:
    """Column view of one lane's readings."""

    x: np.ndarray
    t: np.ndarray
    v: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def from_readings(cls, readings: Iterable[ProbeReading]) -> ProbeArrays:
        rows = [(r.x, r.t, r.v) for r in readings]
        if not rows:
            empty = np.empty(0)
            return cls(empty, empty, empty)
        a = np.asarray(rows, dtype=float)
        return cls(a[:, 0].copy(), a[:, 1].copy(), a[:, 2].copy())


class ProbeHistory:
    """Per-lane buffers of recent readings.

    Batches are ingested whole; a reading is kept while its age
    ``t_now - t_k`` is at most ``horizon``.
    """

    def __init__(self, horizon: float, lanes: Iterable[str] | None = None) -> None:
        self.horizon = horizon
        self._lanes: dict[str, deque[ProbeReading]] = {}
        self._allowed = None if lanes is None else frozenset(lanes)
        self._cache: dict[str, ProbeArrays] = {}
        self.last_batch_time: float | None = None

    def ingest(self, batch: Iterable[ProbeReading], t: float | None = None) -> None:
        batch = list(batch)
        staged: dict[str, list[ProbeReading]] = {}
        for r in batch:
            if self._allowed is not None and r.lane not in self._allowed:
                continue
            staged.setdefault(r.lane, []).append(r)
        for lane, readings in staged.items():
            buf = self._lanes.setdefault(lane, deque())
            buf.extend(sorted(readings, key=lambda r: r.t))
            self._cache.pop(lane, None)
        stamp = t if t is not None else max((r.t for r in batch), default=None)
        if stamp is not None:
            self.last_batch_time = stamp

    def prune(self, t_now: float) -> None:
        cutoff = t_now - self.horizon
        for lane, buf in self._lanes.items():
            dropped = False
            while buf and buf[0].t < cutoff:
                buf.popleft()
                dropped = True
            if dropped:
                self._cache.pop(lane, None)

    def readings(self, lane: str) -> list[ProbeReading]:
        return list(self._lanes.get(lane, ()))

    def arrays(self, lane: str) -> ProbeArrays:
        cached = self._cache.get(lane)
        if cached is None:
            cached = ProbeArrays.from_readings(self._lanes.get(lane, ()))
            self._cache[lane] = cached
        return cached

    def __len__(self) -> int:
        return sum(len(b) for b in self._lanes.values())

    def lanes(self) -> Iterator[str]:
        return iter(self._lanes)


# -- fields and queues --------------------------------------------------------------


@dataclass(frozen=True)
class CellField:
    """Per-lane cell speeds (m/s), densities (veh/m) and cell lengths (m) at time ``t``."""

    t: float
    speeds: Mapping[str, np.ndarray] = field(default_factory=dict)
    densities: Mapping[str, np.ndarray] = field(default_factory=dict)
    lengths: Mapping[str, np.ndarray] = field(default_factory=dict)


def estimate_cell_field(
    network: Network,
    history: ProbeHistory,
    t_now: float,
    params: EstimatorParams,
    lanes: Iterable[str] | None = None,
) -> CellField:
    """Speed and density at every cell center of ``lanes`` (default: all lanes).

    Only readings from the same lane contribute to a cell. ``history`` is
    expected to be pruned to the horizon already.
    """
    lane_ids = list(network.lanes) if lanes is None else list(lanes)
    speeds: dict[str, np.ndarray] = {}
    densities: dict[str, np.ndarray] = {}
    lengths: dict[str, np.ndarray] = {}
    for lane_id in lane_ids:
        centers, sizes = lane_geometry(network.lanes[lane_id])
        v = estimate_speeds(centers, t_now, history.arrays(lane_id), params)
        speeds[lane_id] = v
        densities[lane_id] = speeds_to_densities(v, params)
        lengths[lane_id] = sizes
    return CellField(t=t_now, speeds=speeds, densities=densities, lengths=lengths)


_GEOMETRY: dict[int, tuple[Lane, np.ndarray, np.ndarray]] = {}


def lane_geometry(lane: Lane) -> tuple[np.ndarray, np.ndarray]:
    """Cell centers and cell lengths of ``lane`` as arrays."""
    hit = _GEOMETRY.get(id(lane))
    if hit is None or hit[0] is not lane:
        hit = (
            lane,
            np.array([c.center for c in lane.cells]),
            np.array([c.length for c in lane.cells]),
        )
        _GEOMETRY[id(lane)] = hit
    return hit[1], hit[2]


def link_queue(link: Link, cell_field: CellField) -> float:
    """Vehicles on ``link``: density times cell length, summed over cells and lanes."""
    total = 0.0
    for lane_id in link.lanes:
        total += float(np.dot(cell_field.densities[lane_id], cell_field.lengths[lane_id]))
    return total


# -- probe log replay ----------------------------------------------------------------


def read_probe_log(stream: TextIO) -> Iterator[ProbeReading]:
    """Parse probe readings from JSON lines or ``vehicle,lane,x,t,v`` CSV.

    JSON lines that carry an ``event`` field other than ``probe`` (the
    simulator's event log mixes record kinds) are skipped.
    """
    for lineno, line in enumerate(stream, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("{"):
            rec = json.loads(line)
            if rec.get("event", "probe") != "probe":
                continue
            try:
                yield ProbeReading(rec["vehicle"], str(rec["lane"]), float(rec["x"]), float(rec["t"]), float(rec["v"]))
            except KeyError as exc:
                raise ValueError(f"line {lineno}: probe record missing {exc}") from None
            continue
        parts = [p.strip() for p in line.split(",")]
        if parts[0] == "vehicle":
            continue
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        vid, lane, x, t, v = parts
        yield ProbeReading(int(vid) if vid.isdigit() else vid, lane, float(x), float(t), float(v))


def replay(
    network: Network,
    readings: Iterable[ProbeReading],
    params: EstimatorParams,
    times: Iterable[float] | None = None,
) -> Iterator[tuple[CellField, dict[str, float]]]:
    """Replay a probe log batch by batch, yielding the field and link queues.

    Readings sharing a timestamp form one batch. Fields are evaluated at
    each batch time, or at ``times`` when given.
    """
    by_time: dict[float, list[ProbeReading]] = {}
    for r in readings:
        by_time.setdefault(r.t, []).append(r)
    batch_times = sorted(by_time)
    eval_times = batch_times if times is None else sorted(times)
    history = ProbeHistory(params.horizon)
    pending = iter(batch_times)
    nxt = next(pending, None)
    for t in eval_times:
        while nxt is not None and nxt <= t:
            history.ingest(by_time[nxt], t=nxt)
            nxt = next(pending, None)
        history.prune(t)
        fld = estimate_cell_field(network, history, t, params)
        queues = {lid: link_queue(link, fld) for lid, link in network.links.items()}
        yield fld, queues


def load_probe_log(path: str | Path) -> list[ProbeReading]:
    with open(path) as fh:
        return list(read_probe_log(fh))
