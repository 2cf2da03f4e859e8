"""Tick-based microscopic simulator.

Vehicles follow Newell's simplified car-following model built from the
triangular fundamental diagram (v_f, w, rho_jam): a follower's position at
``t + dt`` is the smaller of its free-flow advance and its leader's
position ``tau_r`` earlier minus the jam spacing ``delta``, with
``tau_r = 1 / (w * rho_jam)`` and ``delta = 1 / rho_jam``. A stop line with
no right of way acts as a stationary leader. Crossing an intersection is
instantaneous; each movement discharges at most one vehicle per saturation
headway ``3600 / (mu * lanes * f_t)``.

One tick runs: arrivals -> vehicle advance -> probe reports (at reporting
boundaries) -> controller steps (at slot boundaries) -> metrics.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, TextIO

import numpy as np

from ..control import (
    BackpressureController,
    ControlParams,
    ControllerKind,
    FixedTimeController,
    FixedTimingPlan,
    SignalCommand,
    movement_service,
    optimize_fixed_timing,
    select_phase,
)
from ..estimation import EstimatorParams, ProbeReading
from ..network import Network
from ..units import kmh, per_km
from .demand import DemandGenerator, DemandProfile
from .metrics import MetricsWindow, WindowAccumulator, stopped_queue_length

log = logging.getLogger(__name__)

_EPS = 1e-9


class InvariantViolation(AssertionError):
    """A physical invariant of the simulation was broken."""


class ScenarioError(ValueError):
    """Inconsistent simulation configuration, detected before the run starts."""


@dataclass(frozen=True)
class SimParams:
    dt: float = 0.5
    reporting_interval: float = 10.0
    window: float = 600.0
    penetration: float = 0.0
    free_flow_speed: float = kmh(60.0)
    wave_speed: float = kmh(25.0)
    jam_density: float = per_km(143.0)
    stop_speed: float = kmh(5.0)
    probe_noise: float = 0.0
    check_invariants: bool = False
    record_events: bool = False

    @property
    def reaction_time(self) -> float:
        return 1.0 / (self.wave_speed * self.jam_density)

    @property
    def spacing(self) -> float:
        return 1.0 / self.jam_density


@dataclass(eq=False)
class VehicleState:
    id: int
    route: tuple[str, ...]
    connected: bool
    arrival: float
    free_flow_time: float
    leg: int = 0
    lane: str = ""
    x: float = 0.0
    v: float = 0.0
    entered: float = 0.0
    # positions at previous ticks in current-link coordinates, oldest first
    hist: list[float] = field(default_factory=list)
    nx: float = 0.0
    shift: float = 0.0

    @property
    def link(self) -> str:
        return self.route[self.leg]

    @property
    def next_link(self) -> str | None:
        return self.route[self.leg + 1] if self.leg + 1 < len(self.route) else None


class _Lane:
    __slots__ = ("id", "link", "length", "vehicles", "serves", "is_exit", "stop_line")

    def __init__(self, lane_id: str, link: str, length: float, serves: frozenset[str], is_exit: bool) -> None:
        self.id = lane_id
        self.link = link
        self.length = length
        self.vehicles: list[VehicleState] = []
        self.serves = serves  # downstream links reachable from this lane
        self.is_exit = is_exit
        self.stop_line = not is_exit


class _Movement:
    __slots__ = ("id", "node", "controlled", "headway", "last_cross", "cap", "slot_index", "slot_count", "to_link")

    def __init__(self, mid: str, node: str, controlled: bool, headway: float, cap: int, to_link: str) -> None:
        self.id = mid
        self.node = node
        self.controlled = controlled
        self.headway = headway
        self.last_cross = -math.inf
        self.cap = cap
        self.slot_index = -1
        self.slot_count = 0
        self.to_link = to_link


class _Signal:
    __slots__ = ("phase", "movements", "green_from", "carried")

    def __init__(self) -> None:
        self.phase: str | None = None
        self.movements: frozenset[str] = frozenset()
        self.green_from = math.inf
        # movements green in both the old and the new phase keep flowing
        # through the lost time
        self.carried: frozenset[str] = frozenset()

    def flowing(self, t: float) -> frozenset[str]:
        return self.movements if t >= self.green_from - _EPS else self.carried


@dataclass
class Decision:
    t: float
    intersection: str
    phase: str
    perfect_phase: str | None = None


@dataclass
class ScenarioResult:
    windows: list[MetricsWindow]
    vehicle_counts: list[tuple[float, int, int]]
    decisions: list[Decision]
    events: list[dict[str, Any]] | None
    arrived: int
    exited: int
    in_network: int
    buffered: int
    stale_slots: int = 0

    def summary(self) -> dict[str, float]:
        completed = sum(w.completed for w in self.windows)
        delay = sum(w.avg_delay * w.completed for w in self.windows)
        return {
            "mean_delay": delay / completed if completed else 0.0,
            "throughput": float(sum(w.throughput for w in self.windows)),
            "peak_max_queue": max((w.max_queue for w in self.windows), default=0.0),
            "arrived": float(self.arrived),
            "in_network_end": float(self.in_network),
            "buffered_end": float(self.buffered),
        }


class Simulation:
    def __init__(
        self,
        network: Network,
        demand: DemandProfile,
        controllers: Mapping[str, ControllerKind | str],
        params: SimParams = SimParams(),
        control: ControlParams = ControlParams(),
        estimator: EstimatorParams | None = None,
        seed: int = 0,
        fixed_plans: Mapping[str, FixedTimingPlan] | None = None,
        plan_horizon: float = 3600.0,
    ) -> None:
        self.network = network
        self.params = params
        self.control = control
        self.estimator = estimator or EstimatorParams.for_reporting_interval(params.reporting_interval)
        self._check_config(controllers)
        self.generator = DemandGenerator(network, demand, seed, params.penetration)
        self.demand = demand

        p = params
        self.dt = p.dt
        self.vf_dt = p.free_flow_speed * p.dt
        self.delta = p.spacing
        # leader position is read this many ticks before the current tick
        self.lag = max(0.0, (p.reaction_time - p.dt) / p.dt)
        self.hist_len = int(math.ceil(self.lag)) + 1
        self.report_every = self._ticks(p.reporting_interval, "reporting interval")
        self.slot_every = self._ticks(control.slot, "control slot")
        self.window_every = self._ticks(p.window, "metrics window")

        self.lanes: dict[str, _Lane] = {}
        self.link_lanes: dict[str, list[_Lane]] = {}
        for lid, link in network.links.items():
            rows = []
            for lane_id in link.lanes:
                lane = network.lanes[lane_id]
                serves = frozenset(network.movements[m].to_link for m in lane.movements)
                rt = _Lane(lane_id, lid, link.length, serves, link.is_exit)
                self.lanes[lane_id] = rt
                rows.append(rt)
            self.link_lanes[lid] = rows
        self.lane_order = list(self.lanes.values())
        self.link_count = {lid: 0 for lid in network.links}
        self.capacity = {lid: p.jam_density * network.lane_meters(lid) for lid in network.links}

        self.movements: dict[tuple[str, str], _Movement] = {}
        for m in network.movements.values():
            rate = control.saturation_flow * m.lanes * m.turn_factor
            cap = math.ceil(rate * control.slot / 3600.0 - 1e-9)
            self.movements[(m.from_link, m.to_link)] = _Movement(
                m.id, m.intersection, m.controlled, 3600.0 / rate, cap, m.to_link
            )

        self.signals = {nid: _Signal() for nid in network.intersections}
        self.kinds = {nid: ControllerKind(controllers[nid]) for nid in network.intersections}
        self.controllers: dict[str, Any] = {}
        self.bp_eq_nodes: list[str] = []
        plans = dict(fixed_plans or {})
        missing = [n for n, k in self.kinds.items() if k is ControllerKind.FIXED and n not in plans]
        if missing:
            horizon = plan_horizon
            rates = {l: demand.mean_rate(l, horizon) for l in network.entry_links}
            optimized = optimize_fixed_timing(network, rates, self.generator.turning, control, p.free_flow_speed)
            for n in missing:
                plans[n] = optimized[n]
        self.plans = plans
        for nid, kind in self.kinds.items():
            if kind is ControllerKind.FIXED:
                self.controllers[nid] = FixedTimeController(nid, plans[nid])
            else:
                est = self.estimator if kind is ControllerKind.BP_EQ else None
                self.controllers[nid] = BackpressureController(network.local_view(nid), nid, control, est)
                if kind is ControllerKind.BP_EQ:
                    self.bp_eq_nodes.append(nid)
        # which nodes hear probes from which link
        self.listeners: dict[str, tuple[str, ...]] = {}
        for lid, link in network.links.items():
            ends = [n for n in (link.downstream, link.upstream) if n in self.bp_eq_nodes]
            self.listeners[lid] = tuple(dict.fromkeys(ends))

        self.noise_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10_000,)))
        self.buffers: dict[str, deque[VehicleState]] = {l: deque() for l in network.entry_links}
        self.tick = 0
        self.arrived = 0
        self.exited = 0
        self.windows: list[MetricsWindow] = []
        self.window = WindowAccumulator(0.0)
        self.vehicle_counts: list[tuple[float, int, int]] = []
        self.decisions: list[Decision] = []
        self.events: list[dict[str, Any]] | None = [] if p.record_events else None
        self.entries_this_tick: dict[str, int] = {}
        self._ff_cache: dict[tuple[str, ...], float] = {}
        self._started = False

    # -- setup ------------------------------------------------------------------------

    def _ticks(self, interval: float, name: str) -> int:
        n = interval / self.params.dt
        if interval <= 0 or abs(n - round(n)) > 1e-9:
            raise ScenarioError(f"{name} {interval} s is not a positive multiple of the {self.params.dt} s step")
        return int(round(n))

    def _check_config(self, controllers: Mapping[str, Any]) -> None:
        p = self.params
        if p.dt <= 0:
            raise ScenarioError("step size must be positive")
        if not 0.0 <= p.penetration <= 1.0:
            raise ScenarioError(f"penetration rate {p.penetration} outside [0, 1]")
        for nid in self.network.intersections:
            if nid not in controllers:
                raise ScenarioError(f"no controller assigned to intersection {nid}")
            try:
                ControllerKind(controllers[nid])
            except ValueError:
                raise ScenarioError(f"unknown controller kind {controllers[nid]!r} at {nid}") from None
        for nid in controllers:
            if nid not in self.network.intersections:
                raise ScenarioError(f"controller assigned to unknown intersection {nid}")

    @property
    def t(self) -> float:
        return self.tick * self.dt

    def _free_flow_time(self, route: tuple[str, ...]) -> float:
        ff = self._ff_cache.get(route)
        if ff is None:
            ff = math.fsum(self.network.links[l].length for l in route) / self.params.free_flow_speed
            self._ff_cache[route] = ff
        return ff

    def _emit(self, rec: dict[str, Any]) -> None:
        if self.events is not None:
            self.events.append(rec)

    # -- lanes ------------------------------------------------------------------------

    def _pick_lane(self, link: str, after: str | None, room_of) -> tuple[_Lane | None, float]:
        """Lane of ``link`` serving ``after`` with the most room at its upstream end."""
        best, best_room = None, -math.inf
        for lane in self.link_lanes[link]:
            if after is not None and after not in lane.serves:
                continue
            room = room_of(lane)
            if room > best_room + _EPS:
                best, best_room = lane, room
        return best, best_room

    def _room_now(self, lane: _Lane) -> float:
        if not lane.vehicles:
            return lane.length
        return lane.vehicles[-1].x - self.delta

    def _room_next(self, lane: _Lane) -> float:
        if not lane.vehicles:
            return lane.length
        return lane.vehicles[-1].nx - self.delta

    def _enter(self, link: str) -> None:
        if self.params.check_invariants and self.link_count[link] >= self.capacity[link]:
            raise InvariantViolation(f"link {link} admitted a vehicle at spatial capacity")
        self.link_count[link] += 1
        self.entries_this_tick[link] = self.entries_this_tick.get(link, 0) + 1

    # -- one tick -----------------------------------------------------------------------

    def _release_buffers(self, t: float) -> None:
        for link, buf in self.buffers.items():
            while buf:
                veh = buf[0]
                if self.link_count[link] >= self.capacity[link]:
                    break
                lane, room = self._pick_lane(link, veh.next_link, self._room_now)
                if lane is None or room < 0:
                    break
                buf.popleft()
                veh.lane = lane.id
                veh.x = 0.0
                veh.v = min(self.params.free_flow_speed, room / self.dt)
                veh.hist = [0.0]
                veh.entered = t
                lane.vehicles.append(veh)
                self._enter(link)

    def _arrivals(self, t: float) -> None:
        for a in self.generator.spawn(t, self.dt):
            veh = VehicleState(a.id, a.route, a.connected, a.time, self._free_flow_time(a.route))
            self.buffers[a.route[0]].append(veh)
            self.arrived += 1
            self._emit({"t": t, "event": "spawn", "vehicle": a.id, "route": list(a.route), "connected": a.connected})
        self._release_buffers(t)

    def _lagged(self, veh: VehicleState) -> float:
        h = veh.hist
        lag = self.lag
        n = len(h)
        i = lag
        lo = int(i)
        if lo >= n - 1:
            return h[0]
        frac = i - lo
        a = h[n - 1 - lo]
        if frac == 0.0:
            return a
        b = h[n - 2 - lo]
        return a + (b - a) * frac

    def _advance(self, t: float) -> None:
        vf_dt = self.vf_dt
        delta = self.delta
        for lane in self.lane_order:
            vs = lane.vehicles
            if not vs:
                continue
            front = vs[0]
            front.nx = front.x + vf_dt
            for i in range(1, len(vs)):
                veh = vs[i]
                cand = veh.x + vf_dt
                cons = self._lagged(vs[i - 1]) - delta
                if cons < cand:
                    cand = cons if cons > veh.x else veh.x
                veh.nx = cand

        tn = t + self.dt
        signals = self.signals
        for lane in self.lane_order:
            vs = lane.vehicles
            if not vs:
                continue
            front = vs[0]
            L = lane.length
            if lane.is_exit:
                if front.nx >= L:
                    vs.pop(0)
                    self._exit(front, lane, t)
                continue
            if front.nx <= L:
                continue
            nxt = front.route[front.leg + 1]
            mv = self.movements[(lane.link, nxt)]
            ok = True
            if mv.controlled:
                sig = signals[mv.node]
                ok = mv.id in sig.movements and (t >= sig.green_from - _EPS or mv.id in sig.carried)
            if ok and tn - mv.last_cross < mv.headway - _EPS:
                ok = False
            if ok and self.link_count[nxt] >= self.capacity[nxt]:
                ok = False
            target = None
            if ok:
                after = front.route[front.leg + 2] if front.leg + 2 < len(front.route) else None
                target, room = self._pick_lane(nxt, after, self._room_next)
                if target is None or room < 0:
                    ok = False
            if not ok:
                front.nx = L
                continue
            entry = min(front.nx - L, room, target.length)
            vs.pop(0)
            self.link_count[lane.link] -= 1
            self._enter(nxt)
            front.shift = L
            front.nx = entry
            front.leg += 1
            front.lane = target.id
            target.vehicles.append(front)
            mv.last_cross = tn
            self._count_service(mv, t)
            self._emit({"t": tn, "event": "cross", "vehicle": front.id, "movement": mv.id})

        check = self.params.check_invariants
        limit = vf_dt + 1e-7
        hist_len = self.hist_len
        for lane in self.lane_order:
            for veh in lane.vehicles:
                shift = veh.shift
                moved = veh.nx + shift - veh.x
                if check and (moved < -1e-9 or moved > limit):
                    raise InvariantViolation(f"vehicle {veh.id} moved {moved} m in one tick")
                veh.v = moved / self.dt
                h = veh.hist
                if shift:
                    h = [y - shift for y in h]
                    veh.shift = 0.0
                h.append(veh.nx)
                if len(h) > hist_len:
                    del h[0]
                veh.hist = h
                veh.x = veh.nx

    def _count_service(self, mv: _Movement, t: float) -> None:
        slot = int((t + _EPS) // self.control.slot)
        if slot != mv.slot_index:
            mv.slot_index = slot
            mv.slot_count = 0
        mv.slot_count += 1
        if self.params.check_invariants and mv.slot_count > mv.cap:
            raise InvariantViolation(f"movement {mv.id} discharged {mv.slot_count} > {mv.cap} vehicles in one slot")

    def _exit(self, veh: VehicleState, lane: _Lane, t: float) -> None:
        travelled = veh.nx - veh.x
        frac = (lane.length - veh.x) / travelled if travelled > 0 else 1.0
        exit_time = t + self.dt * frac
        delay = max(0.0, exit_time - veh.arrival - veh.free_flow_time)
        self.link_count[lane.link] -= 1
        self.exited += 1
        self.window.trip(delay)
        self._emit({"t": t + self.dt, "event": "exit", "vehicle": veh.id, "delay": delay})

    def _probes(self, t: float) -> None:
        batches: dict[str, list[ProbeReading]] = {n: [] for n in self.bp_eq_nodes}
        noise = self.params.probe_noise
        for lane in self.lane_order:
            listeners = self.listeners[lane.link]
            for veh in lane.vehicles:
                if not veh.connected:
                    continue
                v = veh.v
                if noise > 0:
                    v = min(max(v + self.noise_rng.normal(0.0, noise), 0.0), self.params.free_flow_speed)
                reading = ProbeReading(veh.id, lane.id, veh.x, t, v)
                for n in listeners:
                    batches[n].append(reading)
                if self.events is not None:
                    self._emit({"t": t, "event": "probe", "vehicle": veh.id, "lane": lane.id, "x": veh.x, "v": v})
        for n, batch in batches.items():
            self.controllers[n].ingest(batch, t)

    def _true_counts(self, nid: str) -> dict[str, float]:
        return {l: float(self.link_count[l]) for l in self.network.incident_links(nid)}

    def _control(self, t: float) -> None:
        for nid, ctrl in self.controllers.items():
            kind = self.kinds[nid]
            if kind is ControllerKind.FIXED:
                cmd = ctrl.step(t)
            else:
                counts = self._true_counts(nid)
                perfect = None
                if kind is ControllerKind.BP_EQ:
                    perfect = select_phase(
                        ctrl.node, ctrl.local.movements, {l: counts[l] for l in ctrl.tracked_links},
                        self.control.saturation_flow, self.control.slot, ctrl.current, ctrl.exit_links,
                    )
                cmd = ctrl.step(t, counts)
                self.decisions.append(Decision(t, nid, cmd.phase, perfect))
            self._apply(nid, cmd, t)

    def _apply(self, nid: str, cmd: SignalCommand, t: float) -> None:
        sig = self.signals[nid]
        if cmd.phase != sig.phase or cmd.green_from != sig.green_from:
            if cmd.phase != sig.phase:
                self._emit({"t": t, "event": "phase", "intersection": nid, "phase": cmd.phase, "green_from": cmd.green_from})
            new = self.network.intersections[nid].phase(cmd.phase).movements
            sig.carried = sig.flowing(t) & new if cmd.phase != sig.phase else sig.carried
            sig.phase = cmd.phase
            sig.movements = new
            sig.green_from = cmd.green_from

    def _fixed_signals(self, t: float) -> None:
        for nid, ctrl in self.controllers.items():
            if self.kinds[nid] is ControllerKind.FIXED:
                self._apply(nid, ctrl.step(t), t)

    def _queues(self) -> None:
        spacing = self.delta
        stop = self.params.stop_speed
        best = 0.0
        for lane in self.lane_order:
            vs = lane.vehicles
            if not lane.stop_line or not vs:
                continue
            front = vs[0]
            if front.v >= stop or front.x < lane.length - spacing:
                continue
            q = stopped_queue_length([v.x for v in vs], [v.v for v in vs], lane.length, spacing, stop)
            if q > best:
                best = q
        self.window.queue(best)

    def _check(self) -> None:
        in_net = sum(len(l.vehicles) for l in self.lane_order)
        buffered = sum(len(b) for b in self.buffers.values())
        if self.arrived != self.exited + in_net + buffered:
            raise InvariantViolation(
                f"conservation broken: {self.arrived} arrived != {self.exited} exited + {in_net} + {buffered}"
            )
        vf = self.params.free_flow_speed
        for lane in self.lane_order:
            vs = lane.vehicles
            for i, veh in enumerate(vs):
                if not -1e-9 <= veh.x <= lane.length + 1e-9:
                    raise InvariantViolation(f"vehicle {veh.id} at {veh.x} outside lane {lane.id}")
                if not -1e-9 <= veh.v <= vf + 1e-7:
                    raise InvariantViolation(f"vehicle {veh.id} speed {veh.v} outside [0, v_f]")
                if i and veh.x >= vs[i - 1].x - self.delta + 1e-6:
                    raise InvariantViolation(
                        f"collision on lane {lane.id}: {veh.id} at {veh.x} behind {vs[i - 1].id} at {vs[i - 1].x}"
                    )
        for lid, n in self.link_count.items():
            if n != sum(len(l.vehicles) for l in self.link_lanes[lid]):
                raise InvariantViolation(f"link {lid} vehicle count out of sync")

    # -- driver ------------------------------------------------------------------------------

    def _start(self) -> None:
        self._started = True
        t = 0.0
        self._probes(t)
        self._control(t)
        self._record_count(t)

    def _record_count(self, t: float) -> None:
        in_net = sum(self.link_count.values())
        buffered = sum(len(b) for b in self.buffers.values())
        self.vehicle_counts.append((t, in_net, buffered))

    def step(self) -> None:
        """Advance one tick."""
        if not self._started:
            self._start()
        t = self.t
        self.entries_this_tick = {}
        self._arrivals(t)
        self._advance(t)
        self.tick += 1
        tn = self.t
        if self.tick % self.report_every == 0:
            self._probes(tn)
        if self.tick % self.slot_every == 0:
            self._control(tn)
            self._record_count(tn)
        else:
            self._fixed_signals(tn)
        self._queues()
        if self.params.check_invariants:
            self._check()
        if self.tick % self.window_every == 0:
            rate = self.demand.mean_rate_between(self.window.start, tn)
            self.windows.append(self.window.close(tn, rate))
            self.window = WindowAccumulator(tn)

    def run(self, duration: float) -> ScenarioResult:
        ticks = self._ticks(duration, "duration") if duration > 0 else 0
        if duration > 0 and ticks % self.window_every:
            raise ScenarioError(f"metrics window {self.params.window} s does not divide duration {duration} s")
        for _ in range(ticks):
            self.step()
        stale = sum(getattr(c, "stale_slots", 0) for c in self.controllers.values())
        return ScenarioResult(
            windows=list(self.windows),
            vehicle_counts=list(self.vehicle_counts),
            decisions=list(self.decisions),
            events=self.events,
            arrived=self.arrived,
            exited=self.exited,
            in_network=sum(self.link_count.values()),
            buffered=sum(len(b) for b in self.buffers.values()),
            stale_slots=stale,
        )


def run_scenario(
    network: Network,
    demand: DemandProfile,
    controllers: Mapping[str, ControllerKind | str] | ControllerKind | str,
    params: SimParams = SimParams(),
    seed: int = 0,
    duration: float = 3600.0,
    control: ControlParams = ControlParams(),
    estimator: EstimatorParams | None = None,
    fixed_plans: Mapping[str, FixedTimingPlan] | None = None,
) -> ScenarioResult:
    """Run one seeded scenario from an empty network.

    ``controllers`` is either one kind for every intersection or a mapping
    from intersection id to kind.
    """
    if isinstance(controllers, (str, ControllerKind)):
        controllers = {nid: controllers for nid in network.intersections}
    if duration < 0:
        raise ScenarioError("duration cannot be negative")
    sim = Simulation(
        network, demand, controllers, params, control, estimator, seed, fixed_plans,
        plan_horizon=duration if duration > 0 else 3600.0,
    )
    return sim.run(duration)


def write_events(events: list[dict[str, Any]], stream: TextIO) -> None:
    for rec in events:
        stream.write(json.dumps(rec, sort_keys=True) + "\n")
