"""Decentralized signal controllers: backpressure (perfect or estimated queues)
and a fixed-timing baseline with a Webster-style plan optimizer.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .estimation import (
    CellField,
    EstimatorParams,
    ProbeHistory,
    ProbeReading,
    estimate_cell_field,
    link_queue,
)
from .network import Intersection, Movement, Network, Phase

log = logging.getLogger(__name__)

_TIE_RTOL = 1e-9


class ControlError(ValueError):
    """Controller misconfiguration or missing queue data."""


class ControllerKind(str, Enum):
    BP_PERFECT = "bp_perfect"
    BP_EQ = "bp_eq"
    FIXED = "fixed"


@dataclass(frozen=True)
class ControlParams:
    slot: float = 10.0
    yellow: float = 3.0
    all_red: float = 2.0
    saturation_flow: float = 1800.0

    def __post_init__(self) -> None:
        if self.slot <= 0:
            raise ControlError("slot duration must be positive")
        if self.saturation_flow <= 0:
            raise ControlError("saturation flow must be positive")
        if self.yellow < 0 or self.all_red < 0:
            raise ControlError("yellow and all-red times cannot be negative")
        if self.lost_time >= self.slot:
            raise ControlError(f"lost time {self.lost_time} s must be shorter than the {self.slot} s slot")

    @property
    def lost_time(self) -> float:
        return self.yellow + self.all_red


@dataclass(frozen=True)
class QueueSnapshot:
    queues: Mapping[str, float]
    t: float = 0.0

    def __post_init__(self) -> None:
        for link, q in self.queues.items():
            if q < 0:
                raise ControlError(f"negative queue {q} on link {link}")

    def __getitem__(self, link: str) -> float:
        try:
            return self.queues[link]
        except KeyError:
            raise ControlError(f"queue snapshot has no entry for link {link}") from None

    def scaled(self, c: float) -> QueueSnapshot:
        return QueueSnapshot({k: v * c for k, v in self.queues.items()}, self.t)


@dataclass(frozen=True)
class SignalCommand:
    """Phase to show and the time its movements may start to discharge."""

    phase: str
    green_from: float
    switched: bool = False


def movement_service(movement: Movement, phase: Phase, saturation_flow: float, slot: float) -> float:
    """Vehicles the movement can discharge in one slot under ``phase``."""
    if movement.id not in phase.movements:
        return 0.0
    return saturation_flow * movement.lanes * movement.turn_factor * slot / 3600.0


def movement_weight(
    movement: Movement, queues: QueueSnapshot | Mapping[str, float], exit_links: Iterable[str] = ()
) -> float:
    """Upstream minus downstream queue. Exit links count as empty."""
    if not isinstance(queues, QueueSnapshot):
        queues = QueueSnapshot(queues)
    upstream = queues[movement.from_link]
    downstream = 0.0 if movement.to_link in set(exit_links) else queues[movement.to_link]
    return upstream - downstream


def phase_pressures(
    intersection: Intersection,
    movements: Mapping[str, Movement],
    queues: QueueSnapshot | Mapping[str, float],
    saturation_flow: float,
    slot: float,
    exit_links: Iterable[str] = (),
) -> dict[str, float]:
    """Pressure of every phase: sum of weight times service over its movements."""
    if not isinstance(queues, QueueSnapshot):
        queues = QueueSnapshot(queues)
    exits = frozenset(exit_links)
    weights: dict[str, float] = {}
    out = {}
    for phase in intersection.phases:
        total = 0.0
        for mid in sorted(phase.movements):
            m = movements[mid]
            if mid not in weights:
                weights[mid] = movement_weight(m, queues, exits)
            total += weights[mid] * movement_service(m, phase, saturation_flow, slot)
        out[phase.id] = total
    return out


def select_phase(
    intersection: Intersection,
    movements: Mapping[str, Movement],
    queues: QueueSnapshot | Mapping[str, float],
    saturation_flow: float = 1800.0,
    slot: float = 10.0,
    current: str | None = None,
    exit_links: Iterable[str] = (),
) -> str:
    """Max-pressure phase. Ties keep ``current`` if it is among the maximizers,
    otherwise the earliest phase in the intersection's table wins.
    """
    if not intersection.phases:
        raise ControlError(f"intersection {intersection.id} has an empty phase set")
    pressures = phase_pressures(intersection, movements, queues, saturation_flow, slot, exit_links)
    best = max(pressures.values())
    tol = _TIE_RTOL * abs(best)
    tied = [p.id for p in intersection.phases if best - pressures[p.id] <= tol]
    if current in tied:
        return current
    return tied[0]


# -- backpressure controller -----------------------------------------------------------


class BackpressureController:
    """Per-intersection backpressure controller.

    In perfect mode :meth:`step` is handed true link vehicle counts. In
    estimated mode the controller keeps its own probe history, fed through
    :meth:`ingest`, and turns it into link queues at every slot.
    """

    def __init__(
        self,
        local: Network,
        intersection_id: str,
        params: ControlParams = ControlParams(),
        estimator: EstimatorParams | None = None,
    ) -> None:
        if intersection_id not in local.intersections:
            raise ControlError(f"unknown intersection {intersection_id}")
        self.local = local
        self.node = local.intersections[intersection_id]
        self.params = params
        self.estimator = estimator
        self.kind = ControllerKind.BP_PERFECT if estimator is None else ControllerKind.BP_EQ
        self.exit_links = frozenset(l for l in self.node.outgoing if local.links[l].is_exit)
        # exit links are never estimated: their queue is zero by convention
        self.tracked_links = tuple(l for l in self.node.incoming + self.node.outgoing if l not in self.exit_links)
        self.tracked_lanes = tuple(lane for l in self.tracked_links for lane in local.links[l].lanes)
        self.history = ProbeHistory(estimator.horizon, self.tracked_lanes) if estimator else None
        self.current: str | None = None
        self.slot_index = -1
        self.last_field: CellField | None = None
        self.last_queues: QueueSnapshot | None = None
        self.stale_slots = 0

    def ingest(self, batch: Sequence[ProbeReading], t: float) -> None:
        if self.history is not None:
            self.history.ingest(batch, t=t)

    def estimated_queues(self, t: float) -> QueueSnapshot:
        assert self.history is not None and self.estimator is not None
        last = self.history.last_batch_time
        if self.last_field is not None and (last is None or t - last > self.params.slot + 1e-9):
            self.stale_slots += 1
            log.warning(
                "intersection %s: newest probe batch at %s is older than one slot at t=%s; reusing last field",
                self.node.id, last, t,
            )
            fld = self.last_field
        else:
            self.history.prune(t)
            fld = estimate_cell_field(self.local, self.history, t, self.estimator, self.tracked_lanes)
            self.last_field = fld
        queues = {l: link_queue(self.local.links[l], fld) for l in self.tracked_links}
        return QueueSnapshot(queues, t)

    def decide(self, queues: QueueSnapshot) -> str:
        return select_phase(
            self.node,
            self.local.movements,
            queues,
            self.params.saturation_flow,
            self.params.slot,
            self.current,
            self.exit_links,
        )

    def step(self, t: float, counts: Mapping[str, float] | None = None) -> SignalCommand:
        """Choose the phase for the slot starting at ``t``.

        ``counts`` (true vehicles per incident link) is required in perfect
        mode and ignored in estimated mode.
        """
        if self.kind is ControllerKind.BP_EQ:
            queues = self.estimated_queues(t)
        else:
            if counts is None:
                raise ControlError("perfect-queue backpressure needs link counts")
            queues = QueueSnapshot({l: float(counts[l]) for l in self.tracked_links}, t)
        self.last_queues = queues
        chosen = self.decide(queues)
        self.slot_index += 1
        switched = self.current is not None and chosen != self.current
        green_from = t + (self.params.lost_time if switched else 0.0)
        self.current = chosen
        return SignalCommand(chosen, green_from, switched)


# -- fixed timing ------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedTimingPlan:
    phases: tuple[str, ...]
    greens: tuple[float, ...]
    lost_time: float = 5.0
    offset: float = 0.0
    oversaturated: bool = False
    flow_ratios: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if not self.phases or len(self.phases) != len(self.greens):
            raise ControlError("fixed plan needs one green per phase")
        if any(g <= 0 for g in self.greens):
            raise ControlError("fixed plan greens must be positive")
        if self.lost_time < 0:
            raise ControlError("fixed plan lost time cannot be negative")

    @property
    def cycle(self) -> float:
        return math.fsum(self.greens) + self.lost_time * len(self.greens)


def fixed_timing_step(plan: FixedTimingPlan, t: float) -> SignalCommand:
    """Phase shown at time ``t``; each green is followed by its lost time.

    During a lost-time interval the command already names the next phase
    with ``green_from`` at the end of the interval.
    """
    cycle = plan.cycle
    cycle_start = math.floor((t + plan.offset) / cycle) * cycle - plan.offset
    local = (t + plan.offset) - math.floor((t + plan.offset) / cycle) * cycle
    start = 0.0
    n = len(plan.phases)
    for i, green in enumerate(plan.greens):
        if local < start + green - 1e-9:
            return SignalCommand(plan.phases[i], cycle_start + start)
        start += green + plan.lost_time
        if local < start - 1e-9:
            j = (i + 1) % n
            nxt = cycle_start + (start if j else cycle)
            return SignalCommand(plan.phases[j], nxt)
    return SignalCommand(plan.phases[0], cycle_start + cycle)


class FixedTimeController:
    kind = ControllerKind.FIXED

    def __init__(self, intersection_id: str, plan: FixedTimingPlan) -> None:
        self.intersection_id = intersection_id
        self.plan = plan
        self.current: str | None = None

    def step(self, t: float, counts: Mapping[str, float] | None = None) -> SignalCommand:
        cmd = fixed_timing_step(self.plan, t)
        switched = self.current is not None and cmd.phase != self.current
        self.current = cmd.phase
        return SignalCommand(cmd.phase, cmd.green_from, switched)


# -- plan optimization ----------------------------------------------------------------------

MIN_CYCLE = 40.0
MAX_CYCLE = 120.0
MIN_GREEN = 5.0
_PREFERRED_SEQUENCE = ("NS_L", "NS_T", "EW_L", "EW_T")


def link_flows(network: Network, entry_rates: Mapping[str, float], turning: Mapping[str, Mapping[str, float]]) -> dict[str, float]:
    """Steady-state flow (veh/h) on every link from entry rates and turning ratios."""
    ids = list(network.links)
    index = {lid: i for i, lid in enumerate(ids)}
    n = len(ids)
    transfer = np.zeros((n, n))
    for a, ratios in turning.items():
        for b, r in ratios.items():
            if a in index and b in index:
                transfer[index[b], index[a]] += r
    inflow = np.array([entry_rates.get(lid, 0.0) for lid in ids])
    flows = np.linalg.solve(np.eye(n) - transfer, inflow)
    return {lid: float(max(flows[index[lid]], 0.0)) for lid in ids}


def _plan_phases(node: Intersection) -> list[Phase]:
    by_id = {p.id: p for p in node.phases}
    controlled = set().union(*(p.movements for p in node.phases)) if node.phases else set()
    preferred = [by_id[p] for p in _PREFERRED_SEQUENCE if p in by_id]
    if preferred and set().union(*(p.movements for p in preferred)) == controlled:
        return preferred
    chosen: list[Phase] = []
    uncovered = set(controlled)
    while uncovered:
        best = max(node.phases, key=lambda p: len(p.movements & uncovered))
        chosen.append(best)
        uncovered -= best.movements
    return chosen


def webster_split(
    flow_ratios: Sequence[float],
    lost_time_per_phase: float,
    min_cycle: float = MIN_CYCLE,
    max_cycle: float = MAX_CYCLE,
    cycle: float | None = None,
) -> tuple[float, tuple[float, ...], bool]:
    """Cycle and greens from Webster's formula; returns (cycle, greens, oversaturated).

    Greens are proportional to the critical flow ratios and rounded to whole
    seconds. ``cycle`` forces a common cycle length.
    """
    n = len(flow_ratios)
    total_lost = lost_time_per_phase * n
    y = math.fsum(flow_ratios)
    oversaturated = y >= 1.0
    if cycle is None:
        if oversaturated:
            cycle = max_cycle
        else:
            cycle = (1.5 * total_lost + 5.0) / (1.0 - y)
        cycle = float(round(min(max(cycle, min_cycle), max_cycle)))
    effective = cycle - total_lost
    if y <= 0:
        shares = [1.0 / n] * n
    else:
        shares = [r / y for r in flow_ratios]
    greens = [effective * s for s in shares]
    # enforce a minimum green by taking time from the others proportionally
    short = [g < MIN_GREEN for g in greens]
    if any(short) and not all(short):
        spare = effective - MIN_GREEN * sum(short)
        rest = math.fsum(s for s, flag in zip(shares, short) if not flag)
        greens = [MIN_GREEN if flag else spare * s / rest for s, flag in zip(shares, short)]
    rounded = [float(round(g)) for g in greens]
    rounded[-1] = effective - math.fsum(rounded[:-1])
    return cycle, tuple(rounded), oversaturated


def optimize_fixed_timing(
    network: Network,
    entry_rates: Mapping[str, float],
    turning: Mapping[str, Mapping[str, float]],
    params: ControlParams = ControlParams(),
    free_flow_speed: float = 60.0 / 3.6,
    coordinate: bool = True,
) -> dict[str, FixedTimingPlan]:
    """Webster fixed-timing plan per intersection.

    Critical flow ratio of a phase is the largest flow / saturation-flow
    ratio among its movements. With several intersections and
    ``coordinate`` set, all plans share the longest cycle and offsets follow
    free-flow travel time along the heaviest through corridor.
    """
    flows = link_flows(network, entry_rates, turning)
    lost = params.lost_time
    raw: dict[str, tuple[list[Phase], list[float]]] = {}
    for nid, node in network.intersections.items():
        phases = _plan_phases(node)
        ratios = []
        for p in phases:
            worst = 0.0
            for mid in p.movements:
                m = network.movements[mid]
                q = flows[m.from_link] * turning.get(m.from_link, {}).get(m.to_link, 0.0)
                worst = max(worst, q / (params.saturation_flow * m.lanes * m.turn_factor))
            ratios.append(worst)
        raw[nid] = (phases, ratios)

    plans = {}
    cycles = {nid: webster_split(r, lost)[0] for nid, (_, r) in raw.items() if r}
    common = max(cycles.values()) if coordinate and len(cycles) > 1 else None
    offsets = _corridor_offsets(network, flows, turning, common, free_flow_speed) if common else {}
    for nid, (phases, ratios) in raw.items():
        if not phases:
            continue
        cycle, greens, over = webster_split(ratios, lost, cycle=common)
        plans[nid] = FixedTimingPlan(
            phases=tuple(p.id for p in phases),
            greens=greens,
            lost_time=lost,
            offset=offsets.get(nid, 0.0),
            oversaturated=over,
            flow_ratios=tuple(ratios),
        )
    return plans


def _corridor_offsets(
    network: Network,
    flows: Mapping[str, float],
    turning: Mapping[str, Mapping[str, float]],
    cycle: float,
    free_flow_speed: float,
) -> dict[str, float]:
    entries = [l for l in network.entry_links if network.links[l].downstream is not None]
    if not entries:
        return {}
    link = max(entries, key=lambda l: (flows[l], l))
    offsets: dict[str, float] = {}
    travel = 0.0
    while True:
        node = network.links[link].downstream
        if node is None or node in offsets:
            break
        travel += network.links[link].length / free_flow_speed
        offsets[node] = (-travel) % cycle
        nxt = [
            m for m in network.movements_from(link)
            if m.controlled and m.turn.value == "through"
        ]
        if not nxt:
            break
        link = nxt[0].to_link
    base = next(iter(offsets.values()))
    return {n: (o - base) % cycle for n, o in offsets.items()}


def capacity_scale(
    network: Network,
    entry_rates: Mapping[str, float],
    turning: Mapping[str, Mapping[str, float]],
    params: ControlParams = ControlParams(),
    max_cycle: float = MAX_CYCLE,
) -> float:
    """Factor by which ``entry_rates`` can grow before some node runs out of green.

    A node's usable green share is what a ``max_cycle`` fixed plan leaves
    after one lost time per phase; its load is the sum of the critical flow
    ratios of the phases that cover its movements. The estimated capacity
    is the demand scaled by the smallest usable-share / load over nodes.
    """
    flows = link_flows(network, entry_rates, turning)
    best = math.inf
    for node in network.intersections.values():
        phases = _plan_phases(node)
        if not phases:
            continue
        y = 0.0
        for p in phases:
            worst = 0.0
            for mid in p.movements:
                m = network.movements[mid]
                q = flows[m.from_link] * turning.get(m.from_link, {}).get(m.to_link, 0.0)
                worst = max(worst, q / (params.saturation_flow * m.lanes * m.turn_factor))
            y += worst
        if y > 0:
            best = min(best, (1.0 - len(phases) * params.lost_time / max_cycle) / y)
    return best
