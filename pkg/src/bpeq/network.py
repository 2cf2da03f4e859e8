"""Static road network: links, lanes, cells, movements, phases, intersections.

A network is built once from a structured document (a dict, usually loaded
from YAML or JSON) and is read-only afterwards. The document schema:

.. code-block:: yaml

    cell_length: 10            # default uniform cell length, meters
    links:
      - id: N_in
        length: 500
        lanes: 3               # count, or an explicit list of lane ids
        from: null             # upstream intersection id (null = boundary)
        to: I1                 # downstream intersection id (null = boundary)
    lanes:                     # optional per-lane overrides
      - id: N_in/0
        cells: [10, 10, ...]   # lengths, or [[start, end], ...] intervals
        movements: [N_in>E_out]
    movements:
      - from: N_in
        to: S_out
        turn: through          # through | left | right
        lanes: 1
        turn_factor: 1.0       # optional, defaults by turn kind
    conflicts:                 # movement id pairs that may not share green
      - [N_in>S_out, E_in>W_out]
    phases:
      I1: standard             # or a list of {id, movements}
    intersections:
      - id: I1
        approaches: {N: N_in, E: E_in, S: S_in, W: W_in}  # or a list of links per side

``standard`` phases (and the conflict matrix that goes with them) are only
available for four-leg intersections that declare their approaches.
"""

from __future__ import annotations

import itertools
import json
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Any

import yaml

DEFAULT_CELL_LENGTH = 10.0
LEFT_TURN_FACTOR = 0.714
RIGHT_TURN_FACTOR = 0.85
_TILING_TOL = 1e-9

APPROACHES = ("N", "E", "S", "W")
_OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}


class NetworkError(ValueError):
    """A network document failed validation."""


class TurnKind(str, Enum):
    THROUGH = "through"
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class Cell:
    index: int
    length: float
    center: float


@dataclass(frozen=True)
class Lane:
    id: str
    link: str
    index: int
    cells: tuple[Cell, ...]
    movements: tuple[str, ...]

    @property
    def length(self) -> float:
        return math.fsum(c.length for c in self.cells)


@dataclass(frozen=True)
class Link:
    id: str
    length: float
    lanes: tuple[str, ...]
    upstream: str | None
    downstream: str | None
    is_entry: bool
    is_exit: bool


@dataclass(frozen=True)
class Movement:
    id: str
    from_link: str
    to_link: str
    turn: TurnKind
    lanes: int
    turn_factor: float
    intersection: str

    @property
    def controlled(self) -> bool:
        # right turns are never signal controlled
        return self.turn is not TurnKind.RIGHT


@dataclass(frozen=True)
class Phase:
    id: str
    movements: frozenset[str]


@dataclass(frozen=True)
class Intersection:
    id: str
    incoming: tuple[str, ...]
    outgoing: tuple[str, ...]
    movements: tuple[str, ...]
    phases: tuple[Phase, ...]
    conflicts: frozenset[frozenset[str]]
    approaches: Mapping[str, tuple[str, ...]] | None = None

    def phase(self, phase_id: str) -> Phase:
        for p in self.phases:
            if p.id == phase_id:
                return p
        raise KeyError(phase_id)

    def conflicting(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.conflicts


@dataclass(frozen=True)
class Network:
    links: Mapping[str, Link]
    lanes: Mapping[str, Lane]
    movements: Mapping[str, Movement]
    intersections: Mapping[str, Intersection]
    _by_pair: Mapping[tuple[str, str], str] = field(repr=False, compare=False, default_factory=dict)

    def movement_between(self, from_link: str, to_link: str) -> Movement:
        return self.movements[self._by_pair[(from_link, to_link)]]

    def has_movement(self, from_link: str, to_link: str) -> bool:
        return (from_link, to_link) in self._by_pair

    def movements_from(self, link_id: str) -> list[Movement]:
        return [m for m in self.movements.values() if m.from_link == link_id]

    def lane_objects(self, link_id: str) -> list[Lane]:
        return [self.lanes[lid] for lid in self.links[link_id].lanes]

    def lane_meters(self, link_id: str) -> float:
        link = self.links[link_id]
        return link.length * len(link.lanes)

    @property
    def entry_links(self) -> list[str]:
        return [lid for lid, link in self.links.items() if link.is_entry]

    @property
    def exit_links(self) -> frozenset[str]:
        return frozenset(lid for lid, link in self.links.items() if link.is_exit)

    def incident_links(self, intersection_id: str) -> tuple[str, ...]:
        node = self.intersections[intersection_id]
        return node.incoming + node.outgoing

    def local_view(self, intersection_id: str) -> Network:
        """Sub-network holding one intersection and the links touching it.

        Controllers receive this instead of the whole network.
        """
        node = self.intersections[intersection_id]
        link_ids = set(node.incoming) | set(node.outgoing)
        links = {lid: self.links[lid] for lid in self.links if lid in link_ids}
        lanes = {k: v for k, v in self.lanes.items() if v.link in link_ids}
        movements = {m: self.movements[m] for m in node.movements}
        pairs = {(m.from_link, m.to_link): m.id for m in movements.values()}
        return Network(
            links=MappingProxyType(links),
            lanes=MappingProxyType(lanes),
            movements=MappingProxyType(movements),
            intersections=MappingProxyType({intersection_id: node}),
            _by_pair=MappingProxyType(pairs),
        )


# -- tiling -------------------------------------------------------------------


def uniform_cells(length: float, cell_length: float = DEFAULT_CELL_LENGTH) -> tuple[Cell, ...]:
    """Tile ``length`` with cells of ``cell_length``; the last cell takes the remainder."""
    if length <= 0 or cell_length <= 0:
        raise NetworkError("link and cell lengths must be positive")
    count = max(1, int(math.floor(length / cell_length + _TILING_TOL)))
    sizes = [cell_length] * count
    sizes[-1] = length - cell_length * (count - 1)
    return _cells_from_lengths(sizes)


def _cells_from_lengths(sizes: Iterable[float]) -> tuple[Cell, ...]:
    cells = []
    start = 0.0
    for i, d in enumerate(sizes):
        cells.append(Cell(index=i, length=float(d), center=start + d / 2.0))
        start += d
    return tuple(cells)


def _explicit_cells(spec: list[Any], link: Link, lane_id: str) -> tuple[Cell, ...]:
    if not spec:
        raise NetworkError(f"lane {lane_id}: empty cell list")
    if all(isinstance(c, (list, tuple)) for c in spec):
        intervals = sorted((float(a), float(b)) for a, b in spec)
        cursor = 0.0
        sizes = []
        for a, b in intervals:
            if b <= a:
                raise NetworkError(f"lane {lane_id}: cell [{a}, {b}] has non-positive length")
            if a < cursor - _TILING_TOL:
                raise NetworkError(f"lane {lane_id}: overlapping cells at {a} m")
            if a > cursor + _TILING_TOL:
                raise NetworkError(f"lane {lane_id}: gap in cells between {cursor} m and {a} m")
            sizes.append(b - a)
            cursor = b
    else:
        sizes = [float(d) for d in spec]
        if any(d <= 0 for d in sizes):
            raise NetworkError(f"lane {lane_id}: cell lengths must be positive")
    total = math.fsum(sizes)
    if abs(total - link.length) > _TILING_TOL * max(1.0, link.length):
        kind = "overlapping" if total > link.length else "gapped"
        raise NetworkError(
            f"lane {lane_id}: {kind} cells, tiling covers {total} m of a {link.length} m link"
        )
    return _cells_from_lengths(sizes)


# -- standard four-leg phases ---------------------------------------------------


def _side_of(approaches: Mapping[str, Any]) -> dict[str, str]:
    """Link id -> side, for approaches given as one link or a list per side."""
    out = {}
    for side, links in approaches.items():
        for link in (links,) if isinstance(links, str) else links:
            out[link] = side
    return out


def standard_conflicts(approaches: Mapping[str, Any], movements: Iterable[Movement]) -> set[frozenset[str]]:
    """Conflict pairs for a four-leg intersection with protected lefts.

    Same-approach through and left are compatible; opposing throughs and
    opposing lefts are compatible; a through conflicts with the opposing
    left; every pair from perpendicular approaches conflicts.
    """
    side_of = _side_of(approaches)
    controlled = [m for m in movements if m.controlled and m.from_link in side_of]
    conflicts = set()
    for a, b in itertools.combinations(controlled, 2):
        sa, sb = side_of[a.from_link], side_of[b.from_link]
        if sa == sb:
            continue
        if _OPPOSITE[sa] == sb and a.turn is b.turn:
            continue
        conflicts.add(frozenset((a.id, b.id)))
    return conflicts


_SINGLE_APPROACH_RANK = {"N": 4, "S": 5, "E": 6, "W": 7}


def _standard_phase_name(a: Movement, b: Movement, side_of: Mapping[str, str]) -> tuple[int, str]:
    sa, sb = side_of[a.from_link], side_of[b.from_link]
    if sa == sb:
        return _SINGLE_APPROACH_RANK[sa], f"{sa}_TL"
    ns = sa in "NS"
    if a.turn is TurnKind.THROUGH:
        return (0 if ns else 1), ("NS_T" if ns else "EW_T")
    return (2 if ns else 3), ("NS_L" if ns else "EW_L")


def enumerate_standard_phases(
    approaches: Mapping[str, Any] | None,
    movements: Iterable[Movement],
    conflicts: Iterable[frozenset[str]] | None = None,
) -> tuple[Phase, ...]:
    """All two-movement phases of a four-leg intersection.

    With through and left movements on every approach this is the
    eight-phase set: NS/EW opposing throughs, NS/EW opposing lefts and the
    four single-approach through+left pairs. Missing movements (e.g. lefts
    prohibited) simply drop the phases that would use them.
    """
    if approaches is None or set(approaches) != set(APPROACHES):
        raise NetworkError("explicit phase list required: standard phases need a four-leg intersection")
    movements = list(movements)
    side_of = _side_of(approaches)
    controlled = [m for m in movements if m.controlled and m.from_link in side_of]
    if conflicts is None:
        conflicts = standard_conflicts(approaches, controlled)
    conflicts = set(conflicts)

    found = []
    for a, b in itertools.combinations(controlled, 2):
        if frozenset((a.id, b.id)) in conflicts:
            continue
        rank, name = _standard_phase_name(a, b, side_of)
        found.append((rank, name, frozenset((a.id, b.id))))
    found.sort()
    return tuple(Phase(id=name, movements=mv) for _, name, mv in found)


# -- builder ----------------------------------------------------------------------


def _default_turn_factor(turn: TurnKind) -> float:
    if turn is TurnKind.LEFT:
        return LEFT_TURN_FACTOR
    if turn is TurnKind.RIGHT:
        return RIGHT_TURN_FACTOR
    return 1.0


def _require(doc: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in doc:
        raise NetworkError(f"{where}: missing field {key!r}")
    return doc[key]


def build_network(doc: Mapping[str, Any]) -> Network:
    """Validate a network document and build an immutable :class:`Network`."""
    cell_length = float(doc.get("cell_length", DEFAULT_CELL_LENGTH))

    links: dict[str, Link] = {}
    lane_counts: dict[str, list[str]] = {}
    for raw in doc.get("links") or []:
        lid = str(_require(raw, "id", "link"))
        if lid in links:
            raise NetworkError(f"link {lid}: duplicate id")
        length = float(_require(raw, "length", f"link {lid}"))
        if length <= 0:
            raise NetworkError(f"link {lid}: length must be positive")
        lanes_spec = raw.get("lanes", 1)
        if isinstance(lanes_spec, int):
            if lanes_spec < 1:
                raise NetworkError(f"link {lid}: needs at least one lane")
            lane_ids = [f"{lid}/{i}" for i in range(lanes_spec)]
        else:
            lane_ids = [str(x) for x in lanes_spec]
            if not lane_ids:
                raise NetworkError(f"link {lid}: needs at least one lane")
        upstream = raw.get("from")
        downstream = raw.get("to")
        is_entry = bool(raw.get("entry", upstream is None))
        is_exit = bool(raw.get("exit", downstream is None))
        if is_exit and downstream is not None:
            raise NetworkError(f"link {lid}: an exit link cannot have a downstream intersection")
        links[lid] = Link(
            id=lid,
            length=length,
            lanes=tuple(lane_ids),
            upstream=None if upstream is None else str(upstream),
            downstream=None if downstream is None else str(downstream),
            is_entry=is_entry,
            is_exit=is_exit,
        )
        lane_counts[lid] = lane_ids

    node_ids: list[str] = []
    node_docs: dict[str, Mapping[str, Any]] = {}
    for raw in doc.get("intersections") or []:
        nid = str(_require(raw, "id", "intersection"))
        if nid in node_docs:
            raise NetworkError(f"intersection {nid}: duplicate id")
        node_ids.append(nid)
        node_docs[nid] = raw
    for link in links.values():
        for end in (link.upstream, link.downstream):
            if end is not None and end not in node_docs:
                raise NetworkError(f"link {link.id}: unknown intersection {end}")

    movements: dict[str, Movement] = {}
    by_pair: dict[tuple[str, str], str] = {}
    for raw in doc.get("movements") or []:
        a = str(_require(raw, "from", "movement"))
        b = str(_require(raw, "to", "movement"))
        mid = str(raw.get("id", f"{a}>{b}"))
        for lid in (a, b):
            if lid not in links:
                raise NetworkError(f"movement {mid}: unknown link {lid}")
        node = links[a].downstream
        if node is None or links[b].upstream != node:
            raise NetworkError(f"movement {mid}: links {a} and {b} do not meet at an intersection")
        if mid in movements:
            raise NetworkError(f"movement {mid}: duplicate id")
        if (a, b) in by_pair:
            raise NetworkError(f"movement {mid}: duplicates movement {by_pair[(a, b)]}")
        try:
            turn = TurnKind(raw.get("turn", "through"))
        except ValueError:
            raise NetworkError(f"movement {mid}: unknown turn kind {raw.get('turn')!r}") from None
        x = int(raw.get("lanes", 1))
        f_t = float(raw.get("turn_factor", _default_turn_factor(turn)))
        if x < 1:
            raise NetworkError(f"movement {mid}: lane count must be >= 1")
        if not 0 < f_t <= 1:
            raise NetworkError(f"movement {mid}: turn factor must be in (0, 1]")
        movements[mid] = Movement(mid, a, b, turn, x, f_t, node)
        by_pair[(a, b)] = mid

    lanes = _build_lanes(doc, links, movements, cell_length)

    raw_conflicts: set[frozenset[str]] = set()
    for pair in doc.get("conflicts") or []:
        if len(pair) != 2:
            raise NetworkError(f"conflict entry {pair!r} must name two movements")
        for mid in pair:
            if mid not in movements:
                raise NetworkError(f"conflict entry names unknown movement {mid}")
        raw_conflicts.add(frozenset(str(m) for m in pair))

    phase_docs = doc.get("phases") or {}
    for nid in phase_docs:
        if nid not in node_docs:
            raise NetworkError(f"phases given for unknown intersection {nid}")
    intersections: dict[str, Intersection] = {}
    for nid in node_ids:
        intersections[nid] = _build_intersection(
            nid, node_docs[nid], phase_docs.get(nid), links, movements, raw_conflicts
        )

    return Network(
        links=MappingProxyType(links),
        lanes=MappingProxyType(lanes),
        movements=MappingProxyType(movements),
        intersections=MappingProxyType(intersections),
        _by_pair=MappingProxyType(by_pair),
    )


_TURN_ORDER = {TurnKind.LEFT: 0, TurnKind.THROUGH: 1, TurnKind.RIGHT: 2}


def _build_lanes(
    doc: Mapping[str, Any],
    links: Mapping[str, Link],
    movements: Mapping[str, Movement],
    cell_length: float,
) -> dict[str, Lane]:
    overrides: dict[str, Mapping[str, Any]] = {}
    lane_owner = {lane_id: link.id for link in links.values() for lane_id in link.lanes}
    for raw in doc.get("lanes") or []:
        lane_id = str(_require(raw, "id", "lane"))
        if lane_id not in lane_owner:
            raise NetworkError(f"lane {lane_id}: not declared by any link")
        overrides[lane_id] = raw

    lanes: dict[str, Lane] = {}
    for link in links.values():
        outgoing = sorted(
            (m for m in movements.values() if m.from_link == link.id),
            key=lambda m: (_TURN_ORDER[m.turn], m.id),
        )
        # default lane use: lefts leftmost, then throughs, then rights;
        # movements beyond the lane count share the last lane
        default_use: list[list[str]] = [[] for _ in link.lanes]
        slot = 0
        for m in outgoing:
            for _ in range(m.lanes):
                default_use[min(slot, len(link.lanes) - 1)].append(m.id)
                slot += 1
        for i, lane_id in enumerate(link.lanes):
            raw = overrides.get(lane_id, {})
            if "cells" in raw:
                cells = _explicit_cells(list(raw["cells"]), link, lane_id)
            else:
                cells = uniform_cells(link.length, float(raw.get("cell_length", cell_length)))
            if "movements" in raw:
                allowed = tuple(str(m) for m in raw["movements"])
                for mid in allowed:
                    if mid not in movements or movements[mid].from_link != link.id:
                        raise NetworkError(f"lane {lane_id}: movement {mid} does not leave link {link.id}")
            else:
                allowed = tuple(dict.fromkeys(default_use[i]))
            lanes[lane_id] = Lane(lane_id, link.id, i, cells, allowed)
        served = {mid for lane_id in link.lanes for mid in lanes[lane_id].movements}
        for m in outgoing:
            if m.id not in served:
                raise NetworkError(f"movement {m.id}: no lane of link {link.id} serves it")
    return lanes


def _build_intersection(
    nid: str,
    raw: Mapping[str, Any],
    phase_doc: Any,
    links: Mapping[str, Link],
    movements: Mapping[str, Movement],
    raw_conflicts: set[frozenset[str]],
) -> Intersection:
    incoming = tuple(lid for lid, link in links.items() if link.downstream == nid)
    outgoing = tuple(lid for lid, link in links.items() if link.upstream == nid)
    for key, derived in (("incoming", incoming), ("outgoing", outgoing)):
        if key in raw and set(map(str, raw[key])) != set(derived):
            raise NetworkError(f"intersection {nid}: {key} links {raw[key]} disagree with link endpoints")
    own = tuple(m.id for m in movements.values() if m.intersection == nid)
    approaches = raw.get("approaches")
    if approaches is not None:
        approaches = {
            str(k): (str(v),) if isinstance(v, str) else tuple(map(str, v)) for k, v in approaches.items()
        }
        for side, lids in approaches.items():
            for lid in lids:
                if lid not in incoming:
                    raise NetworkError(f"intersection {nid}: approach {side} link {lid} is not incoming")
        approaches = MappingProxyType(approaches)

    conflicts = {c for c in raw_conflicts if c <= set(own)}
    if phase_doc == "standard":
        conflicts |= standard_conflicts(approaches or {}, (movements[m] for m in own))
        phases = enumerate_standard_phases(approaches, (movements[m] for m in own), conflicts)
    else:
        phases = []
        seen = set()
        for i, p in enumerate(phase_doc or []):
            pid = str(p.get("id", f"P{i}"))
            if pid in seen:
                raise NetworkError(f"phase {pid}: duplicate id at intersection {nid}")
            seen.add(pid)
            members = frozenset(str(m) for m in _require(p, "movements", f"phase {pid}"))
            for mid in members:
                if mid not in movements or movements[mid].intersection != nid:
                    raise NetworkError(f"phase {pid}: unknown movement {mid} at intersection {nid}")
                if not movements[mid].controlled:
                    raise NetworkError(f"phase {pid}: right-turn movement {mid} is not signal controlled")
            if len(members) < 2:
                raise NetworkError(f"phase {pid}: a phase needs at least two movements")
            for a, b in itertools.combinations(sorted(members), 2):
                if frozenset((a, b)) in conflicts:
                    raise NetworkError(f"phase {pid}: movements {a} and {b} conflict")
            phases.append(Phase(pid, members))
        phases = tuple(phases)

    covered = set().union(*(p.movements for p in phases)) if phases else set()
    for mid in own:
        if movements[mid].controlled and mid not in covered:
            raise NetworkError(f"intersection {nid}: signal-controlled movement {mid} is in no phase")
    return Intersection(
        id=nid,
        incoming=incoming,
        outgoing=outgoing,
        movements=own,
        phases=phases,
        conflicts=frozenset(conflicts),
        approaches=approaches,
    )


def read_document(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    return yaml.safe_load(text)


def load_network(path: str | Path) -> Network:
    return build_network(read_document(path))
