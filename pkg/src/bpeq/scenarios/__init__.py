"""Bundled reference scenarios.

``four_leg_document`` and ``grid_document`` generate network documents; the
YAML files next to this module are the versions the bundled scenario
configs point at (regenerate them with ``python -m bpeq.scenarios``).
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Any

import yaml

SIDES = ("N", "E", "S", "W")
# heading of traffic arriving from each side, and where each turn leads
_TURNS = {
    "N": {"through": "S", "left": "E", "right": "W"},
    "S": {"through": "N", "left": "W", "right": "E"},
    "E": {"through": "W", "left": "S", "right": "N"},
    "W": {"through": "E", "left": "N", "right": "S"},
}


def scenario_dir() -> Path:
    return Path(str(resources.files(__name__)))


def scenario_path(name: str) -> Path:
    return scenario_dir() / name


def four_leg_document(
    length: float = 500.0,
    approach_lanes: int = 2,
    exit_lanes: int = 2,
    left_turns: bool = True,
    left_links: bool = True,
    cell_length: float = 10.0,
) -> dict[str, Any]:
    """Isolated four-leg intersection ``I1``.

    With ``left_links`` each side's left-turn traffic uses its own one-lane
    entry link ``{side}_in_L`` (a separate turn bay), so link queues, which
    drive the pressure, are per movement group. Otherwise the lefts share
    ``{side}_in`` with the other movements.
    """
    links = []
    for side in SIDES:
        links.append({"id": f"{side}_in", "length": length, "lanes": approach_lanes, "from": None, "to": "I1"})
        if left_turns and left_links:
            links.append({"id": f"{side}_in_L", "length": length, "lanes": 1, "from": None, "to": "I1"})
    for side in SIDES:
        links.append({"id": f"{side}_out", "length": length, "lanes": exit_lanes, "from": "I1", "to": None})
    movements = []
    for side in SIDES:
        for turn, dest in _TURNS[side].items():
            if turn == "left" and not left_turns:
                continue
            src = f"{side}_in_L" if turn == "left" and left_links else f"{side}_in"
            movements.append({"from": src, "to": f"{dest}_out", "turn": turn, "lanes": 1})
    approaches = {}
    for side in SIDES:
        approaches[side] = [f"{side}_in", f"{side}_in_L"] if left_turns and left_links else f"{side}_in"
    return {
        "cell_length": cell_length,
        "links": links,
        "movements": movements,
        "phases": {"I1": "standard"},
        "intersections": [{"id": "I1", "approaches": approaches}],
    }


def approach_rates(document: dict[str, Any], side_rates: dict[str, float], left_share: float) -> dict[str, float]:
    """Split per-side arrival rates (veh/h) over a four-leg document's entry links."""
    entries = {l["id"] for l in document["links"] if l.get("from") is None}
    out = {}
    for side, rate in side_rates.items():
        if f"{side}_in_L" in entries:
            out[f"{side}_in_L"] = rate * left_share
            out[f"{side}_in"] = rate * (1.0 - left_share)
        else:
            out[f"{side}_in"] = rate
    return out


def _neighbor(r: int, c: int, side: str) -> tuple[int, int]:
    return {"N": (r - 1, c), "S": (r + 1, c), "E": (r, c + 1), "W": (r, c - 1)}[side]


def grid_node(r: int, c: int) -> str:
    return f"I{r}{c}"


def grid_document(
    rows: int = 3,
    cols: int = 3,
    length: float = 300.0,
    approach_lanes: int = 2,
    exit_lanes: int = 2,
    left_turns: bool = False,
    cell_length: float = 10.0,
) -> dict[str, Any]:
    """Grid of four-leg intersections ``I{row}{col}``, row 0 at the north edge.

    Left turns are prohibited by default, leaving the two opposing-through
    phases at every node. Interior links are named ``Iab>Icd``; boundary links ``in_Iab_S`` (entering
    from side S) and ``out_Iab_S`` (leaving towards side S).
    """

    def inside(r: int, c: int) -> bool:
        return 0 <= r < rows and 0 <= c < cols

    def incoming(r: int, c: int, side: str) -> str:
        nr, nc = _neighbor(r, c, side)
        if inside(nr, nc):
            return f"{grid_node(nr, nc)}>{grid_node(r, c)}"
        return f"in_{grid_node(r, c)}_{side}"

    def outgoing(r: int, c: int, side: str) -> str:
        nr, nc = _neighbor(r, c, side)
        if inside(nr, nc):
            return f"{grid_node(r, c)}>{grid_node(nr, nc)}"
        return f"out_{grid_node(r, c)}_{side}"

    links = []
    seen = set()
    for r in range(rows):
        for c in range(cols):
            node = grid_node(r, c)
            for side in SIDES:
                lid = incoming(r, c, side)
                if lid in seen:
                    continue
                seen.add(lid)
                nr, nc = _neighbor(r, c, side)
                upstream = grid_node(nr, nc) if inside(nr, nc) else None
                links.append({"id": lid, "length": length, "lanes": approach_lanes, "from": upstream, "to": node})
            for side in SIDES:
                lid = outgoing(r, c, side)
                nr, nc = _neighbor(r, c, side)
                if inside(nr, nc) or lid in seen:
                    continue
                seen.add(lid)
                links.append({"id": lid, "length": length, "lanes": exit_lanes, "from": node, "to": None})

    movements = []
    intersections = []
    for r in range(rows):
        for c in range(cols):
            for side in SIDES:
                for turn, dest in _TURNS[side].items():
                    if turn == "left" and not left_turns:
                        continue
                    movements.append(
                        {"from": incoming(r, c, side), "to": outgoing(r, c, dest), "turn": turn, "lanes": 1}
                    )
            intersections.append(
                {"id": grid_node(r, c), "approaches": {s: incoming(r, c, s) for s in SIDES}}
            )
    return {
        "cell_length": cell_length,
        "links": links,
        "movements": movements,
        "phases": {grid_node(r, c): "standard" for r in range(rows) for c in range(cols)},
        "intersections": intersections,
    }


def turning_for(document: dict[str, Any], through: float, left: float = 0.0, right: float = 0.0) -> dict[str, dict[str, float]]:
    """Uniform turning ratios for every link that has movements."""
    share = {"through": through, "left": left, "right": right}
    out: dict[str, dict[str, float]] = {}
    for m in document["movements"]:
        out.setdefault(m["from"], {})[m["to"]] = share[m["turn"]]
    for lid, ratios in out.items():
        total = sum(ratios.values())
        out[lid] = {k: v / total for k, v in ratios.items()}
    return out


HIGH_DEMAND_PEAKS = ((0.0, 1000.0, 200.0), (1200.0, 200.0, 1000.0), (2400.0, 1000.0, 200.0))
LOW_DEMAND = 400.0
LEFT_SHARE = 0.15
GRID_LOAD = 0.7


def _side_steps(doc: dict[str, Any], steps: tuple[tuple[float, float, float], ...]) -> dict[str, list]:
    """Rate steps per entry link from (start_s, north-south vph, east-west vph) steps."""
    rates: dict[str, list] = {}
    for start, ns, ew in steps:
        split = approach_rates(doc, {"N": ns, "S": ns, "E": ew, "W": ew}, LEFT_SHARE)
        for link, rate in split.items():
            rates.setdefault(link, []).append([f"{start / 60:g} min", f"{rate:g} veh/h"])
    return rates


def _isolated_turning(doc: dict[str, Any]) -> dict[str, dict[str, float]]:
    # lefts have their own entry links; the rest split 0.7 : 0.15
    return turning_for(doc, 0.7, LEFT_SHARE, 0.15)


def bundled_configs() -> dict[str, dict[str, Any]]:
    """Scenario configs shipped with the package, keyed by file name."""
    iso = four_leg_document()
    grid = grid_document()
    low = {
        "name": "isolated_low",
        "network": "four_leg.network.yaml",
        "demand": {"rates": _side_steps(iso, ((0.0, LOW_DEMAND, LOW_DEMAND),)), "turning": _isolated_turning(iso)},
        "controllers": "bp_eq",
        "penetration": 0.3,
        "duration": "1 h",
        "window": "10 min",
    }
    high = dict(low, name="isolated_high", demand={
        "rates": _side_steps(iso, HIGH_DEMAND_PEAKS), "turning": _isolated_turning(iso),
    })
    grid_turning = turning_for(grid, 0.8, 0.0, 0.2)
    grid_rate = GRID_LOAD * grid_capacity_rate(grid, grid_turning)
    grid_cfg = {
        "name": "grid",
        "network": "grid3x3.network.yaml",
        "demand": {
            "rates": {l["id"]: f"{grid_rate:.1f} veh/h" for l in grid["links"] if l.get("from") is None},
            "turning": grid_turning,
        },
        "controllers": "bp_perfect",
        "penetration": 1.0,
        "duration": "2 h",
        "window": "10 min",
    }
    return {"isolated_low.yaml": low, "isolated_high.yaml": high, "grid.yaml": grid_cfg}


def grid_capacity_rate(doc: dict[str, Any], turning: dict[str, dict[str, float]]) -> float:
    """Per-entry rate (veh/h) at the estimated capacity of a uniformly loaded grid."""
    from ..control import capacity_scale
    from ..network import build_network

    net = build_network(doc)
    entries = [lid for lid, link in net.links.items() if link.is_entry]
    return capacity_scale(net, {lid: 1.0 for lid in entries}, turning)


SWEEPS = {
    "isolated_high.sweep.yaml": {
        "base": "isolated_high.yaml",
        "axes": {"controller": ["bp_eq"], "penetration": [0.1, 0.2, 0.3, 1.0]},
        "replications": 5,
    },
    "controllers.sweep.yaml": {
        "base": "isolated_high.yaml",
        "axes": {"controller": ["bp_perfect", "bp_eq", "fixed"], "penetration": [1.0]},
        "replications": 5,
    },
}


def _dump(doc: dict[str, Any], path: Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False, default_flow_style=None, width=120)


def regenerate(target: Path | None = None) -> None:
    target = target or scenario_dir()
    _dump(four_leg_document(), target / "four_leg.network.yaml")
    _dump(grid_document(), target / "grid3x3.network.yaml")
    for name, cfg in {**bundled_configs(), **SWEEPS}.items():
        _dump(cfg, target / name)
