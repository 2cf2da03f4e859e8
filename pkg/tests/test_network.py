import itertools

import pytest

from bpeq.network import NetworkError, build_network, load_network, standard_conflicts
from bpeq.scenarios import four_leg_document, grid_document, scenario_path

import oracles


def test_four_leg_cells(four_leg):
    for lane in four_leg.lanes.values():
        assert len(lane.cells) == 50
        assert lane.length == pytest.approx(500.0)


def test_single_link_has_no_phases(single_link):
    assert not single_link.intersections
    assert single_link.entry_links == ["L"]
    assert single_link.exit_links == frozenset({"L"})


def test_standard_phase_set(four_leg):
    node = four_leg.intersections["I1"]
    ids = [p.id for p in node.phases]
    assert len(ids) == 8
    assert ids[:4] == ["NS_T", "EW_T", "NS_L", "EW_L"]
    assert set(ids[4:]) == {"N_TL", "S_TL", "E_TL", "W_TL"}


def test_phases_are_exactly_the_compatible_pairs(four_leg):
    node = four_leg.intersections["I1"]
    controlled = [m for m in node.movements if four_leg.movements[m].controlled]
    pairs = oracles.compatible_pairs(controlled, node.conflicts)
    assert {p.movements for p in node.phases} == set(pairs)


def test_no_lefts_gives_two_phases(two_phase):
    node = two_phase.intersections["I1"]
    assert [p.id for p in node.phases] == ["NS_T", "EW_T"]


def test_conflicts_cover_perpendicular_pairs(four_leg):
    node = four_leg.intersections["I1"]
    mv = four_leg.movements
    ns = {m for m in node.movements if mv[m].controlled and mv[m].from_link[0] in "NS"}
    ew = {m for m in node.movements if mv[m].controlled and mv[m].from_link[0] in "EW"}
    for a, b in itertools.product(ns, ew):
        assert node.conflicting(a, b)


def test_right_turns_uncontrolled(four_leg):
    rights = [m for m in four_leg.movements.values() if m.turn.value == "right"]
    assert rights and not any(m.controlled for m in rights)
    assert all(m.turn_factor == 0.85 for m in rights)


def test_left_turn_factor(four_leg):
    lefts = [m for m in four_leg.movements.values() if m.turn.value == "left"]
    assert all(m.turn_factor == 0.714 for m in lefts)


def test_conflicting_explicit_phase_rejected():
    doc = four_leg_document(approach_lanes=1, left_turns=False)
    doc["phases"] = {"I1": [{"id": "bad", "movements": ["N_in>S_out", "W_in>E_out"]}]}
    doc["conflicts"] = [["N_in>S_out", "W_in>E_out"]]
    with pytest.raises(NetworkError, match="conflict"):
        build_network(doc)


def test_t_intersection_needs_explicit_phases():
    doc = four_leg_document(approach_lanes=1, left_turns=False)
    doc["links"] = [l for l in doc["links"] if l["id"] not in ("E_in", "E_out")]
    doc["movements"] = [m for m in doc["movements"] if "E_" not in m["from"] + m["to"]]
    doc["intersections"][0]["approaches"].pop("E")
    with pytest.raises(NetworkError, match="explicit phase list required"):
        build_network(doc)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda d: d["links"].append(dict(d["links"][0])), "duplicate"),
        (lambda d: d["links"][0].update(length=-1), "length"),
        (lambda d: d["movements"].append({"from": "N_in", "to": "nowhere"}), "unknown link"),
        (lambda d: d["movements"].append({"from": "N_in", "to": "N_out", "turn": "uturn"}), "turn kind"),
        (lambda d: d["links"][0].update(to="I9"), "unknown intersection"),
    ],
)
def test_invalid_documents(mutate, message):
    doc = four_leg_document(approach_lanes=1, left_turns=False)
    mutate(doc)
    with pytest.raises(NetworkError, match=message):
        build_network(doc)


def test_grid_shape(grid):
    assert len(grid.intersections) == 9
    assert len(grid.entry_links) == 12
    for node in grid.intersections.values():
        assert [p.id for p in node.phases] == ["NS_T", "EW_T"]


def test_bundled_files_match_generators():
    assert load_network(scenario_path("four_leg.network.yaml")).links.keys() == build_network(four_leg_document()).links.keys()
    assert load_network(scenario_path("grid3x3.network.yaml")).movements.keys() == build_network(grid_document()).movements.keys()


def test_local_view_keeps_only_incident_links(grid):
    local = grid.local_view("I11")
    node = grid.intersections["I11"]
    assert set(local.links) == set(node.incoming) | set(node.outgoing)
    assert set(local.intersections) == {"I11"}


def test_standard_conflicts_same_side_compatible(four_leg):
    node = four_leg.intersections["I1"]
    conflicts = standard_conflicts(node.approaches, [four_leg.movements[m] for m in node.movements])
    assert frozenset({"N_in>S_out", "N_in_L>E_out"}) not in conflicts
    assert frozenset({"N_in>S_out", "S_in_L>W_out"}) in conflicts
