import pytest

from bpeq.simulation import DemandError, DemandGenerator, DemandProfile, validate_demand


def _count(net, rate, penetration=0.0, seconds=3600.0, seed=0):
    gen = DemandGenerator(net, DemandProfile({"L": [(0.0, rate)]}), seed, penetration)
    out = []
    t = 0.0
    while t < seconds:
        out.extend(gen.spawn(t, 0.5))
        t += 0.5
    return out


def test_zero_rate(single_link):
    assert _count(single_link, 0.0) == []


def test_poisson_count(single_link):
    n = len(_count(single_link, 3600.0))
    assert abs(n - 3600) <= 3 * 60


def test_connected_fraction(single_link):
    arrivals = _count(single_link, 3600.0, penetration=0.2, seconds=10_000.0)
    assert len(arrivals) > 9000
    frac = sum(a.connected for a in arrivals) / len(arrivals)
    assert 0.19 <= frac <= 0.21


def test_connected_sets_nest(single_link):
    low = {a.id for a in _count(single_link, 1800.0, 0.1) if a.connected}
    high = {a.id for a in _count(single_link, 1800.0, 0.3) if a.connected}
    assert low <= high


def test_same_seed_same_stream(single_link):
    a = [(x.id, x.time) for x in _count(single_link, 900.0, seed=4)]
    b = [(x.id, x.time) for x in _count(single_link, 900.0, seed=4)]
    assert a == b


def test_piecewise_rate():
    p = DemandProfile({"L": [(0.0, 100.0), (600.0, 400.0)]})
    assert p.rate_at("L", 599.0) == 100.0
    assert p.rate_at("L", 600.0) == 400.0
    assert p.mean_rate("L", 1200.0) == pytest.approx(250.0)


def test_routes_follow_turning(two_phase):
    turning = {f"{a}_in": {f"{b}_out": 1.0} for a, b in ("NS", "SN", "EW", "WE")}
    gen = DemandGenerator(two_phase, DemandProfile({"N_in": [(0.0, 3600.0)]}, turning), 0, 0.0)
    routes = {a.route for t in range(200) for a in gen.spawn(t * 0.5, 0.5)}
    assert routes == {("N_in", "S_out")}


@pytest.mark.parametrize(
    "profile, message",
    [
        (DemandProfile({"S_out": [(0.0, 10.0)]}), "not an entry"),
        (DemandProfile({"X": [(0.0, 10.0)]}), "unknown link"),
        (DemandProfile({"N_in": [(0.0, -1.0)]}), "negative"),
        (DemandProfile({}, {"N_in": {"S_out": 0.5, "W_out": 0.4}}), "sum to"),
        (DemandProfile({}, {"N_in": {"N_out": 1.0}}), "no such movement"),
    ],
)
def test_invalid_demand(two_phase, profile, message):
    with pytest.raises(DemandError, match=message):
        validate_demand(profile, two_phase)


def test_bad_penetration(single_link):
    with pytest.raises(DemandError):
        DemandGenerator(single_link, DemandProfile({}), 0, 1.5)
