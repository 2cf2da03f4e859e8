"""Synthetic demand: Poisson arrivals at entry links, routes from turning ratios."""

from __future__ import annotations

import bisect
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from ..network import Network

_MAX_ROUTE_LINKS = 500


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class DemandProfile:
    """Piecewise-constant entry rates (veh/h) and per-link turning ratios.

    ``rates[link]`` is a list of ``(start_time_s, rate_vph)`` breakpoints;
    the rate before the first breakpoint is zero. ``turning[link]`` maps
    each downstream link to the share of vehicles turning into it.
    """

    rates: Mapping[str, Sequence[tuple[float, float]]]
    turning: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def rate_at(self, link: str, t: float) -> float:
        steps = self.rates.get(link)
        if not steps:
            return 0.0
        i = bisect.bisect_right([s for s, _ in steps], t) - 1
        return steps[i][1] if i >= 0 else 0.0

    def mean_rate(self, link: str, horizon: float) -> float:
        """Time-averaged rate over [0, horizon]."""
        steps = list(self.rates.get(link, ()))
        if not steps or horizon <= 0:
            return 0.0
        total = 0.0
        for i, (start, rate) in enumerate(steps):
            end = steps[i + 1][0] if i + 1 < len(steps) else horizon
            lo, hi = max(start, 0.0), min(end, horizon)
            if hi > lo:
                total += rate * (hi - lo)
        return total / horizon

    def mean_rate_between(self, start: float, end: float) -> float:
        """Total entry rate (veh/h) averaged over [start, end)."""
        if end <= start:
            return 0.0
        total = 0.0
        for link in self.rates:
            total += self.mean_rate(link, end) * end - self.mean_rate(link, start) * start
        return total / (end - start)

    def total_rate_at(self, t: float) -> float:
        return sum(self.rate_at(link, t) for link in self.rates)

    def breakpoints(self) -> list[float]:
        return sorted({s for steps in self.rates.values() for s, _ in steps})

    def scaled(self, factor: float) -> DemandProfile:
        rates = {k: [(s, r * factor) for s, r in v] for k, v in self.rates.items()}
        return DemandProfile(rates, self.turning)


def validate_demand(profile: DemandProfile, network: Network) -> dict[str, dict[str, float]]:
    """Check the profile against the network; return complete turning ratios.

    Links with a single way out get ratio 1 implicitly.
    """
    for link, steps in profile.rates.items():
        if link not in network.links:
            raise DemandError(f"demand names unknown link {link}")
        if not network.links[link].is_entry:
            raise DemandError(f"demand link {link} is not an entry link")
        last = -math.inf
        for start, rate in steps:
            if rate < 0:
                raise DemandError(f"negative rate {rate} on link {link}")
            if start <= last:
                raise DemandError(f"rate breakpoints on link {link} must increase")
            last = start

    turning: dict[str, dict[str, float]] = {}
    for lid, link in network.links.items():
        if link.is_exit:
            continue
        outs = [m.to_link for m in network.movements_from(lid)]
        given = profile.turning.get(lid)
        if given is None:
            if len(outs) == 1:
                turning[lid] = {outs[0]: 1.0}
                continue
            if not outs:
                raise DemandError(f"link {lid} is neither an exit nor has movements")
            raise DemandError(f"link {lid} needs turning ratios for {sorted(outs)}")
        for to, r in given.items():
            if to not in outs:
                raise DemandError(f"turning ratio {lid}->{to}: no such movement")
            if r < 0:
                raise DemandError(f"turning ratio {lid}->{to} is negative")
        total = math.fsum(given.values())
        if abs(total - 1.0) > 1e-6:
            raise DemandError(f"turning ratios of link {lid} sum to {total}, not 1")
        turning[lid] = {to: float(r) for to, r in given.items() if r > 0}
    for lid in profile.turning:
        if lid not in network.links:
            raise DemandError(f"turning ratios given for unknown link {lid}")
    return turning


@dataclass
class Arrival:
    """A vehicle that has arrived at an entry link, before it enters the network."""

    id: int
    route: tuple[str, ...]
    connected: bool
    time: float


class DemandGenerator:
    """Seeded arrival stream.

    Each entry link draws from its own random stream, so the realization
    depends only on (seed, profile, network) and is shared by every
    controller and penetration rate run with the same seed. Connectivity
    uses one uniform draw per vehicle compared against the penetration
    rate, so the connected set at a lower rate is a subset of the set at a
    higher rate.
    """

    def __init__(self, network: Network, profile: DemandProfile, seed: int, penetration: float) -> None:
        if not 0.0 <= penetration <= 1.0:
            raise DemandError(f"penetration rate {penetration} outside [0, 1]")
        self.network = network
        self.profile = profile
        self.penetration = penetration
        self.turning = validate_demand(profile, network)
        self.entries = sorted(profile.rates)
        streams = np.random.SeedSequence(seed).spawn(len(self.entries))
        self._rngs = [np.random.default_rng(s) for s in streams]
        self._choices = {
            lid: (list(r), np.cumsum(list(r.values()))) for lid, r in self.turning.items()
        }
        self._next_id = 0

    def _route(self, entry: str, rng: np.random.Generator) -> tuple[str, ...]:
        route = [entry]
        link = entry
        while not self.network.links[link].is_exit:
            targets, cum = self._choices[link]
            u = rng.random() * cum[-1]
            k = min(int(np.searchsorted(cum, u, side="right")), len(targets) - 1)
            link = targets[k]
            route.append(link)
            if len(route) > _MAX_ROUTE_LINKS:
                raise DemandError(f"route from {entry} exceeds {_MAX_ROUTE_LINKS} links; turning ratios loop")
        return tuple(route)

    def spawn(self, t: float, dt: float) -> list[Arrival]:
        """Arrivals during the tick [t, t + dt)."""
        out = []
        for entry, rng in zip(self.entries, self._rngs):
            rate = self.profile.rate_at(entry, t)
            n = int(rng.poisson(rate * dt / 3600.0)) if rate > 0 else 0
            for _ in range(n):
                route = self._route(entry, rng)
                connected = rng.random() < self.penetration
                out.append(Arrival(self._next_id, route, connected, t))
                self._next_id += 1
        return out


def spawn_vehicles(generator: DemandGenerator, t: float, dt: float) -> list[Arrival]:
    return generator.spawn(t, dt)
