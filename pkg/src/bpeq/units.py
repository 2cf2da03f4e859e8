"""Unit parsing for config values.

Everything inside the package is SI (m, s, veh/m, veh/s). Config files may
give quantities as bare numbers (already SI) or as strings with a unit
suffix, e.g. ``"60 km/h"`` or ``"143 veh/km"``.
"""

from __future__ import annotations

import re

KMH = 1000.0 / 3600.0
VEH_PER_KM = 1.0 / 1000.0


def kmh(value: float) -> float:
    """km/h to m/s. Divides, so round numbers convert to the nearest double."""
    return value / 3.6


def per_km(value: float) -> float:
    """veh/km to veh/m; 143 veh/km becomes exactly the double nearest 0.143."""
    return value / 1000.0


# unit -> (multiplier, divisor) to the SI unit of the kind
_FACTORS: dict[str, dict[str, tuple[float, float]]] = {
    "length": {"m": (1.0, 1.0), "km": (1000.0, 1.0)},
    "time": {"s": (1.0, 1.0), "min": (60.0, 1.0), "h": (3600.0, 1.0)},
    "speed": {"m/s": (1.0, 1.0), "km/h": (1.0, 3.6), "kph": (1.0, 3.6)},
    "density": {"veh/m": (1.0, 1.0), "veh/km": (1.0, 1000.0)},
    "flow": {"veh/h": (1.0, 1.0), "vph": (1.0, 1.0), "veh/s": (3600.0, 1.0)},
}

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-z/]*)\s*$")


def parse_quantity(value: float | int | str, kind: str) -> float:
    """Convert ``value`` to the SI unit of ``kind``.

    Flow is the exception: its canonical unit is veh/h, the unit every
    demand and saturation figure in the traffic literature is quoted in.
    """
    if isinstance(value, bool):
        raise ValueError(f"expected a {kind} quantity, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    match = _QUANTITY.match(str(value))
    if match is None:
        raise ValueError(f"cannot parse {kind} quantity {value!r}")
    number, unit = float(match.group(1)), match.group(2)
    if not unit:
        return number
    factors = _FACTORS[kind]
    if unit not in factors:
        allowed = ", ".join(sorted(factors))
        raise ValueError(f"unknown {kind} unit {unit!r} (allowed: {allowed})")
    mul, div = factors[unit]
    return number * mul / div
