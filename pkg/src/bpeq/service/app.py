"""FastAPI service over the core package.

Endpoints: ``GET /health``, ``POST /networks/validate``, ``POST /estimate``,
``POST /select-phase`` and ``POST /runs``. Validation problems in the
payload come back as 422 with a ``detail`` message.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import ValidationError

from .. import __version__
from ..control import ControlError, phase_pressures, select_phase
from ..estimation import EstimatorParams, ProbeHistory, ProbeReading, estimate_cell_field, link_queue
from ..harness.config import BUNDLED_PREFIX, ConfigError, ScenarioConfig, _first_error
from ..harness.sweep import run_config
from ..network import Network, NetworkError, build_network, load_network
from ..scenarios import scenario_path
from ..simulation import DemandError, ScenarioError
from .schemas import (
    EstimateRequest,
    EstimateResponse,
    Health,
    IntersectionOut,
    LaneField,
    NetworkRef,
    NetworkRequest,
    NetworkSummary,
    PhaseOut,
    RunRequest,
    RunResponse,
    SelectPhaseRequest,
    SelectPhaseResponse,
    WindowOut,
)

MAX_RUN_SECONDS = 4 * 3600.0

app = FastAPI(title="bpeq", version=__version__, description="Backpressure signal control with estimated queues")


def _unprocessable(exc: Exception | str) -> HTTPException:
    return HTTPException(status_code=422, detail=str(exc))


def _network(ref: NetworkRef) -> Network:
    if isinstance(ref, str):
        name = ref.removeprefix(BUNDLED_PREFIX)
        path = scenario_path(name)
        if "/" in name or not path.is_file():
            raise HTTPException(status_code=404, detail=f"no bundled network {ref!r}")
        return load_network(path)
    return build_network(ref)


@app.get("/health", response_model=Health)
def health() -> Health:
    return Health(version=__version__)


@app.post("/networks/validate", response_model=NetworkSummary)
def validate_network(req: NetworkRequest) -> NetworkSummary:
    try:
        net = _network(req.network)
    except NetworkError as exc:
        raise _unprocessable(exc) from None
    return NetworkSummary(
        links=len(net.links),
        lanes=len(net.lanes),
        movements=len(net.movements),
        entry_links=sorted(net.entry_links),
        exit_links=sorted(net.exit_links),
        intersections=[
            IntersectionOut(
                id=nid,
                incoming=list(node.incoming),
                outgoing=list(node.outgoing),
                phases=[PhaseOut(id=p.id, movements=sorted(p.movements)) for p in node.phases],
            )
            for nid, node in net.intersections.items()
        ],
    )


@app.post("/estimate", response_model=EstimateResponse)
def estimate(req: EstimateRequest) -> EstimateResponse:
    try:
        net = _network(req.network)
        p = req.params
        params = EstimatorParams(sigma=p.sigma, tau=p.tau, horizon=p.horizon, z_floor=p.z_floor)
        history = ProbeHistory(params.horizon)
        unknown = {r.lane for r in req.readings} - set(net.lanes)
        if unknown:
            raise NetworkError(f"readings name unknown lanes {sorted(unknown)}")
        by_time: dict[float, list[ProbeReading]] = {}
        for r in req.readings:
            by_time.setdefault(r.t, []).append(ProbeReading(r.vehicle, r.lane, r.x, r.t, r.v))
        for t in sorted(by_time):
            history.ingest(by_time[t], t=t)
        history.prune(req.t_now)
        fld = estimate_cell_field(net, history, req.t_now, params)
    except (NetworkError, ValueError) as exc:
        raise _unprocessable(exc) from None
    queues = {lid: link_queue(link, fld) for lid, link in net.links.items()}
    cells = None
    if req.include_cells:
        cells = {
            lane: LaneField(speeds=fld.speeds[lane].tolist(), densities=fld.densities[lane].tolist())
            for lane in fld.speeds
        }
    return EstimateResponse(t=req.t_now, queues=queues, cells=cells)


@app.post("/select-phase", response_model=SelectPhaseResponse)
def select(req: SelectPhaseRequest) -> SelectPhaseResponse:
    try:
        net = _network(req.network)
        if req.intersection not in net.intersections:
            raise NetworkError(f"unknown intersection {req.intersection}")
        node = net.intersections[req.intersection]
        exits = [lid for lid in node.outgoing if net.links[lid].is_exit]
        queues = {lid: req.queues[lid] for lid in (*node.incoming, *node.outgoing) if lid in req.queues}
        if req.current is not None and req.current not in {p.id for p in node.phases}:
            raise NetworkError(f"unknown current phase {req.current}")
        pressures = phase_pressures(node, net.movements, queues, req.saturation_flow, req.slot, exits)
        phase = select_phase(node, net.movements, queues, req.saturation_flow, req.slot, req.current, exits)
    except (NetworkError, ControlError) as exc:
        raise _unprocessable(exc) from None
    return SelectPhaseResponse(phase=phase, pressures=pressures)


@app.post("/runs", response_model=RunResponse)
def run(req: RunRequest) -> RunResponse:
    try:
        config = ScenarioConfig.model_validate(req.config)
        if req.network is None and not config.network.startswith(BUNDLED_PREFIX):
            raise ConfigError("config.network must name a bundled network (bundled:<file>) or pass network inline")
        if config.duration > MAX_RUN_SECONDS:
            raise ConfigError(f"duration above the service limit of {MAX_RUN_SECONDS:g} s")
        config = config.with_overrides(controllers=req.controller, penetration=req.penetration)
        net = build_network(req.network) if req.network is not None else _network(config.network)
        record = run_config(config, req.seed, network=net)
    except ValidationError as exc:
        raise _unprocessable(_first_error(exc)[0]) from None
    except (ValueError, ConfigError, NetworkError, DemandError, ScenarioError) as exc:
        raise _unprocessable(exc) from None
    return RunResponse(
        scenario=record.scenario,
        controller=record.controller,
        penetration=record.penetration,
        seed=record.seed,
        summary=record.summary,
        windows=[WindowOut(**{k: v for k, v in w.as_row().items() if k != "demand_rate"}) for w in record.windows],
        agreement=record.agreement,
    )
