"""Request and response models of the HTTP service."""

from __future__ import annotations

from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, Field

# a network is either an inline document or the name of a bundled one
NetworkRef = Union[dict[str, Any], str]


class Health(BaseModel):
    status: str = "ok"
    version: str


class NetworkRequest(BaseModel):
    network: NetworkRef = Field(description="network document, or a bundled network file name")


class PhaseOut(BaseModel):
    id: str
    movements: list[str]


class IntersectionOut(BaseModel):
    id: str
    incoming: list[str]
    outgoing: list[str]
    phases: list[PhaseOut]


class NetworkSummary(BaseModel):
    links: int
    lanes: int
    movements: int
    entry_links: list[str]
    exit_links: list[str]
    intersections: list[IntersectionOut]


class Reading(BaseModel):
    vehicle: Union[int, str]
    lane: str
    x: float = Field(ge=0, description="meters from the upstream end of the link")
    t: float
    v: float = Field(ge=0, description="speed, m/s")


class EstimatorIn(BaseModel):
    sigma: float = Field(20.0, gt=0)
    tau: float = Field(5.0, gt=0)
    horizon: float = Field(40.0, gt=0)
    z_floor: float = Field(1e-6, gt=0)


class EstimateRequest(NetworkRequest):
    readings: list[Reading]
    t_now: float
    params: EstimatorIn = EstimatorIn()
    include_cells: bool = False


class LaneField(BaseModel):
    speeds: list[float]
    densities: list[float]


class EstimateResponse(BaseModel):
    t: float
    queues: dict[str, float]
    cells: Optional[dict[str, LaneField]] = None


class SelectPhaseRequest(NetworkRequest):
    intersection: str
    queues: dict[str, float] = Field(description="vehicles per link, for every link entering the intersection and every non-exit link leaving it")
    current: Optional[str] = None
    saturation_flow: float = Field(1800.0, gt=0)
    slot: float = Field(10.0, gt=0)


class SelectPhaseResponse(BaseModel):
    phase: str
    pressures: dict[str, float]


class RunRequest(BaseModel):
    config: dict[str, Any] = Field(description="scenario config; its network must be bundled:<name> unless network is given")
    network: Optional[dict[str, Any]] = None
    seed: int = 0
    controller: Optional[Literal["bp_perfect", "bp_eq", "fixed"]] = None
    penetration: Optional[float] = Field(None, ge=0, le=1)


class WindowOut(BaseModel):
    start: float
    end: float
    avg_delay: float
    throughput: int
    max_queue: float
    completed: int


class RunResponse(BaseModel):
    scenario: str
    controller: str
    penetration: float
    seed: int
    summary: dict[str, float]
    windows: list[WindowOut]
    agreement: Optional[float] = None
