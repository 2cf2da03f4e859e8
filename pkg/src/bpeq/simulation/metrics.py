"""Evaluation metrics: average delay, throughput, max stopped queue length."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class MetricsWindow:
    start: float
    end: float
    avg_delay: float
    throughput: int
    max_queue: float
    completed: int
    demand_rate: float = 0.0

    def as_row(self) -> dict:
        return asdict(self)


def stopped_queue_length(
    positions: Sequence[float], speeds: Sequence[float], lane_length: float, spacing: float, stop_speed: float
) -> float:
    """Length of the stopped run that starts at the stop line.

    ``positions``/``speeds`` are ordered front (downstream) first. The run
    counts the spacing occupied by its last vehicle and is capped at the
    lane length.
    """
    if not positions or speeds[0] >= stop_speed or positions[0] < lane_length - spacing:
        return 0.0
    last = positions[0]
    for x, v in zip(positions, speeds):
        if v >= stop_speed:
            break
        last = x
    return min(lane_length - last + spacing, lane_length)


class WindowAccumulator:
    """Collects trips, exits and per-tick queue maxima for one window."""

    def __init__(self, start: float) -> None:
        self.start = start
        self.delay_sum = 0.0
        self.completed = 0
        self.throughput = 0
        self.max_queue = 0.0

    def trip(self, delay: float) -> None:
        self.delay_sum += delay
        self.completed += 1
        self.throughput += 1

    def queue(self, length: float) -> None:
        if length > self.max_queue:
            self.max_queue = length

    def close(self, end: float, demand_rate: float = 0.0) -> MetricsWindow:
        avg = self.delay_sum / self.completed if self.completed else 0.0
        return MetricsWindow(self.start, end, avg, self.throughput, self.max_queue, self.completed, demand_rate)


def collect_metrics(
    trips: Sequence[tuple[float, float]],
    queue_samples: Sequence[float],
    window: tuple[float, float],
) -> MetricsWindow:
    """Metrics for one window from ``(exit_time, delay)`` trips and per-tick queue maxima.

    Trips are attributed to the window containing their exit time.
    """
    start, end = window
    acc = WindowAccumulator(start)
    for exit_time, delay in trips:
        if start <= exit_time < end:
            acc.trip(delay)
    for q in queue_samples:
        acc.queue(q)
    return acc.close(end)
