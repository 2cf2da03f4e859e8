"""Backpressure signal control with queues estimated from connected-vehicle probes."""

__version__ = "0.1.0"
