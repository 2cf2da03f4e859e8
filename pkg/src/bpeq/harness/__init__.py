"""Scenario configs, sweeps and reports."""

from .config import ConfigError, ScenarioConfig, dump_config, load_config, parse_config
from .report import ReportError, emit_report, ranking, summary_text
from .sweep import RunRecord, SweepSpec, load_sweep, read_records, run_config, run_sweep, write_records

__all__ = [
    "ConfigError", "ScenarioConfig", "dump_config", "load_config", "parse_config",
    "ReportError", "emit_report", "ranking", "summary_text",
    "RunRecord", "SweepSpec", "load_sweep", "read_records", "run_config", "run_sweep", "write_records",
]
