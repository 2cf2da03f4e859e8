"""Report emission: per-metric tables, a long-format file and a ranking summary."""

from __future__ import annotations

import csv
import json
import statistics
from collections import defaultdict
from collections.abc import Sequence
from pathlib import Path

from .sweep import RunRecord

METRICS = {"avg_delay": "delay", "throughput": "throughput", "max_queue": "max_queue"}
FORMATS = ("csv", "jsonl")
FIXED_NOTE = "fixed timing uses a Webster split with free-flow travel-time offsets (a stand-in for a field-optimized plan)"


class ReportError(RuntimeError):
    pass


def _num(x: float) -> float | int:
    return int(x) if float(x).is_integer() else round(float(x), 6)


def _write_rows(path: Path, header: Sequence[str], rows: list[list], fmt: str) -> None:
    with open(path, "w", newline="") as fh:
        if fmt == "csv":
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        else:
            for row in rows:
                fh.write(json.dumps(dict(zip(header, row))) + "\n")


def ranking(records: Sequence[RunRecord]) -> dict[str, list[tuple[str, float, float, int]]]:
    """Per scenario: (controller@penetration, mean delay, mean throughput, seeds), best first."""
    groups: dict[str, dict[str, list[RunRecord]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        if r.ok:
            groups[r.scenario][f"{r.controller}@{r.penetration:g}"].append(r)
    out = {}
    for scenario, by_label in sorted(groups.items()):
        rows = []
        for label, rs in by_label.items():
            rows.append((
                label,
                statistics.fmean(r.summary["mean_delay"] for r in rs),
                statistics.fmean(r.summary["throughput"] for r in rs),
                len(rs),
            ))
        out[scenario] = sorted(rows, key=lambda x: (x[1], x[0]))
    return out


def summary_text(records: Sequence[RunRecord]) -> str:
    lines = []
    for scenario, rows in ranking(records).items():
        lines.append(f"scenario {scenario}: controllers ranked by mean delay")
        for i, (label, delay, thr, n) in enumerate(rows, 1):
            lines.append(f"  {i}. {label:<18} delay {delay:8.2f} s/veh  throughput {thr:8.1f} veh  ({n} seeds)")
        lines.append("")
    failed = [r for r in records if not r.ok]
    if failed:
        lines.append(f"{len(failed)} failed runs:")
        for r in failed:
            lines.append(f"  {r.scenario} {r.controller}@{r.penetration:g} seed {r.seed}: {r.error}")
        lines.append("")
    if any(r.controller in ("fixed", "mixed") for r in records):
        lines.append("note: " + FIXED_NOTE)
    return "\n".join(lines).rstrip() + "\n"


def emit_report(records: Sequence[RunRecord], out_dir: str | Path, fmt: str = "csv") -> list[Path]:
    """Write metric tables, the long-format file and ``summary.txt``; return the paths."""
    if fmt not in FORMATS:
        raise ReportError(f"unknown report format {fmt!r}")
    good = [r for r in records if r.ok]
    if not good:
        raise ReportError("nothing to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        ext = fmt
        header = ["window_start", "window_end", "controller", "penetration", "seed", "value"]
        for attr, name in METRICS.items():
            rows = [
                [_num(w.start), _num(w.end), r.controller, _num(r.penetration), r.seed, _num(getattr(w, attr))]
                for r in good
                for w in r.windows
            ]
            path = out / f"{name}.{ext}"
            _write_rows(path, header, rows, fmt)
            written.append(path)

        long_header = ["scenario", "controller", "penetration", "seed", "window_start", "window_end", "metric", "value"]
        long_rows = [
            [r.scenario, r.controller, _num(r.penetration), r.seed, _num(w.start), _num(w.end), name, _num(getattr(w, attr))]
            for r in good
            for w in r.windows
            for attr, name in METRICS.items()
        ]
        path = out / f"metrics_long.{ext}"
        _write_rows(path, long_header, long_rows, fmt)
        written.append(path)

        run_header = ["scenario", "controller", "penetration", "seed", "mean_delay", "throughput", "peak_max_queue", "agreement", "error"]
        run_rows = [
            [
                r.scenario, r.controller, _num(r.penetration), r.seed,
                _num(r.summary.get("mean_delay", 0.0)) if r.ok else "",
                _num(r.summary.get("throughput", 0.0)) if r.ok else "",
                _num(r.summary.get("peak_max_queue", 0.0)) if r.ok else "",
                "" if r.agreement is None else _num(r.agreement),
                r.error or "",
            ]
            for r in records
        ]
        path = out / f"runs_summary.{ext}"
        _write_rows(path, run_header, run_rows, fmt)
        written.append(path)

        path = out / "summary.txt"
        path.write_text(summary_text(records))
        written.append(path)
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc.strerror or exc}") from None
    return written
