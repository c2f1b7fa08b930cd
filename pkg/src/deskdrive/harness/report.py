"""Performance-index table: one row per functional module.

Accuracy metrics are deterministic for a given config and seed and live in
``metrics.csv``; latencies depend on the machine and live in
``timing.csv``. :func:`build_report` joins the two into table rows and
:func:`emit_table` renders them as aligned text plus CSV.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .bench import LatencyStats

# row key -> (display name, accuracy metric key, timing target)
ROWS = {
    "detection": ("Image Identification", "perception.detection_accuracy", "perception.frame"),
    "tracking": ("Real-time Target Tracking and Classification", "perception.tracking_accuracy",
                 "tracking.frame"),
    "decision": ("Environmental Perception and Decision Support", "decision.success_rate",
                 "decision.forward"),
    "planner": ("Route Planning and Navigation", "planner.within_bound", "planner.replan"),
}

COLUMNS = ("Functional Module", "Accuracy (%)", "Response Time (ms)", "p95 (ms)")

HEADER_NOTE = (
    "# All metrics come from synthetic desk-scale workloads (generated 32x32 scenes, a simulated\n"
    "# straight road, random road graphs). They are not comparable to results on real driving data.\n"
    "# Response time is the mean per-call latency; p95 (ms) stands in for a qualitative efficiency rating.\n"
)


@dataclass(frozen=True)
class ReportRow:
    name: str
    accuracy: float      # percent
    mean_ms: float
    p95_ms: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"{self.name}: accuracy {self.accuracy} outside [0, 100]")
        if self.mean_ms < 0 or self.p95_ms < 0:
            raise ValueError(f"{self.name}: negative response time")


@dataclass
class MetricsReport:
    rows: list[ReportRow] = field(default_factory=list)


def format_ms(v: float) -> str:
    """Three significant figures without exponent notation: 45 -> '45', 0.0123 -> '0.0123'."""
    if v >= 100:
        return f"{v:.0f}"
    if v == 0:
        return "0"
    digits = max(0, 2 - int(math.floor(math.log10(abs(v)))))
    text = f"{v:.{digits}f}"
    return text.rstrip("0").rstrip(".") if "." in text else text


def _cells(row: ReportRow) -> tuple[str, str, str, str]:
    return row.name, f"{row.accuracy:.1f}", format_ms(row.mean_ms), format_ms(row.p95_ms)


def emit_table(report: MetricsReport, text_path=None, csv_path=None) -> tuple[str, str]:
    """Aligned text table and CSV of the same cells; written to the paths when given."""
    cells = [_cells(r) for r in report.rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(COLUMNS)]

    def line(values):
        first = values[0].ljust(widths[0])
        rest = [v.rjust(w) for v, w in zip(values[1:], widths[1:])]
        return " | ".join([first, *rest]).rstrip()

    out = [line(COLUMNS), "-+-".join("-" * w for w in widths)]
    out += [line(c) for c in cells]
    text = HEADER_NOTE + "\n".join(out) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    w.writerows(cells)
    csv_text = buf.getvalue()
    if text_path is not None:
        Path(text_path).write_text(text)
    if csv_path is not None:
        Path(csv_path).write_text(csv_text)
    return text, csv_text


# ----------------------------------------------------------------------
# metrics and timing files
# ----------------------------------------------------------------------

def write_metrics(metrics: dict[str, float], path) -> None:
    """``key,value`` lines sorted by key; floats written with full precision."""
    lines = ["key,value"] + [f"{k},{metrics[k]!r}" for k in sorted(metrics)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["key"]: float(row["value"]) for row in csv.DictReader(fh)}


TIMING_FIELDS = ("target", "mean_ms", "p50_ms", "p95_ms", "max_ms", "iterations")


def write_timing(timing: dict[str, LatencyStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_FIELDS)
        for name in sorted(timing):
            s = timing[name]
            w.writerow([name, repr(s.mean_ms), repr(s.p50_ms), repr(s.p95_ms), repr(s.max_ms), s.iterations])


def read_timing(path) -> dict[str, LatencyStats]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["target"]] = LatencyStats(float(row["mean_ms"]), float(row["p50_ms"]), float(row["p95_ms"]),
                                              float(row["max_ms"]), int(row["iterations"]))
    return out


def build_report(metrics: dict[str, float], timing: dict[str, LatencyStats]) -> MetricsReport:
    """Rows for every module that has an accuracy metric, in the fixed module order.

    A module without a timing entry reports zero latency.
    """
    rows = []
    for name, metric, target in ROWS.values():
        if metric not in metrics:
            continue
        t = timing.get(target, LatencyStats(0.0, 0.0, 0.0, 0.0, 0))
        rows.append(ReportRow(name, 100.0 * metrics[metric], t.mean_ms, t.p95_ms))
    return MetricsReport(rows)
