"""Aggregate metrics, raw-sample CSV dumps and cross-run comparison tables.

Every aggregate is a pure function of three flat sample tables (tasks, ITL
tokens, sessions). ``build_report`` flattens a ``SimResult`` into those
tables; ``load_samples`` reads them back from CSV. Floats are written with
``repr`` so a report rebuilt from the dumps is bit-identical to the original.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping, Sequence

from .errors import ParseError
from .sim_engine import SimResult

TASK_COLUMNS = (
    "task_id", "session_id", "round_index", "kind", "l_hist", "l_incr",
    "created", "enqueued", "location", "worker", "started", "prefill_done",
    "completed", "estimate", "postpone_count",
)
ITL_COLUMNS = ("session_id", "round_index", "token_index", "time", "itl")
SESSION_COLUMNS = (
    "session_id", "arrival", "num_rounds", "decode_worker", "admitted",
    "completed", "ttft_ok", "itl_ok", "slo_ok", "mean_itl",
)
_INT_COLUMNS = {
    "task_id", "session_id", "round_index", "l_hist", "l_incr", "postpone_count",
    "token_index", "num_rounds", "decode_worker",
}
_BOOL_COLUMNS = {"ttft_ok", "itl_ok", "slo_ok"}
_STR_COLUMNS = {"kind", "location", "worker"}


def p95(samples: Sequence[float]) -> float:
    """Nearest-rank 95th percentile: element ceil(0.95 n) of the sorted list (1-based)."""
    if not samples:
        return math.nan
    s = sorted(samples)
    return s[math.ceil(0.95 * len(s)) - 1]


def _mean(samples: Sequence[float]) -> float:
    return math.fsum(samples) / len(samples) if samples else math.nan


@dataclass(frozen=True)
class Report:
    trace_name: str
    num_sessions: int
    num_completed: int
    num_incomplete: int
    slo_attainment: float
    ttft_attainment: float
    itl_attainment: float
    ttft_initial: tuple[float, float]  # (mean, p95)
    ttft_incremental: tuple[float, float]
    ttft_enqueue: tuple[float, float]  # clock starting at queue entry
    itl: tuple[float, float]
    e2e_latency: float
    local_fraction: float
    num_tasks: int
    num_itl_samples: int
    empty: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def flat(self) -> dict[str, object]:
        """One scalar per key, pairs split into ``_mean`` / ``_p95`` columns."""
        out: dict[str, object] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f"{f.name}_mean"], out[f"{f.name}_p95"] = v
            else:
                out[f.name] = v
        return out


def _task_rows(result: SimResult) -> list[dict]:
    return [{c: getattr(t, c) for c in TASK_COLUMNS} for t in result.tasks]


def _itl_rows(result: SimResult) -> list[dict]:
    return [dict(zip(ITL_COLUMNS, s)) for s in result.itl_samples]


def _session_rows(result: SimResult) -> list[dict]:
    return [{c: getattr(s, c) for c in SESSION_COLUMNS} for s in result.sessions]


def aggregate(
    trace_name: str,
    tasks: Sequence[Mapping],
    itls: Sequence[Mapping],
    sessions: Sequence[Mapping],
) -> Report:
    """Build a report from flat sample rows (as produced by the CSV dumps)."""
    done = [s for s in sessions if not math.isnan(s["completed"])]
    if not done:
        nan2 = (math.nan, math.nan)
        return Report(trace_name, len(sessions), 0, len(sessions), math.nan, math.nan,
                      math.nan, nan2, nan2, nan2, nan2, math.nan, math.nan,
                      len(tasks), len(itls), empty=True)
    finished = [t for t in tasks if not math.isnan(t["completed"])]
    ini = [t["completed"] - t["created"] for t in finished if t["kind"] == "initial"]
    inc = [t["completed"] - t["created"] for t in finished if t["kind"] == "incremental"]
    enq = [t["completed"] - t["enqueued"] for t in finished]
    gaps = [r["itl"] for r in itls]
    n = len(done)
    return Report(
        trace_name=trace_name,
        num_sessions=len(sessions),
        num_completed=n,
        num_incomplete=len(sessions) - n,
        slo_attainment=sum(1 for s in done if s["slo_ok"]) / n,
        ttft_attainment=sum(1 for s in done if s["ttft_ok"]) / n,
        itl_attainment=sum(1 for s in done if s["itl_ok"]) / n,
        ttft_initial=(_mean(ini), p95(ini)),
        ttft_incremental=(_mean(inc), p95(inc)),
        ttft_enqueue=(_mean(enq), p95(enq)),
        itl=(_mean(gaps), p95(gaps)),
        e2e_latency=_mean([s["completed"] - s["arrival"] for s in done]),
        local_fraction=(sum(1 for t in tasks if t["location"] == "local") / len(tasks)
                        if tasks else 0.0),
        num_tasks=len(tasks),
        num_itl_samples=len(gaps),
    )


def build_report(result: SimResult) -> Report:
    return aggregate(result.trace_name, _task_rows(result), _itl_rows(result),
                     _session_rows(result))


# -- CSV dumps -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: str, columns: Sequence[str], rows: Iterable[Mapping]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    os.replace(tmp, path)


def _parse_value(col: str, text: str):
    if col in _INT_COLUMNS:
        return int(text)
    if col in _BOOL_COLUMNS:
        if text not in ("0", "1"):
            raise ValueError(f"expected 0 or 1, got {text!r}")
        return text == "1"
    if col in _STR_COLUMNS:
        return text
    return float(text)


def _read_csv(path: str, columns: Sequence[str]) -> list[dict]:
    name = os.path.basename(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != tuple(columns):
            raise ParseError(f"unexpected header {header}", f"{name}: line 1")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(columns):
                raise ParseError(f"expected {len(columns)} fields, got {len(rec)}",
                                 f"{name}: line {lineno}")
            row = {}
            for col, text in zip(columns, rec):
                try:
                    row[col] = _parse_value(col, text)
                except ValueError as e:
                    raise ParseError(str(e), f"{name}: line {lineno}, column {col}") from None
            rows.append(row)
    return rows


def write_samples(result: SimResult, outdir: str) -> None:
    """Write tasks.csv, itl.csv and sessions.csv into ``outdir``."""
    os.makedirs(outdir, exist_ok=True)
    _write_csv(os.path.join(outdir, "tasks.csv"), TASK_COLUMNS, _task_rows(result))
    _write_csv(os.path.join(outdir, "itl.csv"), ITL_COLUMNS, _itl_rows(result))
    _write_csv(os.path.join(outdir, "sessions.csv"), SESSION_COLUMNS, _session_rows(result))


def load_samples(outdir: str) -> tuple[list[dict], list[dict], list[dict]]:
    return (
        _read_csv(os.path.join(outdir, "tasks.csv"), TASK_COLUMNS),
        _read_csv(os.path.join(outdir, "itl.csv"), ITL_COLUMNS),
        _read_csv(os.path.join(outdir, "sessions.csv"), SESSION_COLUMNS),
    )


def report_from_dir(outdir: str, trace_name: str | None = None) -> Report:
    """Rebuild a report from the CSV dumps of one simulation output directory."""
    if trace_name is None:
        cfg = os.path.join(outdir, "config.json")
        trace_name = ""
        if os.path.exists(cfg):
            with open(cfg) as f:
                trace_name = json.load(f).get("trace_name", "")
    return aggregate(trace_name, *load_samples(outdir))


# -- formatting ----------------------------------------------------------------

def format_report(report: Report) -> str:
    if report.empty:
        return f"trace {report.trace_name}: no completed sessions ({report.num_sessions} total)\n"

    def pair(p):
        return f"mean {p[0]:.4f} s  p95 {p[1]:.4f} s"

    lines = [
        f"trace               {report.trace_name}",
        f"sessions            {report.num_completed} completed, {report.num_incomplete} incomplete",
        f"SLO attainment      {report.slo_attainment:.4f}"
        f"  (ttft {report.ttft_attainment:.4f}, itl {report.itl_attainment:.4f})",
        f"TTFT initial        {pair(report.ttft_initial)}",
        f"TTFT incremental    {pair(report.ttft_incremental)}",
        f"TTFT from enqueue   {pair(report.ttft_enqueue)}",
        f"ITL                 {pair(report.itl)}",
        f"E2E latency         mean {report.e2e_latency:.4f} s",
        f"local prefill       {report.local_fraction:.4f} of {report.num_tasks} tasks",
    ]
    return "\n".join(lines) + "\n"


def report_csv(report: Report) -> str:
    flat = report.flat()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(flat.keys())
    w.writerow(_fmt(v) for v in flat.values())
    return buf.getvalue()


COMPARE_METRICS = (
    "slo_attainment", "ttft_attainment", "itl_attainment",
    "ttft_initial_mean", "ttft_initial_p95", "ttft_incremental_mean",
    "ttft_incremental_p95", "itl_mean", "itl_p95", "e2e_latency", "local_fraction",
)


@dataclass(frozen=True)
class Comparison:
    names: tuple[str, ...]
    rows: tuple[dict, ...]  # one per metric: metric, then value and delta per report
    warnings: tuple[str, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["metric"]
        for n in self.names:
            header += [n, f"{n}_delta"]
        w.writerow(header)
        for row in self.rows:
            w.writerow([row["metric"]] + [_fmt(row[h]) for h in header[1:]])
        return buf.getvalue()

    def to_text(self) -> str:
        header = ["metric"] + [n for n in self.names]
        table = [header]
        for row in self.rows:
            cells = [row["metric"]]
            for i, n in enumerate(self.names):
                v, d = row[n], row[f"{n}_delta"]
                cells.append(f"{v:.4f}" if i == 0 else f"{v:.4f} ({d:+.4f})")
            table.append(cells)
        widths = [max(len(r[i]) for r in table) for i in range(len(header))]
        lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in table]
        lines += [f"warning: {m}" for m in self.warnings]
        return "\n".join(lines) + "\n"


def compare_reports(reports: Sequence[tuple[str, Report]],
                    metrics: Sequence[str] = COMPARE_METRICS) -> Comparison:
    """Align reports metric by metric; deltas are relative to the first report."""
    if not reports:
        raise ValueError("nothing to compare")
    names = tuple(n for n, _ in reports)
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate report names: {names}")
    flats = [r.flat() for _, r in reports]
    rows = []
    for m in metrics:
        base = flats[0][m]
        row = {"metric": m}
        for n, f in zip(names, flats):
            row[n] = f[m]
            row[f"{n}_delta"] = f[m] - base
        rows.append(row)
    warnings = []
    traces = {r.trace_name for _, r in reports}
    if len(traces) > 1:
        warnings.append(f"reports come from different traces: {sorted(traces)}")
    return Comparison(names, tuple(rows), tuple(warnings))
