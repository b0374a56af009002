"""Multi-round session traces: types, synthetic generation, and trace_v1 I/O.

A trace file is JSON Lines. The first line is a header::

    {"version": "trace_v1", "name": ..., "slo": {"ttft_thres": ..., "itl_thres": ...},
     "round_fields": ["incr_input_len", "decode_len", "interaction_delay"]}

followed by one session per line::

    {"id": 0, "arrival_time": 0.31, "rounds": [[512, 40, 0.7], [128, 35, 0.0]]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, ParseError

TRACE_VERSION = "trace_v1"
ROUND_FIELDS = ["incr_input_len", "decode_len", "interaction_delay"]


@dataclass(frozen=True)
class Round:
    incr_input_len: int
    decode_len: int
    interaction_delay: float = 0.0

    def problem(self) -> str | None:
        if self.incr_input_len < 1:
            return f"incr_input_len must be >= 1, got {self.incr_input_len}"
        if self.decode_len < 1:
            return f"decode_len must be >= 1, got {self.decode_len}"
        if not self.interaction_delay >= 0:
            return f"interaction_delay must be >= 0, got {self.interaction_delay}"
        return None


@dataclass(frozen=True)
class SessionSpec:
    session_id: int
    arrival_time: float
    rounds: tuple[Round, ...]

    def problem(self) -> str | None:
        if not self.rounds:
            return "session has no rounds"
        if not self.arrival_time >= 0:
            return f"arrival_time must be >= 0, got {self.arrival_time}"
        for i, r in enumerate(self.rounds):
            p = r.problem()
            if p:
                return f"round {i}: {p}"
        if self.rounds[-1].interaction_delay != 0:
            return "final round must have interaction_delay = 0"
        return None

    @property
    def total_prefill(self) -> int:
        return sum(r.incr_input_len for r in self.rounds)

    @property
    def total_decode(self) -> int:
        return sum(r.decode_len for r in self.rounds)


@dataclass(frozen=True)
class SLO:
    ttft_thres: float
    itl_thres: float


@dataclass(frozen=True)
class Trace:
    name: str
    sessions: tuple[SessionSpec, ...]
    slo: SLO

    def validate(self) -> None:
        if not (self.slo.ttft_thres > 0 and self.slo.itl_thres > 0):
            raise DomainError("SLO thresholds must be positive")
        seen = set()
        last = -math.inf
        for s in self.sessions:
            p = s.problem()
            if p:
                raise DomainError(f"session {s.session_id}: {p}")
            if s.session_id in seen:
                raise DomainError(f"session {s.session_id}: duplicate id")
            if s.arrival_time < last:
                raise DomainError(f"session {s.session_id}: arrivals not sorted")
            seen.add(s.session_id)
            last = s.arrival_time

    @property
    def num_tasks(self) -> int:
        return sum(len(s.rounds) for s in self.sessions)


@dataclass(frozen=True)
class TraceStats:
    """Per-session workload shape. Prefill and decode means are per-session
    totals that get split across rounds."""

    name: str
    mean_rounds: float
    mean_prefill: float
    mean_decode: float
    fixed_rounds: bool = False
    length_cv: float = 0.5
    delay_mean: float = 0.5
    first_round_fraction: float = 0.5
    ttft_thres: float = 2.0
    itl_thres: float = 0.03


# Per-trace means for the agentic (ToolBench, GAIA) and iterative-RAG
# (HotpotQA, DuReader) workloads; the RAG traces always run three retrievals.
PRESETS: dict[str, TraceStats] = {
    "toolbench": TraceStats("toolbench", 3.96, 703.79, 50.39),
    "gaia": TraceStats("gaia", 11.32, 6161.02, 528.76, ttft_thres=4.0),
    "hotpotqa": TraceStats("hotpotqa", 3, 1569.8, 80.03, fixed_rounds=True),
    "dureader": TraceStats("dureader", 3, 3081.23, 150.10, fixed_rounds=True),
}


def _lognormal(rng: np.random.Generator, mean: float, cv: float, size: int) -> np.ndarray:
    if cv <= 0:
        return np.full(size, float(mean))
    sigma2 = math.log1p(cv * cv)
    return rng.lognormal(math.log(mean) - sigma2 / 2, math.sqrt(sigma2), size)


def _split_prefill(total: int, n: int, first_fraction: float) -> list[int]:
    if n == 1:
        return [total]
    first = min(max(1, round(total * first_fraction)), total - (n - 1))
    rest = total - first
    base, extra = divmod(rest, n - 1)
    return [first] + [base + (1 if i < extra else 0) for i in range(n - 1)]


def _split_even(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def gen_trace(
    stats: TraceStats,
    arrival_rate: float,
    num_sessions: int,
    seed: int,
    ttft_thres: float | None = None,
    itl_thres: float | None = None,
) -> Trace:
    """Generate a Poisson-arrival trace whose per-session means follow ``stats``."""
    if not arrival_rate > 0:
        raise DomainError(f"arrival_rate must be positive, got {arrival_rate}")
    if num_sessions < 1:
        raise DomainError(f"num_sessions must be >= 1, got {num_sessions}")
    if stats.mean_rounds < 1 or stats.mean_prefill < 1 or stats.mean_decode < 1:
        raise DomainError("trace stats need mean rounds, prefill and decode >= 1")

    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(1.0 / arrival_rate, num_sessions))
    if stats.fixed_rounds:
        n_rounds = np.full(num_sessions, int(round(stats.mean_rounds)))
    else:
        n_rounds = rng.geometric(1.0 / stats.mean_rounds, num_sessions)
    prefill = _lognormal(rng, stats.mean_prefill, stats.length_cv, num_sessions)
    decode = _lognormal(rng, stats.mean_decode, stats.length_cv, num_sessions)
    delays = rng.exponential(stats.delay_mean, int(n_rounds.sum())) if stats.delay_mean > 0 else None

    sessions = []
    k = 0
    for i in range(num_sessions):
        n = int(n_rounds[i])
        p_total = max(n, int(round(prefill[i])))
        d_total = max(n, int(round(decode[i])))
        p_split = _split_prefill(p_total, n, stats.first_round_fraction)
        d_split = _split_even(d_total, n)
        rounds = []
        for j in range(n):
            delay = 0.0 if j == n - 1 or delays is None else float(delays[k + j])
            rounds.append(Round(p_split[j], d_split[j], delay))
        k += n
        sessions.append(SessionSpec(i, float(arrivals[i]), tuple(rounds)))
    return Trace(
        name=stats.name,
        sessions=tuple(sessions),
        slo=SLO(
            ttft_thres if ttft_thres is not None else stats.ttft_thres,
            itl_thres if itl_thres is not None else stats.itl_thres,
        ),
    )


def retime(trace: Trace, arrival_rate: float, seed: int) -> Trace:
    """Redraw Poisson arrivals at a new rate, keeping every session's rounds."""
    if not arrival_rate > 0:
        raise DomainError(f"arrival_rate must be positive, got {arrival_rate}")
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(1.0 / arrival_rate, len(trace.sessions)))
    sessions = tuple(
        replace(s, arrival_time=float(t)) for s, t in zip(trace.sessions, arrivals)
    )
    return replace(trace, sessions=sessions)


def trace_stats(trace: Trace) -> TraceStats:
    """Empirical per-session means of a trace, usable as generator input."""
    n = len(trace.sessions)
    if n == 0:
        raise DomainError("empty trace")
    rounds = [len(s.rounds) for s in trace.sessions]
    delays = [r.interaction_delay for s in trace.sessions for r in s.rounds[:-1]]
    return TraceStats(
        name=trace.name,
        mean_rounds=sum(rounds) / n,
        mean_prefill=sum(s.total_prefill for s in trace.sessions) / n,
        mean_decode=sum(s.total_decode for s in trace.sessions) / n,
        fixed_rounds=len(set(rounds)) == 1,
        delay_mean=sum(delays) / len(delays) if delays else 0.0,
        ttft_thres=trace.slo.ttft_thres,
        itl_thres=trace.slo.itl_thres,
    )


def arrival_rate_of(trace: Trace) -> float:
    """Sessions per second over the arrival span of the trace."""
    if not trace.sessions:
        raise DomainError("empty trace")
    span = trace.sessions[-1].arrival_time
    return len(trace.sessions) / span if span > 0 else float(len(trace.sessions))


# -- trace_v1 ----------------------------------------------------------------

def dumps_trace(trace: Trace) -> str:
    header = {
        "version": TRACE_VERSION,
        "name": trace.name,
        "slo": {"ttft_thres": trace.slo.ttft_thres, "itl_thres": trace.slo.itl_thres},
        "round_fields": ROUND_FIELDS,
    }
    lines = [json.dumps(header)]
    for s in trace.sessions:
        rec = {
            "id": s.session_id,
            "arrival_time": s.arrival_time,
            "rounds": [[r.incr_input_len, r.decode_len, r.interaction_delay] for r in s.rounds],
        }
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def loads_trace(text: str) -> Trace:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty trace document", "line 1")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc.msg}", "line 1") from None
    if not isinstance(header, dict) or header.get("version") != TRACE_VERSION:
        got = header.get("version") if isinstance(header, dict) else None
        raise ParseError(f"unsupported version {got!r}, expected {TRACE_VERSION!r}", "line 1")
    slo = header.get("slo")
    if not (isinstance(slo, dict) and _is_num(slo.get("ttft_thres")) and _is_num(slo.get("itl_thres"))):
        raise ParseError("slo must hold numeric ttft_thres and itl_thres", "line 1")
    if not (slo["ttft_thres"] > 0 and slo["itl_thres"] > 0):
        raise ParseError("slo thresholds must be positive", "line 1")
    if header.get("round_fields", ROUND_FIELDS) != ROUND_FIELDS:
        raise ParseError(f"round_fields must be {ROUND_FIELDS}", "line 1")

    sessions = []
    seen = set()
    last = -math.inf
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"line {lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, f"{where} column {exc.colno}") from None
        if not isinstance(rec, dict) or not _is_int(rec.get("id")):
            raise ParseError("session record needs an integer id", where)
        sid = rec["id"]
        where = f"{where} (session {sid})"
        arrival = rec.get("arrival_time")
        raw_rounds = rec.get("rounds")
        if not _is_num(arrival):
            raise ParseError("arrival_time must be a number", where)
        if not isinstance(raw_rounds, list):
            raise ParseError("rounds must be a list", where)
        rounds = []
        for i, r in enumerate(raw_rounds):
            if not (isinstance(r, list) and len(r) == 3 and _is_int(r[0]) and _is_int(r[1]) and _is_num(r[2])):
                raise ParseError("round must be [incr_input_len, decode_len, interaction_delay]", f"{where} round {i}")
            rounds.append(Round(r[0], r[1], float(r[2])))
        session = SessionSpec(sid, float(arrival), tuple(rounds))
        problem = session.problem()
        if problem:
            raise ParseError(problem, where)
        if sid in seen:
            raise ParseError("duplicate session id", where)
        if session.arrival_time < last:
            raise ParseError("sessions must be sorted by arrival_time", where)
        seen.add(sid)
        last = session.arrival_time
        sessions.append(session)
    name = header.get("name", "")
    if not isinstance(name, str):
        raise ParseError("name must be a string", "line 1")
    return Trace(name, tuple(sessions), SLO(float(slo["ttft_thres"]), float(slo["itl_thres"])))


def save_trace(trace: Trace, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_trace(trace))


def load_trace(path) -> Trace:
    with open(path) as fh:
        return loads_trace(fh.read())
