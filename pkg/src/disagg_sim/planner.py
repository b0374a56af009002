"""Offline deployment planning.

A plan chooses, for every parallelism degree ``n``, how many prefill replicas
(``x[n]``) and decode replicas (``y[n]``) to run within ``N`` GPUs. Its cost
is the worst per-replica P95 latency among the instantiated (phase, degree)
pairs. The optimum is found exactly: candidate objectives are the distinct
coefficient values, and a candidate ``Z`` is feasible iff the cheapest
admissible prefill and decode replica fit together.

Ties at the optimal ``Z`` prefer more replicas, then more GPUs in use, then
the lexicographically smallest ``(x, y)``. A reachability table over
(replica count, GPUs, phase flags) makes that ordering exact without listing
every plan.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import DomainError, ParseError, SimError
from .perf_model import PerfProfile, t_decode, t_prefill
from .workload import TraceStats, gen_trace

PLAN_VERSION = "deployment_plan_v1"


class InfeasibleError(SimError):
    """No plan with at least one prefill and one decode replica fits."""


def _clean(counts: Mapping[int, int]) -> dict[int, int]:
    out = {}
    for n, c in sorted(counts.items()):
        if c < 0:
            raise DomainError(f"negative replica count {c} for degree {n}")
        if c:
            out[int(n)] = int(c)
    return out


@dataclass(frozen=True)
class DeploymentPlan:
    x: Mapping[int, int]
    y: Mapping[int, int]
    objective_z: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", _clean(self.x))
        object.__setattr__(self, "y", _clean(self.y))

    @property
    def gpus_used(self) -> int:
        return sum(n * c for n, c in self.x.items()) + sum(n * c for n, c in self.y.items())

    @property
    def replicas(self) -> int:
        return sum(self.x.values()) + sum(self.y.values())

    def prefill_degrees(self) -> list[int]:
        """One entry per prefill replica, ascending by degree."""
        return [n for n, c in self.x.items() for _ in range(c)]

    def decode_degrees(self) -> list[int]:
        return [n for n, c in self.y.items() for _ in range(c)]

    def label(self) -> str:
        def side(counts):
            if not counts:
                return "<none>"
            return "+".join(f"<TP={n}, DP={c}>" for n, c in sorted(counts.items(), reverse=True))

        return f"P:{side(self.x)}, D:{side(self.y)}"

    def vector(self, degrees: Sequence[int]) -> tuple[int, ...]:
        return tuple(self.x.get(n, 0) for n in degrees) + tuple(self.y.get(n, 0) for n in degrees)

    def to_dict(self) -> dict:
        return {
            "version": PLAN_VERSION,
            "prefill": {str(n): c for n, c in self.x.items()},
            "decode": {str(n): c for n, c in self.y.items()},
            "objective_z": self.objective_z,
            "gpus_used": self.gpus_used,
            "label": self.label(),
        }


def plan_from_dict(doc) -> DeploymentPlan:
    if not isinstance(doc, dict) or doc.get("version") != PLAN_VERSION:
        got = doc.get("version") if isinstance(doc, dict) else None
        raise ParseError(f"unsupported version {got!r}, expected {PLAN_VERSION!r}", "version")
    sides = {}
    for key in ("prefill", "decode"):
        table = doc.get(key)
        if not isinstance(table, dict):
            raise ParseError("expected an object mapping degree to replica count", key)
        counts = {}
        for n, c in table.items():
            if not n.isdigit() or not isinstance(c, int) or isinstance(c, bool) or c < 0:
                raise ParseError("expected non-negative integer count", f"{key}.{n}")
            counts[int(n)] = c
        sides[key] = counts
    z = doc.get("objective_z")
    if z is not None and not isinstance(z, (int, float)):
        raise ParseError("objective_z must be a number or null", "objective_z")
    if not any(sides["decode"].values()):
        raise ParseError("plan needs at least one decode replica", "decode")
    return DeploymentPlan(sides["prefill"], sides["decode"], z)


def save_plan(plan: DeploymentPlan, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(plan.to_dict(), indent=2) + "\n")


def load_plan(path) -> DeploymentPlan:
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return plan_from_dict(doc)


@dataclass(frozen=True)
class LatencyCoefficients:
    """Per-replica P95 latency by degree; ``inf`` marks an unusable degree."""

    tau_pre: Mapping[int, float]
    tau_dec: Mapping[int, float]
    provenance: Mapping[str, object] = field(default_factory=dict)

    def check(self, degrees: Sequence[int]) -> None:
        for n in degrees:
            for name, table in (("tau_pre", self.tau_pre), ("tau_dec", self.tau_dec)):
                if n not in table:
                    raise DomainError(f"{name} missing degree {n}")
                if not table[n] > 0:
                    raise DomainError(f"{name}[{n}] must be positive, got {table[n]}")

    def to_dict(self) -> dict:
        def enc(v):
            return v if math.isfinite(v) else None

        return {
            "tau_pre": {str(n): enc(v) for n, v in sorted(self.tau_pre.items())},
            "tau_dec": {str(n): enc(v) for n, v in sorted(self.tau_dec.items())},
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, doc) -> "LatencyCoefficients":
        def dec(table, where):
            if not isinstance(table, dict):
                raise ParseError("expected an object", where)
            return {int(n): (math.inf if v is None else float(v)) for n, v in table.items()}

        return cls(dec(doc.get("tau_pre"), "tau_pre"), dec(doc.get("tau_dec"), "tau_dec"),
                   doc.get("provenance", {}))


def plan_objective(plan: DeploymentPlan, coeffs: LatencyCoefficients) -> float:
    """Worst coefficient over the (phase, degree) pairs the plan instantiates."""
    vals = [coeffs.tau_pre[n] for n in plan.x] + [coeffs.tau_dec[n] for n in plan.y]
    return max(vals) if vals else 0.0


# -- exact solver ------------------------------------------------------------

class _Level:
    """All plans whose every instantiated (phase, degree) is admissible, with
    the additional requirement of touching at least one ``tight`` item."""

    def __init__(self, items: list[tuple[int, int, bool]], N: int, need_tight: bool):
        # items: (phase 0=prefill/1=decode, degree, tight) in lexicographic variable order
        items = [it for it in items if it[1] <= N]
        self.items = items
        self.N = N
        self.need = (1, 1, 1 if need_tight else 0)
        cmax = N // min(d for _, d, _ in items) if items else 0
        self.cmax = cmax
        shape = (cmax + 1, N + 1, 2, 2, 2)
        tables = [None] * (len(items) + 1)
        base = np.zeros(shape, dtype=bool)
        base[0, 0, 0, 0, 0] = True
        tables[len(items)] = base
        for i in range(len(items) - 1, -1, -1):
            phase, d, tight = items[i]
            flags = (phase == 0, phase == 1, tight)
            r = tables[i + 1].copy()
            for c in range(1, cmax + 1):
                moved = _force_flags(r[c - 1, : N + 1 - d], flags)
                r[c, d:] |= moved
            tables[i] = r
        self.tables = tables

    def _reachable(self, i: int, c: int, g: int, req: tuple[int, int, int]) -> bool:
        if c < 0 or g < 0 or c > self.cmax:
            return False
        return bool(self.tables[i][c, g, req[0]:, req[1]:, req[2]:].any())

    def totals(self) -> list[tuple[int, int]]:
        """(replicas, gpus) pairs that complete plans, best first."""
        top = self.tables[0]
        a, b, c = self.need
        ok = top[:, :, a:, b:, c:].any(axis=(2, 3, 4))
        pairs = [(int(cc), int(gg)) for cc, gg in zip(*np.nonzero(ok))]
        pairs.sort(key=lambda p: (-p[0], -p[1]))
        return pairs

    def plans(self, c: int, g: int) -> Iterator[list[int]]:
        """Count vectors (one entry per item) summing to exactly ``c`` replicas
        and ``g`` GPUs, in lexicographic order."""
        n = len(self.items)
        values = [0] * n

        def rec(i, c_left, g_left, req):
            if i == n:
                yield list(values)
                return
            phase, d, tight = self.items[i]
            v = 0
            while v <= c_left and v * d <= g_left:
                if v:
                    nreq = (
                        0 if phase == 0 else req[0],
                        0 if phase == 1 else req[1],
                        0 if tight else req[2],
                    )
                else:
                    nreq = req
                if self._reachable(i + 1, c_left - v, g_left - v * d, nreq):
                    values[i] = v
                    yield from rec(i + 1, c_left - v, g_left - v * d, nreq)
                v += 1
            values[i] = 0

        if self._reachable(0, c, g, self.need):
            yield from rec(0, c, g, self.need)

    def ordered(self) -> Iterator[list[int]]:
        for c, g in self.totals():
            yield from self.plans(c, g)


def _force_flags(arr: np.ndarray, flags: tuple[bool, bool, bool]) -> np.ndarray:
    """Map every state to the state with the given flags switched on."""
    out = arr
    for axis, on in enumerate(flags):
        if not on:
            continue
        ax = out.ndim - 3 + axis
        merged = out.any(axis=ax, keepdims=True)
        out = np.concatenate([np.zeros_like(merged), merged], axis=ax)
    return out


def _levels(coeffs: LatencyCoefficients, degrees: Sequence[int]) -> list[float]:
    vals = {v for n in degrees for v in (coeffs.tau_pre[n], coeffs.tau_dec[n]) if math.isfinite(v)}
    return sorted(vals)


def _level_items(coeffs, degrees, z) -> list[tuple[int, int, bool]]:
    items = []
    for phase, table in ((0, coeffs.tau_pre), (1, coeffs.tau_dec)):
        for n in degrees:
            if table[n] <= z:
                items.append((phase, n, table[n] == z))
    return items


def _to_plan(items, values, z) -> DeploymentPlan:
    x, y = {}, {}
    for (phase, n, _), v in zip(items, values):
        if v:
            (x if phase == 0 else y)[n] = v
    return DeploymentPlan(x, y, z)


def _check_inputs(coeffs: LatencyCoefficients, N: int, degrees: Sequence[int]) -> list[int]:
    degrees = sorted(set(int(d) for d in degrees))
    if not degrees:
        raise DomainError("empty degree set")
    if any(d < 1 for d in degrees):
        raise DomainError("degrees must be positive")
    coeffs.check(degrees)
    if N < 0:
        raise DomainError(f"negative GPU count {N}")
    return degrees


def _optimal_level(coeffs, N, degrees) -> float:
    for z in _levels(coeffs, degrees):
        p = [n for n in degrees if coeffs.tau_pre[n] <= z]
        d = [n for n in degrees if coeffs.tau_dec[n] <= z]
        if p and d and min(p) + min(d) <= N:
            return z
    raise InfeasibleError(
        f"no prefill+decode pair fits in {N} GPUs with degrees {list(degrees)}"
    )


def solve(coeffs: LatencyCoefficients, N: int, degrees: Sequence[int]) -> DeploymentPlan:
    """Globally optimal plan; raises :class:`InfeasibleError` if none exists."""
    degrees = _check_inputs(coeffs, N, degrees)
    z = _optimal_level(coeffs, N, degrees)
    level = _Level(_level_items(coeffs, degrees, z), N, need_tight=True)
    for values in level.ordered():
        return _to_plan(level.items, values, z)
    raise AssertionError("optimal level has no plan")  # pragma: no cover


def top_k(coeffs: LatencyCoefficients, N: int, degrees: Sequence[int], k: int) -> list[DeploymentPlan]:
    """The ``k`` best distinct plans in solve's ordering (fewer if fewer exist)."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    degrees = _check_inputs(coeffs, N, degrees)
    out: list[DeploymentPlan] = []
    for z in _levels(coeffs, degrees):
        level = _Level(_level_items(coeffs, degrees, z), N, need_tight=True)
        for values in level.ordered():
            out.append(_to_plan(level.items, values, z))
            if len(out) == k:
                return out
    if not out:
        raise InfeasibleError(f"no prefill+decode pair fits in {N} GPUs")
    return out


# -- coefficient estimation --------------------------------------------------

@dataclass(frozen=True)
class ReferenceLoad:
    """Traffic offered to a single replica while measuring its coefficient.

    With ``policy="gpu_share"`` a degree-``n`` replica sees ``rate * n / total_gpus``
    sessions per second; with ``"per_replica"`` every replica sees ``rate``.
    """

    arrival_rate: float
    total_gpus: int
    num_sessions: int = 200
    policy: str = "gpu_share"

    def rate_for(self, n: int) -> float:
        if self.policy == "gpu_share":
            return self.arrival_rate * n / self.total_gpus
        if self.policy == "per_replica":
            return self.arrival_rate
        raise DomainError(f"unknown load policy {self.policy!r}")


def p95(samples: Sequence[float]) -> float:
    s = sorted(samples)
    return s[math.ceil(0.95 * len(s)) - 1]


def _prefill_replica_p95(trace, profile: PerfProfile, n: int) -> float:
    """FIFO single-server run of every prefill task a replica would see.

    A session's next task becomes ready after its previous prefill, a nominal
    batch-of-one decode and the interaction delay.
    """
    heap = []
    for i, s in enumerate(trace.sessions):
        heapq.heappush(heap, (s.arrival_time, i, 0, 0))
    free = 0.0
    busy = 0.0
    first = trace.sessions[0].arrival_time
    last_ready = first
    ttfts = []
    t_step = t_decode(profile, 1, n)
    while heap:
        ready, i, r, hist = heapq.heappop(heap)
        rnd = trace.sessions[i].rounds[r]
        cost = t_prefill(profile, hist, rnd.incr_input_len, n)
        start = max(free, ready)
        free = start + cost
        busy += cost
        last_ready = max(last_ready, ready)
        ttfts.append(free - ready)
        if r + 1 < len(trace.sessions[i].rounds):
            nxt = free + rnd.decode_len * t_step + rnd.interaction_delay
            heapq.heappush(heap, (nxt, i, r + 1, hist + rnd.incr_input_len + rnd.decode_len))
    span = last_ready - first
    if span > 0 and busy / span >= 1.0:
        return math.inf
    return p95(ttfts)


def _decode_replica_p95(trace, profile: PerfProfile, n: int) -> float:
    """Continuous-batching run of every decode token a replica would see.

    Prefill is treated as instantaneous compute on an idle prefill worker.
    """
    capacity = profile.kv_capacity_bytes(n)
    bpt = profile.kv_bytes_per_token
    heap = []  # (ready, session, round, context)
    for i, s in enumerate(trace.sessions):
        first = s.rounds[0]
        ready = s.arrival_time + t_prefill(profile, 0, first.incr_input_len, n)
        heapq.heappush(heap, (ready, i, 0, first.incr_input_len))
    active: dict[int, list] = {}
    t = 0.0
    itls = []
    kv_tokens = 0
    while heap or active:
        if not active:
            t = max(t, heap[0][0])
        while heap and heap[0][0] <= t:
            ready, i, r, ctx = heapq.heappop(heap)
            # [round, tokens left, last token time, context tokens]
            active[i] = [r, trace.sessions[i].rounds[r].decode_len, None, ctx]
            kv_tokens += trace.sessions[i].rounds[r].incr_input_len
        if kv_tokens * bpt > capacity:
            return math.inf
        t += t_decode(profile, len(active), n)
        for i in sorted(active):
            st = active[i]
            if st[2] is not None:
                itls.append(t - st[2])
            st[2] = t
            st[1] -= 1
            st[3] += 1
            kv_tokens += 1
            if st[1] == 0:
                del active[i]
                rounds = trace.sessions[i].rounds
                r = st[0]
                if r + 1 < len(rounds):
                    nxt = rounds[r + 1]
                    ready = t + rounds[r].interaction_delay + t_prefill(profile, st[3], nxt.incr_input_len, n)
                    heapq.heappush(heap, (ready, i, r + 1, st[3] + nxt.incr_input_len))
                else:
                    kv_tokens -= st[3]
    if not itls:
        return t_decode(profile, 1, n)
    return p95(itls)


def estimate_coefficients(
    stats: TraceStats,
    profile: PerfProfile,
    degrees: Sequence[int],
    load: ReferenceLoad,
    seed: int,
) -> LatencyCoefficients:
    """Simulate one replica per (phase, degree) and record its P95 latency."""
    if not load.arrival_rate > 0 or load.num_sessions < 1 or load.total_gpus < 1:
        raise DomainError("reference load must have positive rate, sessions and GPUs")
    tau_pre, tau_dec = {}, {}
    for n in sorted(degrees):
        profile.check_degree(n)
        trace = gen_trace(stats, load.rate_for(n), load.num_sessions, seed)
        tau_pre[n] = _prefill_replica_p95(trace, profile, n)
        tau_dec[n] = _decode_replica_p95(trace, profile, n)
    provenance = {
        "trace": stats.name,
        "arrival_rate": load.arrival_rate,
        "total_gpus": load.total_gpus,
        "num_sessions": load.num_sessions,
        "policy": load.policy,
        "seed": seed,
    }
    return LatencyCoefficients(tau_pre, tau_dec, provenance)
