"""Session binding and SLO-oriented routing of prefill tasks.

The router first looks for a prefill worker whose windowed TTFT leaves slack,
then for ITL slack on the session's own decode worker, and only when both are
exhausted falls back to comparing cost estimates for every candidate.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .perf_model import PerfProfile, t_kv, t_prefill

DEFAULT_ALPHA = 0.9
DEFAULT_BETA = 0.85
DEFAULT_WINDOW = 10.0


@dataclass(eq=False)
class PrefillTask:
    session_id: int
    l_hist: int
    l_incr: int
    created_time: float = 0.0
    enqueue_time: float = 0.0
    postpone_count: int = 0
    round_index: int = 0
    task_id: int = 0
    record: object = field(default=None, repr=False)

    @property
    def kind(self) -> Literal["initial", "incremental"]:
        return "initial" if self.l_hist == 0 else "incremental"

    def __repr__(self):
        return (
            f"PrefillTask(s={self.session_id}, r={self.round_index}, hist={self.l_hist}, "
            f"incr={self.l_incr}, enq={self.enqueue_time:.3f}, pp={self.postpone_count})"
        )


class WindowedStat:
    """Trailing-window mean of latency samples keyed by completion time.

    Samples may be added in bulk: ``add(t, total, count)`` records ``count``
    samples completing at ``t`` whose latencies sum to ``total``. The mean over
    an empty window is 0, so an idle worker always reports slack.
    """

    def __init__(self, window: float = DEFAULT_WINDOW):
        if not window > 0:
            raise DomainError(f"window must be positive, got {window}")
        self.window = window
        self._times: list[float] = []
        self._entries: list[tuple[float, float, int]] = []

    def add(self, time: float, total: float, count: int = 1) -> None:
        if count <= 0:
            return
        entry = (time, total, count)
        if not self._times or time >= self._times[-1]:
            self._times.append(time)
            self._entries.append(entry)
        else:
            i = bisect_right(self._times, time)
            self._times.insert(i, time)
            self._entries.insert(i, entry)

    def add_sample(self, time: float, latency: float) -> None:
        self.add(time, latency, 1)

    def query(self, now: float) -> float:
        lo = bisect_right(self._times, now - self.window)
        hi = bisect_right(self._times, now)
        if hi <= lo:
            return 0.0
        total = 0.0
        count = 0
        for _, s, c in self._entries[lo:hi]:
            total += s
            count += c
        return total / count

    def prune(self, now: float) -> None:
        """Drop entries that can no longer fall inside a window ending at or after ``now``."""
        lo = bisect_right(self._times, now - self.window)
        if lo > 1024:
            del self._times[:lo]
            del self._entries[:lo]

    def __len__(self):
        return sum(c for _, _, c in self._entries)


@dataclass(eq=False)
class WorkerState:
    """Mutable runtime state of one prefill or decode worker.

    ``running`` is the prefill task currently executing and ``staged`` a task
    already taken off the queue whose history KV is being read. Both still
    count as queued work for cost estimation until they finish.
    """

    id: int
    phase: Literal["prefill", "decode"]
    theta: int
    prefill_queue: list[PrefillTask] = field(default_factory=list)
    decode_batch: set[int] = field(default_factory=set)
    kv_tokens: int = 0
    kv_reserved: int = 0  # decode tokens promised to current rounds but not yet produced
    kv_bytes_per_token: float = 0.0
    window: float = DEFAULT_WINDOW
    running: PrefillTask | None = None
    staged: PrefillTask | None = None
    staged_ready: bool = False
    busy_until: float = 0.0
    # decode workers: what the GPU is doing, sessions waiting for the next step
    activity: Literal["step", "prefill"] | None = None
    joining: list[int] = field(default_factory=list)
    step_members: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.ttft_stat = WindowedStat(self.window)
        self.itl_stat = WindowedStat(self.window)

    @property
    def kv_bytes_used(self) -> float:
        return self.kv_tokens * self.kv_bytes_per_token

    @property
    def name(self) -> str:
        return f"{self.phase[0]}{self.id}"

    def pending_prefill(self) -> list[PrefillTask]:
        tasks = [t for t in (self.running, self.staged) if t is not None]
        tasks.extend(self.prefill_queue)
        return tasks


@dataclass(frozen=True)
class RoutingDecision:
    """``target`` is None for local execution, else the prefill worker index."""

    target: int | None
    rationale: Literal["slack_remote", "slack_local", "argmin", "forced"]
    estimated_cost: float | None = None
    local_estimate: float | None = None
    remote_estimates: tuple[float, ...] | None = None

    @property
    def is_local(self) -> bool:
        return self.target is None


@dataclass(frozen=True)
class RoutingParams:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    ttft_thres: float = 2.0
    itl_thres: float = 0.03

    def __post_init__(self):
        if not (0 < self.alpha <= 1 and 0 < self.beta <= 1):
            raise DomainError(f"alpha and beta must lie in (0, 1], got {self.alpha}, {self.beta}")
        if not (self.ttft_thres > 0 and self.itl_thres > 0):
            raise DomainError("SLO thresholds must be positive")


def bind_session(decode_workers: Sequence[WorkerState]) -> int:
    """Index of the decode worker holding the fewest KV bytes (lowest index on ties)."""
    if not decode_workers:
        raise ConfigError("no decode workers to bind to")
    best = 0
    for i in range(1, len(decode_workers)):
        if decode_workers[i].kv_bytes_used < decode_workers[best].kv_bytes_used:
            best = i
    return best


def queue_time(tasks: Sequence[PrefillTask], theta: int, profile: PerfProfile) -> float:
    return sum(t_prefill(profile, t.l_hist, t.l_incr, theta) for t in tasks)


def estimate_local(task: PrefillTask, decode_worker: WorkerState, profile: PerfProfile) -> float:
    theta = decode_worker.theta
    own = t_prefill(profile, task.l_hist, task.l_incr, theta)
    return own + queue_time(decode_worker.pending_prefill(), theta, profile)


def estimate_remote(
    task: PrefillTask,
    prefill_worker: WorkerState,
    decode_worker: WorkerState,
    profile: PerfProfile,
) -> float:
    tp, td = prefill_worker.theta, decode_worker.theta
    t_pre = t_prefill(profile, task.l_hist, task.l_incr, tp)
    t_transfer = t_kv(profile, task.l_hist, td, tp) + t_kv(profile, task.l_incr, tp, td)
    return t_pre + t_transfer + queue_time(prefill_worker.pending_prefill(), tp, profile)


def route(
    task: PrefillTask,
    bound_decode_worker: WorkerState,
    prefill_workers: Sequence[WorkerState],
    profile: PerfProfile,
    params: RoutingParams,
    rng: np.random.Generator,
    now: float,
    allow_local: bool = True,
) -> RoutingDecision:
    """Choose where ``task`` runs.

    The random visiting order is drawn from ``rng`` on every call, so a fixed
    seed and state give a fixed decision. ``allow_local=False`` drops the
    decode worker from the candidates (the always-remote ablation).
    """
    ttft_cap = params.alpha * params.ttft_thres
    if prefill_workers:
        for i in rng.permutation(len(prefill_workers)):
            if prefill_workers[i].ttft_stat.query(now) <= ttft_cap:
                return RoutingDecision(int(i), "slack_remote")
    elif not allow_local:
        raise ConfigError("no prefill workers and local execution disabled")

    if allow_local and bound_decode_worker.itl_stat.query(now) <= params.beta * params.itl_thres:
        return RoutingDecision(None, "slack_local")

    local = estimate_local(task, bound_decode_worker, profile) if allow_local else None
    remotes = tuple(
        estimate_remote(task, p, bound_decode_worker, profile) for p in prefill_workers
    )
    # Local wins ties, then the lowest prefill index.
    best_target, best_cost = None, local
    for i, cost in enumerate(remotes):
        if best_cost is None or cost < best_cost:
            best_target, best_cost = i, cost
    return RoutingDecision(best_target, "argmin", best_cost, local, remotes)
