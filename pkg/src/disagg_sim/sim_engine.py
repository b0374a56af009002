"""Discrete-event simulation of a prefill/decode-disaggregated cluster.

Sessions arrive, bind to a decode worker, and alternate between prefill
tasks (routed to a prefill worker or run locally on the decode worker),
continuous-batched decoding, and environment interactions that run off the
GPUs. Remote prefills read the session's history KV lazily, when the task is
picked for execution, so the read overlaps the worker's current task; the new
KV is written back to the decode worker after the prefill finishes.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .coordinator import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_WINDOW,
    PrefillTask,
    RoutingDecision,
    RoutingParams,
    WindowedStat,
    WorkerState,
    bind_session,
    estimate_local,
    estimate_remote,
    route,
)
from .errors import ConfigError
from .perf_model import PerfProfile, t_decode, t_kv, t_prefill
from .planner import DeploymentPlan
from .reorder import DEFAULT_W, reorder_and_dequeue
from .workload import SLO, SessionSpec, Trace

__all__ = [
    "KIND_PRIORITY",
    "KvSchedule",
    "SchedulerParams",
    "SessionRecord",
    "SimEvent",
    "SimResult",
    "Simulator",
    "TaskRecord",
    "Verdict",
    "WindowedStat",
    "WorkerState",
    "kv_transfer_schedule",
    "run",
    "slo_verdict",
]

RoutingMode = Literal["adaptive", "always-remote", "always-local"]
ROUTING_MODES = ("adaptive", "always-remote", "always-local")

# Admissions are observed before completions at equal timestamps.
KIND_PRIORITY = {
    "arrival": 0,
    "interaction_done": 1,
    "kv_transfer_done": 2,
    "prefill_done": 3,
    "decode_step": 4,
}


@dataclass(frozen=True)
class SchedulerParams:
    routing: RoutingMode = "adaptive"
    reorder: bool = True
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    w: int = DEFAULT_W
    window: float = DEFAULT_WINDOW
    ttft_thres: float | None = None
    itl_thres: float | None = None
    log_reorder: bool = False

    def __post_init__(self):
        if self.routing not in ROUTING_MODES:
            raise ConfigError(f"routing must be one of {ROUTING_MODES}, got {self.routing!r}")
        if not (0 < self.alpha <= 1 and 0 < self.beta <= 1):
            raise ConfigError(f"alpha and beta must lie in (0, 1], got {self.alpha}, {self.beta}")
        if self.w < 1:
            raise ConfigError(f"w must be >= 1, got {self.w}")
        if not self.window > 0:
            raise ConfigError(f"window must be positive, got {self.window}")
        for name in ("ttft_thres", "itl_thres"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")

    def slo_for(self, trace: Trace) -> SLO:
        return SLO(
            self.ttft_thres if self.ttft_thres is not None else trace.slo.ttft_thres,
            self.itl_thres if self.itl_thres is not None else trace.slo.itl_thres,
        )


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str
    seq: int
    payload: tuple = ()

    def sort_key(self):
        return (self.time, KIND_PRIORITY[self.kind], self.seq)


@dataclass
class TaskRecord:
    task_id: int
    session_id: int
    round_index: int
    kind: str
    l_hist: int
    l_incr: int
    created: float
    enqueued: float
    location: str = ""
    worker: str = ""
    started: float = math.nan
    prefill_done: float = math.nan
    completed: float = math.nan
    estimate: float = math.nan
    postpone_count: int = 0

    @property
    def ttft(self) -> float:
        return self.completed - self.created

    @property
    def ttft_from_enqueue(self) -> float:
        return self.completed - self.enqueued


class Verdict(NamedTuple):
    ok: bool
    ttft_ok: bool
    itl_ok: bool
    mean_itl: float


def slo_verdict(ttfts: Sequence[float], itls: Sequence[float], slo: SLO) -> Verdict:
    """All prefill TTFTs within threshold and the session's mean ITL within threshold."""
    ttft_ok = all(t <= slo.ttft_thres for t in ttfts)
    mean_itl = sum(itls) / len(itls) if itls else 0.0
    itl_ok = mean_itl <= slo.itl_thres
    return Verdict(ttft_ok and itl_ok, ttft_ok, itl_ok, mean_itl)


@dataclass
class SessionRecord:
    session_id: int
    arrival: float
    num_rounds: int
    decode_worker: int = -1
    admitted: float = math.nan
    completed: float = math.nan
    ttft_ok: bool = False
    itl_ok: bool = False
    slo_ok: bool = False
    mean_itl: float = math.nan

    @property
    def finished(self) -> bool:
        return not math.isnan(self.completed)

    @property
    def e2e(self) -> float:
        return self.completed - self.arrival


@dataclass
class SimResult:
    trace_name: str
    slo: SLO
    tasks: list[TaskRecord]
    itl_samples: list[tuple[int, int, int, float, float]]  # session, round, token, time, itl
    sessions: list[SessionRecord]
    decisions: list[dict]
    stats: dict = field(default_factory=dict)


class KvSchedule(NamedTuple):
    read_start: float
    read_done: float
    start: float
    prefill_done: float
    writeback_done: float


def kv_transfer_schedule(
    task: PrefillTask,
    theta_decode: int,
    theta_prefill: int,
    profile: PerfProfile,
    scheduled_at: float,
    worker_free_at: float,
) -> KvSchedule:
    """Timeline of a remote prefill picked for execution at ``scheduled_at``.

    The history read starts immediately and overlaps whatever the prefill
    worker is still running; compute starts once both are done, and decoding
    can resume only after the write-back lands.
    """
    read_done = scheduled_at + t_kv(profile, task.l_hist, theta_decode, theta_prefill)
    start = max(worker_free_at, read_done)
    done = start + t_prefill(profile, task.l_hist, task.l_incr, theta_prefill)
    back = done + t_kv(profile, task.l_incr, theta_prefill, theta_decode)
    return KvSchedule(scheduled_at, read_done, start, done, back)


class _Session:
    __slots__ = (
        "spec", "record", "bound", "round", "context", "remaining",
        "last_token", "ttfts", "itls",
    )

    def __init__(self, spec: SessionSpec, record: SessionRecord):
        self.spec = spec
        self.record = record
        self.bound = -1
        self.round = 0
        self.context = 0
        self.remaining = 0
        self.last_token: float | None = None
        self.ttfts: list[float] = []
        self.itls: list[float] = []


class Simulator:
    def __init__(
        self,
        trace: Trace,
        plan: DeploymentPlan,
        profile: PerfProfile,
        params: SchedulerParams = SchedulerParams(),
        seed: int = 0,
    ):
        trace.validate()
        for n in list(plan.x) + list(plan.y):
            if n not in profile.prefill_cost:
                raise ConfigError(f"plan uses degree {n} which the profile does not cover")
        if not plan.y:
            raise ConfigError("plan must contain at least one decode worker")
        if params.routing == "always-remote" and not plan.x:
            raise ConfigError("always-remote routing needs at least one prefill worker")
        self.trace = trace
        self.plan = plan
        self.profile = profile
        self.params = params
        self.slo = params.slo_for(trace)
        self.routing_params = RoutingParams(params.alpha, params.beta, self.slo.ttft_thres, self.slo.itl_thres)
        self.rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        bpt = profile.kv_bytes_per_token
        self.prefill = [
            WorkerState(i, "prefill", n, kv_bytes_per_token=bpt, window=params.window)
            for i, n in enumerate(plan.prefill_degrees())
        ]
        self.decode = [
            WorkerState(i, "decode", n, kv_bytes_per_token=bpt, window=params.window)
            for i, n in enumerate(plan.decode_degrees())
        ]

        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self._task_seq = 0
        self.sessions: dict[int, _Session] = {}
        self.waiting: list[_Session] = []
        self.tasks: list[TaskRecord] = []
        self.itl_samples: list = []
        self.decisions: list[dict] = []
        self.counters = {
            "events": 0,
            "out_of_order": 0,
            "tasks_created": 0,
            "tasks_completed": 0,
            "tokens_decoded": 0,
            "local_tasks": 0,
            "remote_tasks": 0,
            "max_postpone": 0,
            "max_kv_fraction": 0.0,
        }

    # -- event plumbing ------------------------------------------------------

    def _push(self, time: float, kind: str, *payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, KIND_PRIORITY[kind], self._seq, kind, payload))

    def run(self) -> SimResult:
        for spec in self.trace.sessions:
            rec = SessionRecord(spec.session_id, spec.arrival_time, len(spec.rounds))
            self.sessions[spec.session_id] = _Session(spec, rec)
            self._push(spec.arrival_time, "arrival", spec.session_id)

        handlers = {
            "arrival": self._on_arrival,
            "interaction_done": self._on_interaction_done,
            "kv_transfer_done": self._on_kv_done,
            "prefill_done": self._on_prefill_done,
            "decode_step": self._on_decode_step,
        }
        last = -math.inf
        while self._heap:
            time, _, _, kind, payload = heapq.heappop(self._heap)
            if time < last:
                self.counters["out_of_order"] += 1
            last = time
            self.now = time
            self.counters["events"] += 1
            handlers[kind](*payload)
        return self._result()

    # -- sessions ------------------------------------------------------------

    def _on_arrival(self, sid: int) -> None:
        sess = self.sessions[sid]
        if self.waiting or not self._admit(sess):
            self.waiting.append(sess)

    def _admit(self, sess: _Session) -> bool:
        idx = bind_session(self.decode)
        worker = self.decode[idx]
        first = sess.spec.rounds[0]
        tokens = first.incr_input_len + first.decode_len + worker.kv_tokens + worker.kv_reserved
        if tokens * self.profile.kv_bytes_per_token > self.profile.kv_capacity_bytes(worker.theta):
            return False
        sess.bound = idx
        sess.record.decode_worker = idx
        sess.record.admitted = self.now
        self._new_task(sess, created=sess.spec.arrival_time)
        return True

    def _retry_waiting(self) -> None:
        while self.waiting and self._admit(self.waiting[0]):
            self.waiting.pop(0)

    def _on_interaction_done(self, sid: int) -> None:
        sess = self.sessions[sid]
        sess.round += 1
        self._new_task(sess, created=self.now)

    def _new_task(self, sess: _Session, created: float) -> None:
        rnd = sess.spec.rounds[sess.round]
        self._task_seq += 1
        task = PrefillTask(
            session_id=sess.spec.session_id,
            l_hist=sess.context,
            l_incr=rnd.incr_input_len,
            created_time=created,
            round_index=sess.round,
            task_id=self._task_seq,
        )
        sess.context += rnd.incr_input_len
        worker = self.decode[sess.bound]
        worker.kv_tokens += rnd.incr_input_len
        worker.kv_reserved += rnd.decode_len
        self._track_kv(worker)
        self.counters["tasks_created"] += 1
        self._dispatch(task, sess)

    def _track_kv(self, worker: WorkerState) -> None:
        frac = worker.kv_bytes_used / self.profile.kv_capacity_bytes(worker.theta)
        if frac > self.counters["max_kv_fraction"]:
            self.counters["max_kv_fraction"] = frac

    # -- routing -------------------------------------------------------------

    def _decide(self, task: PrefillTask, dworker: WorkerState) -> RoutingDecision:
        mode = self.params.routing
        if mode == "always-local":
            return RoutingDecision(None, "forced")
        return route(
            task, dworker, self.prefill, self.profile, self.routing_params, self.rng, self.now,
            allow_local=mode == "adaptive",
        )

    def _dispatch(self, task: PrefillTask, sess: _Session) -> None:
        dworker = self.decode[sess.bound]
        decision = self._decide(task, dworker)
        if decision.is_local:
            estimate = estimate_local(task, dworker, self.profile)
            worker = dworker
        else:
            worker = self.prefill[decision.target]
            estimate = estimate_remote(task, worker, dworker, self.profile)
        rec = TaskRecord(
            task.task_id, task.session_id, task.round_index, task.kind, task.l_hist, task.l_incr,
            created=task.created_time, enqueued=self.now,
            location="local" if decision.is_local else "remote",
            worker=worker.name, estimate=estimate,
        )
        self.tasks.append(rec)
        task.record = rec
        entry = {
            "time": self.now,
            "session": task.session_id,
            "round": task.round_index,
            "kind": task.kind,
            "rationale": decision.rationale,
            "target": "local" if decision.is_local else f"p{decision.target}",
            "estimate": estimate,
        }
        if decision.rationale == "argmin":
            entry["estimated_cost"] = decision.estimated_cost
            entry["t_local"] = decision.local_estimate
            entry["t_remote"] = list(decision.remote_estimates)
        self.decisions.append(entry)

        task.enqueue_time = self.now
        worker.prefill_queue.append(task)
        if decision.is_local:
            self.counters["local_tasks"] += 1
            self._kick_decode(worker)
        else:
            self.counters["remote_tasks"] += 1
            self._kick_prefill(worker)

    def _select(self, worker: WorkerState) -> PrefillTask:
        if not self.params.reorder:
            return worker.prefill_queue.pop(0)
        out = reorder_and_dequeue(
            worker.prefill_queue, self.now, self.params.w, self.slo.ttft_thres, self.profile, worker.theta
        )
        for t in out.chosen_order:
            if t.postpone_count > self.counters["max_postpone"]:
                self.counters["max_postpone"] = t.postpone_count
        if self.params.log_reorder:
            self.decisions.append({
                "time": self.now,
                "reorder": worker.name,
                "window": [t.task_id for t in out.chosen_order],
                "satisfied": out.predicted_satisfied,
                "fifo_satisfied": out.fifo_satisfied,
            })
        return out.dequeued_task

    # -- prefill workers -----------------------------------------------------

    def _kick_prefill(self, p: WorkerState) -> None:
        if p.staged is None and p.prefill_queue:
            task = self._select(p)
            p.staged = task
            dworker = self.decode[self.sessions[task.session_id].bound]
            read = t_kv(self.profile, task.l_hist, dworker.theta, p.theta)
            if read > 0:
                p.staged_ready = False
                self._push(self.now + read, "kv_transfer_done", "read", p.id, task)
            else:
                p.staged_ready = True
        if p.running is None and p.staged is not None and p.staged_ready:
            task = p.staged
            p.staged = None
            p.running = task
            task.record.started = self.now
            task.record.postpone_count = task.postpone_count
            cost = t_prefill(self.profile, task.l_hist, task.l_incr, p.theta)
            p.busy_until = self.now + cost
            self._push(p.busy_until, "prefill_done", "prefill", p.id, task)
            # Stage the next task so its history read overlaps this compute.
            self._kick_prefill(p)

    def _on_kv_done(self, leg: str, pid: int, task: PrefillTask) -> None:
        if leg == "read":
            p = self.prefill[pid]
            p.staged_ready = True
            self._kick_prefill(p)
        else:
            self._complete(task, self.prefill[pid])

    def _on_prefill_done(self, phase: str, wid: int, task: PrefillTask) -> None:
        task.record.prefill_done = self.now
        if phase == "prefill":
            p = self.prefill[wid]
            p.running = None
            dworker = self.decode[self.sessions[task.session_id].bound]
            back = t_kv(self.profile, task.l_incr, p.theta, dworker.theta)
            self._push(self.now + back, "kv_transfer_done", "writeback", wid, task)
            self._kick_prefill(p)
        else:
            d = self.decode[wid]
            d.running = None
            d.activity = None
            self._complete(task, d)
            self._kick_decode(d)

    def _complete(self, task: PrefillTask, worker: WorkerState) -> None:
        rec = task.record
        rec.completed = self.now
        ttft = rec.ttft
        worker.ttft_stat.add(self.now, ttft)
        worker.ttft_stat.prune(self.now)
        self.counters["tasks_completed"] += 1
        sess = self.sessions[task.session_id]
        sess.ttfts.append(ttft)
        sess.remaining = sess.spec.rounds[sess.round].decode_len
        sess.last_token = None
        d = self.decode[sess.bound]
        d.joining.append(task.session_id)
        self._kick_decode(d)

    # -- decode workers ------------------------------------------------------

    def _kick_decode(self, d: WorkerState) -> None:
        if d.activity is not None:
            return
        if d.prefill_queue:
            # Prefill takes priority over the next decode step.
            task = self._select(d)
            d.running = task
            d.activity = "prefill"
            task.record.started = self.now
            task.record.postpone_count = task.postpone_count
            d.busy_until = self.now + t_prefill(self.profile, task.l_hist, task.l_incr, d.theta)
            self._push(d.busy_until, "prefill_done", "decode", d.id, task)
            return
        if d.joining:
            d.decode_batch.update(d.joining)
            d.joining.clear()
        if d.decode_batch:
            d.step_members = sorted(d.decode_batch)
            d.activity = "step"
            d.busy_until = self.now + t_decode(self.profile, len(d.step_members), d.theta)
            self._push(d.busy_until, "decode_step", d.id)

    def _on_decode_step(self, wid: int) -> None:
        d = self.decode[wid]
        d.activity = None
        now = self.now
        total = 0.0
        count = 0
        for sid in d.step_members:
            sess = self.sessions[sid]
            if sess.last_token is not None:
                gap = now - sess.last_token
                sess.itls.append(gap)
                self.itl_samples.append((sid, sess.round, sess.spec.rounds[sess.round].decode_len - sess.remaining, now, gap))
                total += gap
                count += 1
            sess.last_token = now
            sess.remaining -= 1
            sess.context += 1
            d.kv_tokens += 1
            d.kv_reserved -= 1
            self.counters["tokens_decoded"] += 1
            if sess.remaining == 0:
                d.decode_batch.discard(sid)
                self._finish_round(sess, d)
        d.step_members = []
        d.itl_stat.add(now, total, count)
        d.itl_stat.prune(now)
        self._track_kv(d)
        self._kick_decode(d)

    def _finish_round(self, sess: _Session, d: WorkerState) -> None:
        if sess.round + 1 < len(sess.spec.rounds):
            self._push(self.now + sess.spec.rounds[sess.round].interaction_delay, "interaction_done", sess.spec.session_id)
            return
        rec = sess.record
        rec.completed = self.now
        verdict = slo_verdict(sess.ttfts, sess.itls, self.slo)
        rec.ttft_ok, rec.itl_ok, rec.slo_ok, rec.mean_itl = verdict.ttft_ok, verdict.itl_ok, verdict.ok, verdict.mean_itl
        d.kv_tokens -= sess.context
        self._retry_waiting()

    # -- results -------------------------------------------------------------

    def _result(self) -> SimResult:
        stats = dict(self.counters)
        stats["kv_tokens_final"] = sum(w.kv_tokens for w in self.decode)
        stats["incomplete_sessions"] = sum(1 for s in self.sessions.values() if not s.record.finished)
        stats["makespan"] = self.now
        stats["num_prefill_workers"] = len(self.prefill)
        stats["num_decode_workers"] = len(self.decode)
        return SimResult(
            trace_name=self.trace.name,
            slo=self.slo,
            tasks=self.tasks,
            itl_samples=self.itl_samples,
            sessions=[s.record for s in self.sessions.values()],
            decisions=self.decisions,
            stats=stats,
        )


def run(
    trace: Trace,
    plan: DeploymentPlan,
    profile: PerfProfile,
    params: SchedulerParams = SchedulerParams(),
    seed: int = 0,
) -> SimResult:
    return Simulator(trace, plan, profile, params, seed).run()
