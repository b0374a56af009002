"""TTFT-aware reordering of the head of a prefill queue.

To pick the next task, the first ``w`` queued tasks are tried in every order;
the order under which the most tasks would still meet the TTFT threshold wins.
A task may be pushed back at most ``w`` times, after which no order that
postpones it is considered.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import accumulate, permutations
from typing import MutableSequence, Sequence

from .coordinator import PrefillTask
from .errors import DomainError
from .perf_model import PerfProfile, t_prefill

DEFAULT_W = 3


@dataclass(frozen=True)
class ReorderOutcome:
    chosen_order: tuple[PrefillTask, ...]
    predicted_satisfied: int
    dequeued_task: PrefillTask
    fifo_satisfied: int = 0
    permutations_tried: int = 0


def predict_completion(order: Sequence[PrefillTask], profile: PerfProfile, theta: int) -> list[float]:
    """Completion time of each task, relative to now, if run back to back."""
    if not order:
        raise DomainError("cannot predict completions of an empty order")
    return list(accumulate(t_prefill(profile, t.l_hist, t.l_incr, theta) for t in order))


def count_satisfied(
    order: Sequence[PrefillTask],
    now: float,
    ttft_thres: float,
    profile: PerfProfile,
    theta: int,
) -> int:
    completions = predict_completion(order, profile, theta)
    return sum(
        1 for task, c in zip(order, completions) if (now - task.enqueue_time) + c <= ttft_thres
    )


def _satisfied(perm, costs, waited, ttft_thres) -> int:
    elapsed = 0.0
    n = 0
    for k in perm:
        elapsed += costs[k]
        if waited[k] + elapsed <= ttft_thres:
            n += 1
    return n


def reorder_and_dequeue(
    queue: MutableSequence[PrefillTask],
    now: float,
    w: int,
    ttft_thres: float,
    profile: PerfProfile,
    theta: int,
) -> ReorderOutcome:
    """Reorder the head window of ``queue`` in place and pop the new head."""
    if not queue:
        raise DomainError("cannot dequeue from an empty prefill queue")
    if w < 1:
        raise DomainError(f"window size must be >= 1, got {w}")
    m = min(w, len(queue))
    window = list(queue[:m])
    costs = [t_prefill(profile, t.l_hist, t.l_incr, theta) for t in window]
    waited = [now - t.enqueue_time for t in window]
    capped = [t.postpone_count >= w for t in window]

    best = None
    best_s = -1
    fifo_s = 0
    tried = 0
    # itertools.permutations yields lexicographic index order, identity first.
    for perm in permutations(range(m)):
        if any(capped[k] and pos > k for pos, k in enumerate(perm)):
            continue
        tried += 1
        s = _satisfied(perm, costs, waited, ttft_thres)
        if best is None:
            fifo_s = s
        if best is None or s > best_s:
            best, best_s = perm, s
    assert best is not None, "identity order is never capacity-excluded"

    for pos, k in enumerate(best):
        if pos > k:
            window[k].postpone_count += 1
    chosen = tuple(window[k] for k in best)
    queue[:m] = chosen
    head = queue.pop(0)
    return ReorderOutcome(chosen, best_s, head, fifo_s, tried)
