import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disagg_sim.coordinator import PrefillTask
from disagg_sim.errors import DomainError
from disagg_sim.reorder import count_satisfied, predict_completion, reorder_and_dequeue

from conftest import affine_profile

PROF = affine_profile(prefill=(0.05, 1e-4))


def oracle_best(window, now, w, thres, prof=PROF):
    """Best satisfied count over orders that never postpone a capped task."""
    costs = [prof.prefill_cost[1](t.l_incr + prof.hist_weight * t.l_hist) for t in window]
    best = -1
    for perm in itertools.permutations(range(len(window))):
        if any(window[k].postpone_count >= w and pos > k for pos, k in enumerate(perm)):
            continue
        clock, s = 0.0, 0
        for k in perm:
            clock += costs[k]
            s += (now - window[k].enqueue_time) + clock <= thres
        best = max(best, s)
    return best


@st.composite
def queues(draw):
    w = draw(st.integers(1, 5))
    n = draw(st.integers(1, 8))
    tasks = []
    for i in range(n):
        tasks.append(PrefillTask(
            session_id=i,
            l_hist=draw(st.integers(0, 3000)),
            l_incr=draw(st.integers(1, 6000)),
            enqueue_time=draw(st.floats(0, 3)),
            postpone_count=draw(st.integers(0, w + 1)),
            task_id=i,
        ))
    return w, tasks


@settings(max_examples=300)
@given(queues(), st.floats(0.2, 2.5))
def test_matches_enumeration_oracle(wq, thres):
    w, tasks = wq
    now = 3.0
    m = min(w, len(tasks))
    snapshot = [(t, t.postpone_count) for t in tasks]
    window = list(tasks[:m])
    expected = oracle_best(window, now, w, thres)
    queue = list(tasks)
    out = reorder_and_dequeue(queue, now, w, thres, PROF, 1)
    assert out.predicted_satisfied == expected
    assert out.predicted_satisfied >= out.fifo_satisfied
    # the chosen order really achieves the claimed count
    assert count_satisfied(out.chosen_order, now, thres, PROF, 1) == expected
    # permutation safety: same multiset, tail untouched
    assert sorted(map(id, [out.dequeued_task] + queue)) == sorted(map(id, tasks))
    assert queue[m - 1:] == tasks[m:]
    assert set(map(id, out.chosen_order)) == set(map(id, window))
    # postpone counters move by one exactly for tasks pushed later
    for t, before in snapshot:
        if t in window:
            pushed = out.chosen_order.index(t) > window.index(t)
            assert t.postpone_count == before + pushed
            if before >= w:
                assert not pushed
        else:
            assert t.postpone_count == before


def test_ties_keep_fifo():
    ts = [PrefillTask(i, 0, 1000, enqueue_time=0.0) for i in range(3)]
    q = list(ts)
    out = reorder_and_dequeue(q, 0.0, 3, 100.0, PROF, 1)
    assert out.chosen_order == tuple(ts)
    assert out.dequeued_task is ts[0]
    assert all(t.postpone_count == 0 for t in ts)


def test_doomed_head_is_postponed():
    # head task already late: running the fresh ones first saves them
    late = PrefillTask(0, 0, 1000, enqueue_time=0.0)
    fresh = [PrefillTask(i, 0, 1000, enqueue_time=9.8) for i in (1, 2)]
    q = [late] + fresh
    out = reorder_and_dequeue(q, 10.0, 3, 0.5, PROF, 1)
    assert out.fifo_satisfied == 1  # 0.15 s each: fresh tasks finish at 0.5 and 0.65 behind the head
    assert out.predicted_satisfied == 2
    assert out.dequeued_task in fresh
    assert late.postpone_count == 1


def test_capped_task_cannot_move_back():
    late = PrefillTask(0, 0, 1000, enqueue_time=0.0, postpone_count=2)
    fresh = [PrefillTask(i, 0, 1000, enqueue_time=9.8) for i in (1, 2)]
    q = [late] + fresh
    out = reorder_and_dequeue(q, 10.0, 2, 0.5, PROF, 1)
    assert out.dequeued_task is late
    assert out.chosen_order[0] is late


def test_window_shorter_than_w():
    q = [PrefillTask(0, 0, 10)]
    out = reorder_and_dequeue(q, 0.0, 5, 1.0, PROF, 1)
    assert q == [] and out.permutations_tried == 1


def test_errors():
    with pytest.raises(DomainError):
        reorder_and_dequeue([], 0.0, 3, 1.0, PROF, 1)
    with pytest.raises(DomainError):
        reorder_and_dequeue([PrefillTask(0, 0, 1)], 0.0, 0, 1.0, PROF, 1)
    with pytest.raises(DomainError):
        predict_completion([], PROF, 1)


def test_predict_completion_is_prefix_sum():
    ts = [PrefillTask(0, 0, 100), PrefillTask(1, 1000, 200)]
    c = predict_completion(ts, PROF, 1)
    a = 0.05 + 1e-4 * 100
    b = 0.05 + 1e-4 * (200 + 100)
    assert c == pytest.approx([a, a + b])
