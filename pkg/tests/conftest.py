import pytest

from disagg_sim.perf_model import PerfProfile, PiecewiseAlphaBeta, ProfileSpec, synth_profile
from disagg_sim.workload import SLO, Round, SessionSpec, Trace


def affine_profile(
    degrees=(1,),
    prefill=(0.01, 1e-4),
    decode=(0.01, 1e-3),
    kv=(0.001, 1e-6),
    hist_weight=0.1,
    bpt=1000.0,
    capacity=1e12,
):
    """Single-segment costs, identical across degrees, for hand-computed timelines."""
    pre = {d: PiecewiseAlphaBeta.affine(*prefill) for d in degrees}
    dec = {d: PiecewiseAlphaBeta.affine(*decode) for d in degrees}
    kvc = {(a, b): PiecewiseAlphaBeta.affine(*kv) for a in degrees for b in degrees}
    return PerfProfile(tuple(degrees), pre, dec, kvc, bpt, capacity, hist_weight)


def make_trace(sessions, ttft=2.0, itl=0.03, name="t"):
    """``sessions``: list of (arrival, [(incr, decode, delay), ...])."""
    specs = tuple(
        SessionSpec(i, float(arr), tuple(Round(*r) for r in rounds))
        for i, (arr, rounds) in enumerate(sessions)
    )
    return Trace(name, specs, SLO(ttft, itl))


@pytest.fixture(scope="session")
def profile():
    return synth_profile(ProfileSpec(), 0)


@pytest.fixture
def flat_profile():
    return affine_profile()


# One line per acceptance criterion, printed after the run.
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
