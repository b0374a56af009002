"""Piecewise alpha-beta cost model for prefill, decode and KV transfer.

Every cost function maps a scalar load (tokens, batch size, context length)
to seconds through ``alpha_s + beta_s * load`` where ``s`` is the segment
containing the load. Breakpoints separate segments; a load sitting exactly on
a breakpoint belongs to the segment on its right.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, DomainError, ParseError

PROFILE_VERSION = "perf_profile_v1"
DEFAULT_HIST_WEIGHT = 0.1


@dataclass(frozen=True)
class PiecewiseAlphaBeta:
    """``breakpoints`` are the interior boundaries, so there is one more
    segment than breakpoints."""

    breakpoints: tuple[float, ...]
    segments: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in self.breakpoints))
        object.__setattr__(
            self, "segments", tuple((float(a), float(b)) for a, b in self.segments)
        )
        problem = self.problem()
        if problem:
            raise DomainError(problem)

    @classmethod
    def affine(cls, alpha: float, beta: float) -> "PiecewiseAlphaBeta":
        return cls((), ((alpha, beta),))

    def problem(self) -> str | None:
        """Return a description of the first invariant violation, or None."""
        if len(self.segments) != len(self.breakpoints) + 1:
            return (
                f"expected {len(self.breakpoints) + 1} segments for "
                f"{len(self.breakpoints)} breakpoints, got {len(self.segments)}"
            )
        for lo, hi in zip(self.breakpoints, self.breakpoints[1:]):
            if not lo < hi:
                return f"breakpoints not strictly ascending at {hi}"
        for i, (a, b) in enumerate(self.segments):
            if not (np.isfinite(a) and np.isfinite(b)) or a < 0 or b < 0:
                return f"segment {i} has negative or non-finite coefficients ({a}, {b})"
        # Non-negative slopes make each segment monotone; only jumps can break it.
        for i, x in enumerate(self.breakpoints):
            (a0, b0), (a1, b1) = self.segments[i], self.segments[i + 1]
            if a1 + b1 * x < a0 + b0 * x:
                return f"cost decreases across breakpoint {x}"
        return None

    def segment_index(self, load: float) -> int:
        return bisect_right(self.breakpoints, load)

    def __call__(self, load: float) -> float:
        a, b = self.segments[bisect_right(self.breakpoints, load)]
        return a + b * load

    def to_dict(self) -> dict:
        return {
            "breakpoints": list(self.breakpoints),
            "segments": [list(s) for s in self.segments],
        }


@dataclass(frozen=True)
class PerfProfile:
    degrees: tuple[int, ...]
    prefill_cost: Mapping[int, PiecewiseAlphaBeta]
    decode_cost: Mapping[int, PiecewiseAlphaBeta]
    kv_cost: Mapping[tuple[int, int], PiecewiseAlphaBeta]
    kv_bytes_per_token: float
    gpu_memory_capacity: float
    hist_weight: float = DEFAULT_HIST_WEIGHT

    def __post_init__(self):
        object.__setattr__(self, "degrees", tuple(sorted(int(d) for d in self.degrees)))
        problem = self.problem()
        if problem:
            raise ConfigError(problem)

    def problem(self) -> str | None:
        if not self.degrees:
            return "empty degree set"
        if len(set(self.degrees)) != len(self.degrees):
            return "duplicate degrees"
        for d in self.degrees:
            if d < 1 or d & (d - 1):
                return f"degree {d} is not a power of two"
            if d not in self.prefill_cost:
                return f"missing prefill cost for degree {d}"
            if d not in self.decode_cost:
                return f"missing decode cost for degree {d}"
            for e in self.degrees:
                if (d, e) not in self.kv_cost:
                    return f"missing kv cost for degree pair {d}->{e}"
        if not self.kv_bytes_per_token > 0:
            return "kv_bytes_per_token must be positive"
        if not self.gpu_memory_capacity > 0:
            return "gpu_memory_capacity must be positive"
        if not self.hist_weight >= 0:
            return "hist_weight must be non-negative"
        return None

    def check_degree(self, theta: int) -> None:
        if theta not in self.prefill_cost:
            raise ConfigError(f"degree {theta} not in profile degrees {list(self.degrees)}")

    def kv_capacity_bytes(self, theta: int) -> float:
        return theta * self.gpu_memory_capacity

    def prefill_load(self, l_hist: int, l_incr: int) -> float:
        return l_incr + self.hist_weight * l_hist


def t_prefill(profile: PerfProfile, l_hist: int, l_incr: int, theta: int) -> float:
    """Seconds to prefill ``l_incr`` new tokens over ``l_hist`` cached ones."""
    if l_incr < 1:
        raise DomainError(f"prefill needs at least one input token, got l_incr={l_incr}")
    if l_hist < 0:
        raise DomainError(f"negative history length {l_hist}")
    try:
        cost = profile.prefill_cost[theta]
    except KeyError:
        raise ConfigError(f"no prefill cost for degree {theta}") from None
    return cost(l_incr + profile.hist_weight * l_hist)


def t_decode(profile: PerfProfile, batch_size: int, theta: int) -> float:
    """Seconds for one decode step over a batch of ``batch_size`` sequences."""
    if batch_size < 1:
        raise DomainError(f"decode batch must be non-empty, got {batch_size}")
    try:
        cost = profile.decode_cost[theta]
    except KeyError:
        raise ConfigError(f"no decode cost for degree {theta}") from None
    return cost(batch_size)


def t_kv(profile: PerfProfile, l_ctx: int, theta_src: int, theta_dst: int) -> float:
    """Seconds to move the KV cache of ``l_ctx`` tokens between two workers."""
    if l_ctx < 0:
        raise DomainError(f"negative context length {l_ctx}")
    try:
        cost = profile.kv_cost[(theta_src, theta_dst)]
    except KeyError:
        raise ConfigError(f"no kv cost for degree pair {theta_src}->{theta_dst}") from None
    if l_ctx == 0:
        return 0.0
    return cost(l_ctx)


@dataclass
class ProfileSpec:
    """Knobs for :func:`synth_profile`.

    Costs are given for a single GPU and shrink as ``degree ** -exponent`` for
    wider replicas. Ranges are sampled uniformly per profile.
    """

    degrees: tuple[int, ...] = (1, 2, 4, 8)
    prefill_alpha: tuple[float, float] = (0.012, 0.018)
    prefill_beta: tuple[float, float] = (5.5e-5, 6.5e-5)
    prefill_breakpoint: float = 2048.0
    prefill_slope_growth: float = 1.3
    prefill_scaling: float = 0.85
    decode_alpha: tuple[float, float] = (0.011, 0.013)
    decode_beta: tuple[float, float] = (2.0e-4, 3.0e-4)
    decode_breakpoint: float = 64.0
    decode_slope_growth: float = 1.5
    decode_scaling: float = 0.5
    kv_latency: tuple[float, float] = (0.0015, 0.0025)
    kv_bandwidth_per_gpu: float = 25e9
    kv_bytes_per_token: float = 131072.0
    gpu_memory_capacity: float = 40e9
    hist_weight: float = DEFAULT_HIST_WEIGHT


def _two_segment(alpha: float, beta: float, breakpoint: float, growth: float) -> PiecewiseAlphaBeta:
    beta2 = beta * growth
    # Continuous where possible; clipping alpha at zero turns it into an upward jump.
    alpha2 = max(0.0, alpha + (beta - beta2) * breakpoint)
    return PiecewiseAlphaBeta((breakpoint,), ((alpha, beta), (alpha2, beta2)))


def synth_profile(spec: ProfileSpec, seed: int) -> PerfProfile:
    """Draw a synthetic profile standing in for hardware measurements."""
    if not spec.degrees:
        raise ConfigError("profile spec has an empty degree set")
    if spec.prefill_slope_growth < 1 or spec.decode_slope_growth < 1:
        raise ConfigError("slope growth factors must be >= 1")
    if not (0 <= spec.prefill_scaling <= 1 and 0 <= spec.decode_scaling <= 1):
        raise ConfigError("scaling exponents must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    pa = float(rng.uniform(*spec.prefill_alpha))
    pb = float(rng.uniform(*spec.prefill_beta))
    da = float(rng.uniform(*spec.decode_alpha))
    db = float(rng.uniform(*spec.decode_beta))
    kv_alpha = float(rng.uniform(*spec.kv_latency))

    degrees = tuple(sorted(spec.degrees))
    prefill, decode, kv = {}, {}, {}
    for n in degrees:
        ps = n ** -spec.prefill_scaling
        ds = n ** -spec.decode_scaling
        prefill[n] = _two_segment(pa * ps, pb * ps, spec.prefill_breakpoint, spec.prefill_slope_growth)
        decode[n] = _two_segment(da * ds, db * ds, spec.decode_breakpoint, spec.decode_slope_growth)
    for src in degrees:
        for dst in degrees:
            # Shards move in parallel over min(src, dst) links.
            per_token = spec.kv_bytes_per_token / (spec.kv_bandwidth_per_gpu * min(src, dst))
            kv[(src, dst)] = PiecewiseAlphaBeta.affine(kv_alpha, per_token)
    return PerfProfile(
        degrees=degrees,
        prefill_cost=prefill,
        decode_cost=decode,
        kv_cost=kv,
        kv_bytes_per_token=spec.kv_bytes_per_token,
        gpu_memory_capacity=spec.gpu_memory_capacity,
        hist_weight=spec.hist_weight,
    )


# -- file format -------------------------------------------------------------

def profile_to_dict(profile: PerfProfile) -> dict:
    return {
        "version": PROFILE_VERSION,
        "degrees": list(profile.degrees),
        "hist_weight": profile.hist_weight,
        "kv_bytes_per_token": profile.kv_bytes_per_token,
        "gpu_memory_capacity": profile.gpu_memory_capacity,
        "prefill": {str(n): profile.prefill_cost[n].to_dict() for n in profile.degrees},
        "decode": {str(n): profile.decode_cost[n].to_dict() for n in profile.degrees},
        "kv": {
            f"{s}->{d}": profile.kv_cost[(s, d)].to_dict()
            for s in profile.degrees
            for d in profile.degrees
        },
    }


def dumps_profile(profile: PerfProfile) -> str:
    return json.dumps(profile_to_dict(profile), indent=2) + "\n"


def _number(doc: dict, key: str, where: str) -> float:
    if key not in doc:
        raise ParseError(f"missing field '{key}'", where or None)
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"expected a number, got {v!r}", f"{where}{key}")
    return v


def _curve(doc, where: str) -> PiecewiseAlphaBeta:
    if not isinstance(doc, dict):
        raise ParseError("expected an object with breakpoints and segments", where)
    bps = doc.get("breakpoints")
    segs = doc.get("segments")
    if not isinstance(bps, list) or not all(isinstance(b, (int, float)) for b in bps):
        raise ParseError("breakpoints must be a list of numbers", f"{where}.breakpoints")
    if not isinstance(segs, list):
        raise ParseError("segments must be a list of [alpha, beta] pairs", f"{where}.segments")
    for i, s in enumerate(segs):
        if not (isinstance(s, list) and len(s) == 2 and all(isinstance(v, (int, float)) for v in s)):
            raise ParseError("expected [alpha, beta]", f"{where}.segments[{i}]")
    try:
        return PiecewiseAlphaBeta(tuple(bps), tuple(tuple(s) for s in segs))
    except DomainError as exc:
        raise ParseError(str(exc), where) from None


def profile_from_dict(doc) -> PerfProfile:
    if not isinstance(doc, dict):
        raise ParseError("profile document must be an object")
    version = doc.get("version")
    if version != PROFILE_VERSION:
        raise ParseError(f"unsupported version {version!r}, expected {PROFILE_VERSION!r}", "version")
    degrees = doc.get("degrees")
    if not isinstance(degrees, list) or not all(isinstance(d, int) and not isinstance(d, bool) for d in degrees):
        raise ParseError("degrees must be a list of integers", "degrees")
    tables = {}
    for name in ("prefill", "decode", "kv"):
        table = doc.get(name)
        if not isinstance(table, dict):
            raise ParseError("missing or malformed cost table", name)
        tables[name] = table
    prefill, decode, kv = {}, {}, {}
    for key, curve in tables["prefill"].items():
        if not key.isdigit():
            raise ParseError("degree keys must be integers", f"prefill.{key}")
        prefill[int(key)] = _curve(curve, f"prefill.{key}")
    for key, curve in tables["decode"].items():
        if not key.isdigit():
            raise ParseError("degree keys must be integers", f"decode.{key}")
        decode[int(key)] = _curve(curve, f"decode.{key}")
    for key, curve in tables["kv"].items():
        src, sep, dst = key.partition("->")
        if not (sep and src.isdigit() and dst.isdigit()):
            raise ParseError("kv keys must look like '<src>-><dst>'", f"kv.{key}")
        kv[(int(src), int(dst))] = _curve(curve, f"kv.{key}")
    try:
        return PerfProfile(
            degrees=tuple(degrees),
            prefill_cost=prefill,
            decode_cost=decode,
            kv_cost=kv,
            kv_bytes_per_token=_number(doc, "kv_bytes_per_token", ""),
            gpu_memory_capacity=_number(doc, "gpu_memory_capacity", ""),
            hist_weight=_number(doc, "hist_weight", ""),
        )
    except ConfigError as exc:
        raise ParseError(str(exc)) from None


def loads_profile(text: str) -> PerfProfile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return profile_from_dict(doc)


def save_profile(profile: PerfProfile, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_profile(profile))


def load_profile(path) -> PerfProfile:
    with open(path) as fh:
        return loads_profile(fh.read())
