"""Command-line entry point: ``disagg-sim <subcommand> ...``.

Each subcommand validates its inputs before doing any work and exits with
status 2 and a message naming the offending flag when something is wrong.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import io
import itertools
import json
import math
import os
import sys
from typing import Sequence

from . import __version__
from .errors import ParseError, SimError
from .metrics import (
    build_report,
    compare_reports,
    format_report,
    report_csv,
    report_from_dir,
    write_samples,
)
from .perf_model import ProfileSpec, load_profile, save_profile, synth_profile
from .planner import (
    DeploymentPlan,
    InfeasibleError,
    LatencyCoefficients,
    ReferenceLoad,
    estimate_coefficients,
    load_plan,
    save_plan,
    top_k,
)
from .sim_engine import ROUTING_MODES, SchedulerParams, run
from .workload import (
    PRESETS,
    TraceStats,
    arrival_rate_of,
    gen_trace,
    load_trace,
    retime,
    save_trace,
    trace_stats,
)

OUTPUT_VERSION = "sim_output_v1"


class CliError(Exception):
    def __init__(self, flag: str, message: str):
        self.flag = flag
        super().__init__(f"{flag}: {message}")


# -- argument helpers -----------------------------------------------------------

def _floats(flag: str, text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(flag, f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise CliError(flag, "empty list")
    return vals


def _ints(flag: str, text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(flag, f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise CliError(flag, "empty list")
    return vals


def _counts(flag: str, text: str) -> dict[int, int]:
    """Parse ``degree:count[,degree:count...]``; an empty string means none."""
    out: dict[int, int] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            n, c = part.split(":")
            n, c = int(n), int(c)
        except ValueError:
            raise CliError(flag, f"expected degree:count pairs, got {part!r}") from None
        if n < 1 or c < 0:
            raise CliError(flag, f"degree must be >= 1 and count >= 0, got {part!r}")
        out[n] = out.get(n, 0) + c
    return out


def _existing(flag: str, path: str | None, required: bool = True) -> str | None:
    if path is None:
        if required:
            raise CliError(flag, "is required")
        return None
    if not os.path.isfile(path):
        raise CliError(flag, f"file not found: {path}")
    return path


def _load(flag: str, loader, path: str):
    _existing(flag, path)
    try:
        return loader(path)
    except ParseError as e:
        raise CliError(flag, f"{path}: {e}") from None


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    """Replace non-finite floats with None so output is strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_json(path: str, doc) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _scheduler_params(args) -> SchedulerParams:
    if args.reorder not in ("on", "off"):
        raise CliError("--reorder", f"expected on or off, got {args.reorder!r}")
    checks = [("--alpha", args.alpha, 0 < args.alpha <= 1), ("--beta", args.beta, 0 < args.beta <= 1),
              ("--w", args.w, args.w >= 1), ("--window", args.window, args.window > 0)]
    for flag, v in (("--ttft-thres", args.ttft_thres), ("--itl-thres", args.itl_thres)):
        if v is not None:
            checks.append((flag, v, v > 0))
    for flag, v, ok in checks:
        if not ok:
            raise CliError(flag, f"out of range: {v}")
    return SchedulerParams(
        routing=args.routing, reorder=args.reorder == "on", alpha=args.alpha, beta=args.beta,
        w=args.w, window=args.window, ttft_thres=args.ttft_thres, itl_thres=args.itl_thres,
        log_reorder=getattr(args, "log_reorder", False),
    )


def _plan_from_args(args) -> tuple[DeploymentPlan, dict]:
    if args.plan is not None:
        if args.prefill is not None or args.decode is not None:
            raise CliError("--plan", "give either --plan or --prefill/--decode, not both")
        plan = _load("--plan", load_plan, args.plan)
        return plan, {"path": args.plan, "sha256": _sha256(args.plan)}
    if args.decode is None:
        raise CliError("--plan", "is required (or give --prefill and --decode)")
    x = _counts("--prefill", args.prefill or "")
    y = _counts("--decode", args.decode)
    if not any(y.values()):
        raise CliError("--decode", "at least one decode replica is required")
    plan = DeploymentPlan(x, y)
    return plan, {"inline": plan.to_dict()}


def _stats_source(args) -> tuple[TraceStats, float | None, object]:
    """Workload stats from ``--trace`` or ``--preset``; also the trace's own rate."""
    if args.trace is not None and args.preset is not None:
        raise CliError("--trace", "give either --trace or --preset, not both")
    if args.trace is not None:
        trace = _load("--trace", load_trace, args.trace)
        return trace_stats(trace), arrival_rate_of(trace), trace
    if args.preset is None:
        raise CliError("--trace", "is required (or give --preset)")
    return PRESETS[args.preset], None, None


# -- subcommands ----------------------------------------------------------------

def cmd_profile_gen(args) -> int:
    degrees = _ints("--degrees", args.degrees)
    for n in degrees:
        if n < 1 or n & (n - 1):
            raise CliError("--degrees", f"degrees must be powers of two, got {n}")
    spec = ProfileSpec(degrees=tuple(sorted(set(degrees))), hist_weight=args.hist_weight)
    save_profile(synth_profile(spec, args.seed), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_trace_gen(args) -> int:
    if args.preset is not None:
        stats = PRESETS[args.preset]
    else:
        missing = [f for f, v in (("--rounds", args.rounds), ("--prefill-mean", args.prefill_mean),
                                  ("--decode-mean", args.decode_mean)) if v is None]
        if missing:
            raise CliError(missing[0], "is required without --preset")
        stats = TraceStats(args.name, args.rounds, args.prefill_mean, args.decode_mean,
                           fixed_rounds=args.fixed_rounds)
    if not args.rate > 0:
        raise CliError("--rate", f"must be positive, got {args.rate}")
    if args.sessions < 1:
        raise CliError("--sessions", f"must be >= 1, got {args.sessions}")
    trace = gen_trace(stats, args.rate, args.sessions, args.seed,
                      ttft_thres=args.ttft_thres, itl_thres=args.itl_thres)
    save_trace(trace, args.out)
    print(f"wrote {args.out}: {len(trace.sessions)} sessions, {trace.num_tasks} prefill tasks")
    return 0


def cmd_plan(args) -> int:
    degrees = sorted(set(_ints("--degrees", args.degrees)))
    if args.gpus < 1:
        raise CliError("--gpus", f"must be >= 1, got {args.gpus}")
    if args.top_k < 1:
        raise CliError("--top-k", f"must be >= 1, got {args.top_k}")
    if args.load_coefficients is not None:
        path = _existing("--load-coefficients", args.load_coefficients)
        try:
            with open(path) as f:
                coeffs = LatencyCoefficients.from_dict(json.load(f))
        except (ValueError, AttributeError, TypeError, ParseError) as e:
            raise CliError("--load-coefficients", f"{path}: {e}") from None
        trace = None
        if args.simulate:
            _, _, trace = _stats_source(args)
    else:
        profile = _load("--profile", load_profile, args.profile)
        stats, trace_rate, trace = _stats_source(args)
        rate = args.rate if args.rate is not None else trace_rate
        if rate is None:
            raise CliError("--rate", "is required with --preset")
        if not rate > 0:
            raise CliError("--rate", f"must be positive, got {rate}")
        for n in degrees:
            if n not in profile.degrees:
                raise CliError("--degrees", f"degree {n} is not in the profile {profile.degrees}")
        load = ReferenceLoad(rate, args.gpus, args.ref_sessions, args.load_policy)
        coeffs = estimate_coefficients(stats, profile, degrees, load, args.seed)
    if args.coefficients is not None:
        _write_json(args.coefficients, coeffs.to_dict())
    try:
        plans = top_k(coeffs, args.gpus, degrees, args.top_k)
    except InfeasibleError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return 3
    best = plans[0]
    if args.out is not None:
        save_plan(best, args.out)
    attainment = None
    if args.simulate:
        if trace is None:
            raise CliError("--simulate", "needs --trace to run the chosen plan")
        profile = _load("--profile", load_profile, args.profile)
        attainment = build_report(run(trace, best, profile, SchedulerParams(), args.seed)).slo_attainment
    if args.format == "json":
        doc = {"plans": [p.to_dict() for p in plans], "coefficients": coeffs.to_dict()}
        if attainment is not None:
            doc["simulated_attainment"] = attainment
        print(json.dumps(_jsonable(doc), indent=2, sort_keys=True))
    else:
        print(f"{'rank':<5} {'Z (s)':>9}  plan")
        for i, p in enumerate(plans, 1):
            print(f"{i:<5} {p.objective_z:>9.4f}  {p.label()}")
        if attainment is not None:
            print(f"simulated SLO attainment of rank 1: {attainment:.4f}")
    return 0


def _simulate_to_dir(trace, trace_src, profile, profile_src, plan, plan_src, params, seed, outdir):
    result = run(trace, plan, profile, params, seed)
    report = build_report(result)
    os.makedirs(outdir, exist_ok=True)
    config = {
        "version": OUTPUT_VERSION,
        "trace_name": trace.name,
        "inputs": {"trace": trace_src, "profile": profile_src, "plan": plan_src},
        "plan": plan.to_dict(),
        "scheduler": dataclasses.asdict(params),
        "slo": dataclasses.asdict(result.slo),
        "seed": seed,
    }
    _write_json(os.path.join(outdir, "config.json"), config)
    _write_json(os.path.join(outdir, "meta.json"), {
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "package_version": __version__,
    })
    _write_json(os.path.join(outdir, "summary.json"),
                {"version": OUTPUT_VERSION, "report": report.to_dict(), "stats": result.stats})
    write_samples(result, outdir)
    tmp = os.path.join(outdir, "decisions.jsonl.tmp")
    with open(tmp, "w") as f:
        for d in result.decisions:
            f.write(json.dumps(_jsonable(d), sort_keys=True) + "\n")
    os.replace(tmp, os.path.join(outdir, "decisions.jsonl"))
    return result, report


def cmd_simulate(args) -> int:
    trace = _load("--trace", load_trace, args.trace)
    profile = _load("--profile", load_profile, args.profile)
    plan, plan_src = _plan_from_args(args)
    params = _scheduler_params(args)
    for n in set(plan.prefill_degrees()) | set(plan.decode_degrees()):
        if n not in profile.degrees:
            raise CliError("--plan", f"degree {n} is not covered by the profile {profile.degrees}")
    if args.out is None:
        raise CliError("--out", "is required")
    _, report = _simulate_to_dir(
        trace, {"path": args.trace, "sha256": _sha256(args.trace)},
        profile, {"path": args.profile, "sha256": _sha256(args.profile)},
        plan, plan_src, params, args.seed, args.out,
    )
    if args.format == "json":
        print(json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True))
    else:
        sys.stdout.write(format_report(report))
    return 0


def _report_dir(flag: str, path: str):
    if not os.path.isdir(path):
        raise CliError(flag, f"not a directory: {path}")
    try:
        return report_from_dir(path)
    except FileNotFoundError as e:
        raise CliError(flag, f"missing sample file {e.filename}") from None
    except ParseError as e:
        raise CliError(flag, str(e)) from None


def cmd_report(args) -> int:
    report = _report_dir("run_dir", args.run_dir)
    if args.format == "json":
        print(json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True))
    elif args.format == "csv":
        sys.stdout.write(report_csv(report))
    else:
        sys.stdout.write(format_report(report))
    return 0


def cmd_compare(args) -> int:
    if len(args.run_dirs) < 2:
        raise CliError("run_dirs", "need at least two run directories")
    names = args.names.split(",") if args.names else [os.path.basename(os.path.normpath(d))
                                                      for d in args.run_dirs]
    if len(names) != len(args.run_dirs):
        raise CliError("--names", f"expected {len(args.run_dirs)} names, got {len(names)}")
    if len(set(names)) != len(names):
        raise CliError("--names", f"names must be distinct, got {names}")
    reports = [(n, _report_dir("run_dirs", d)) for n, d in zip(names, args.run_dirs)]
    cmp = compare_reports(reports)
    sys.stdout.write(cmp.to_csv() if args.format == "csv" else cmp.to_text())
    return 0


def cmd_sweep(args) -> int:
    profile = _load("--profile", load_profile, args.profile)
    plan, _ = _plan_from_args(args)
    base = _scheduler_params(args)
    if args.trace is not None and args.preset is not None:
        raise CliError("--trace", "give either --trace or --preset, not both")
    if args.trace is None and args.preset is None:
        raise CliError("--trace", "is required (or give --preset)")
    base_trace = _load("--trace", load_trace, args.trace) if args.trace else None
    rates = _floats("--rates", args.rates) if args.rates else None
    if rates is None and base_trace is None:
        raise CliError("--rates", "is required with --preset")
    for r in rates or ():
        if not r > 0:
            raise CliError("--rates", f"rates must be positive, got {r}")
    alphas = _floats("--alphas", args.alphas) if args.alphas else [base.alpha]
    betas = _floats("--betas", args.betas) if args.betas else [base.beta]
    ws = _ints("--ws", args.ws) if args.ws else [base.w]
    for flag, vals, ok in (("--alphas", alphas, lambda v: 0 < v <= 1),
                           ("--betas", betas, lambda v: 0 < v <= 1), ("--ws", ws, lambda v: v >= 1)):
        for v in vals:
            if not ok(v):
                raise CliError(flag, f"out of range: {v}")

    rows = []
    for rate in rates or [None]:
        if base_trace is None:
            trace = gen_trace(PRESETS[args.preset], rate, args.sessions, args.seed)
        elif rate is None:
            trace = base_trace
        else:
            trace = retime(base_trace, rate, args.seed)
        for alpha, beta, w in itertools.product(alphas, betas, ws):
            params = dataclasses.replace(base, alpha=alpha, beta=beta, w=w)
            report = build_report(run(trace, plan, profile, params, args.seed))
            row = {"rate": rate if rate is not None else arrival_rate_of(trace),
                   "alpha": alpha, "beta": beta, "w": w,
                   "routing": params.routing, "reorder": params.reorder}
            row.update(report.flat())
            rows.append(row)

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    if args.out:
        with open(args.out, "w") as f:
            f.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    att = [r["slo_attainment"] for r in rows]
    print(f"{len(rows)} runs, attainment min {min(att):.4f} max {max(att):.4f} "
          f"spread {max(att) - min(att):.4f}", file=sys.stderr)
    return 0


# -- parser ---------------------------------------------------------------------

def _add_sched_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--routing", choices=ROUTING_MODES, default="adaptive")
    p.add_argument("--reorder", choices=("on", "off"), default="on")
    p.add_argument("--alpha", type=float, default=SchedulerParams.alpha)
    p.add_argument("--beta", type=float, default=SchedulerParams.beta)
    p.add_argument("--w", type=int, default=SchedulerParams.w, help="reordering lookahead window")
    p.add_argument("--window", type=float, default=SchedulerParams.window,
                   help="seconds covered by the windowed TTFT/ITL statistics")
    p.add_argument("--ttft-thres", type=float, help="override the trace's TTFT threshold")
    p.add_argument("--itl-thres", type=float, help="override the trace's ITL threshold")


def _add_plan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--plan", help="deployment_plan_v1 file")
    p.add_argument("--prefill", help="inline prefill replicas, e.g. 1:2 or 4:2,8:1")
    p.add_argument("--decode", help="inline decode replicas, e.g. 1:2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disagg-sim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile-gen", help="write a synthetic perf_profile_v1 file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--degrees", default="1,2,4,8")
    p.add_argument("--hist-weight", type=float, default=ProfileSpec.hist_weight)
    p.set_defaults(func=cmd_profile_gen)

    p = sub.add_parser("trace-gen", help="write a trace_v1 file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--name", default="custom")
    p.add_argument("--rounds", type=float, help="mean rounds per session")
    p.add_argument("--prefill-mean", type=float, help="mean prefill tokens per session")
    p.add_argument("--decode-mean", type=float, help="mean decode tokens per session")
    p.add_argument("--fixed-rounds", action="store_true")
    p.add_argument("--rate", type=float, required=True, help="sessions per second")
    p.add_argument("--sessions", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ttft-thres", type=float)
    p.add_argument("--itl-thres", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace_gen)

    p = sub.add_parser("plan", help="estimate latency coefficients and solve for a deployment")
    p.add_argument("--profile")
    p.add_argument("--trace")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--degrees", default="1,2,4,8")
    p.add_argument("--rate", type=float, help="aggregate arrival rate (defaults to the trace's)")
    p.add_argument("--ref-sessions", type=int, default=200)
    p.add_argument("--load-policy", choices=("gpu_share", "per_replica"), default="gpu_share")
    p.add_argument("--top-k", type=int, default=1)
    p.add_argument("--coefficients", help="also write the coefficients to this JSON file")
    p.add_argument("--load-coefficients", help="skip estimation and read coefficients from JSON")
    p.add_argument("--simulate", action="store_true",
                   help="run the full simulator on the best plan and report its attainment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the best plan here")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="run one simulation into an output directory")
    p.add_argument("--trace")
    p.add_argument("--profile")
    _add_plan_flags(p)
    _add_sched_flags(p)
    p.add_argument("--log-reorder", action="store_true", help="log every reordering decision")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="rebuild the report of a simulate output directory")
    p.add_argument("run_dir")
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="align reports of several output directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--names", help="comma-separated labels, one per directory")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="grid over arrival rate, alpha, beta and w")
    p.add_argument("--trace")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--sessions", type=int, default=200, help="sessions per generated trace")
    p.add_argument("--profile")
    _add_plan_flags(p)
    _add_sched_flags(p)
    p.add_argument("--rates")
    p.add_argument("--alphas")
    p.add_argument("--betas")
    p.add_argument("--ws")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
    except SimError as e:
        print(f"error: {e}", file=sys.stderr)
    except OSError as e:
        print(f"error: {e.filename}: {e.strerror}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
