"""Command-line front end: ``popcomp {predict,run,sweep,couple,reset}``.

Exit codes: 0 success, 2 configuration error, 3 runtime contract violation.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import COUPLE_KEYS, ConfigError, load_config
from .coupling import (
    NEUTRAL_COLOR_POLICIES,
    PROPERTIES,
    RESET_PREDICATES,
    CoupledRun,
    CouplingPreconditionError,
    lemma_construction,
    reset_experiment,
    run_coupled,
)
from .engine import BASELINE_FREE_STARTS, Population, make_initial, run
from .harness import output_fractions, replicate
from .protocol import AgentState, ProtocolParams, Variant, encode_state
from .rng import RandomStream
from .steady_state import (
    predict_coin,
    predict_fn_leak,
    predict_fp_leak,
    predict_r,
    predict_xy,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _fmt(x: float) -> str:
    return repr(float(x))


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_bytes(text.encode("utf-8"))


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _provenance(extra: dict) -> dict:
    return {"tool": "popcomp", "version": __version__, **extra}


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0 or math.isnan(v):
        raise argparse.ArgumentTypeError(f"fraction must lie in [0, 1], got {text}")
    return v


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args) -> int:
    if args.r0 is None and (args.x0 is None or args.y0 is None):
        raise ConfigError("give --r0, or both --x0 and --y0")
    if args.r0 is not None and (args.x0 is not None or args.y0 is not None):
        raise ConfigError("--r0 excludes --x0/--y0")
    if args.levels < 0:
        raise ConfigError("--levels must be nonnegative")
    L = args.levels
    if args.r0 is not None:
        r0 = args.r0
        x = y = None
    else:
        if args.x0 + args.y0 > 1.0:
            raise ConfigError("x0 + y0 must not exceed 1")
        r0 = args.x0 + args.y0
        x, y = predict_xy(args.x0, args.y0, L)
    r = predict_r(r0, L)
    cols = ["level", "r_tilde", "x_tilde", "y_tilde"]
    extra = []
    if args.zeta is not None:
        if not 0.0 <= args.zeta < 1.0:
            raise ConfigError("--zeta must lie in [0, 1)")
        cols += ["r_fp", "r_fn"]
        extra += [predict_fp_leak(r0, args.zeta, L), predict_fn_leak(r0, args.zeta, L)]
    if args.p is not None:
        if not 0.0 < args.p <= 1.0:
            raise ConfigError("--p must lie in (0, 1]")
        cols.append("r_coin")
        extra.append(predict_coin(r0, args.p, L))
    lines = [",".join(cols)]
    for i in range(L + 1):
        row = [str(i), _fmt(r[i])]
        row += ["", ""] if x is None else [_fmt(x[i]), _fmt(y[i])]
        row += [_fmt(col[i]) for col in extra]
        lines.append(",".join(row))
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# run / sweep


def _sidecar_path(out: str) -> Path:
    return Path(out).with_name(Path(out).name + ".json")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    params = cfg.params
    stream = RandomStream(cfg.seed)
    pop = make_initial(params, cfg.x0, cfg.y0, cfg.rest_policy, stream)
    cadence = max(1, round(cfg.snapshot_every_ptime * params.n))
    trace = run(pop, round(cfg.parallel_time * params.n), stream, cadence, cfg.switches)
    pop.check_counts()
    _emit(trace.csv_text(), args.out)
    if args.out not in (None, "-"):
        fx, fy, fu = output_fractions(pop)
        side = _provenance({
            "config": cfg.expanded(),
            "rng": stream.describe(),
            "events": trace.events,
            "final": {
                "step": pop.step,
                "ptime": pop.parallel_time,
                "counts": {h: int(v) for h, v in zip(trace.csv_header()[2:-4],
                                                       _final_row(trace))},
                "outputs": {"x": fx, "y": fy, "undecided": fu},
                "leaks": pop.leaks,
            },
        })
        _sidecar_path(args.out).write_bytes(_dump_json(side).encode("utf-8"))
    return EXIT_OK


def _final_row(trace) -> list[int]:
    return ([int(trace.x_levels[-1, 0]), int(trace.y_levels[-1, 0]), int(trace.neutral[-1])]
            + [int(v) for v in trace.x_levels[-1, 1:]] + [int(v) for v in trace.y_levels[-1, 1:]])


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    summary = replicate(cfg.sweep(), workers=args.workers)
    doc = summary.as_dict()
    doc["config"] = cfg.expanded()
    doc = _provenance({**doc, "rng": {**RandomStream(cfg.seed).describe(), "substream": "replication"}})
    _emit(_dump_json(doc), args.out)
    if args.csv:
        Path(args.csv).write_bytes(summary.per_replication_csv().encode("utf-8"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# couple / reset


def _explicit_population(params: ProtocolParams, labels) -> Population:
    if not isinstance(labels, list) or len(labels) != params.n:
        raise ConfigError(f"each explicit population needs {params.n} state labels")
    try:
        codes = [encode_state(AgentState.parse(str(lab))) for lab in labels]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if max(codes) >= params.n_codes:
        raise ConfigError("explicit state beyond the level cap")
    return Population.from_arrays(params, np.array(codes, dtype=np.uint8))


def cmd_couple(args) -> int:
    cfg = load_config(args.config, COUPLE_KEYS)
    raw = cfg.extra
    params = cfg.params
    if args.properties:
        props = tuple(p.strip().upper() for p in args.properties.split(",") if p.strip())
    else:
        props = tuple(raw.get("properties", ["P2"]))
    if any(p not in PROPERTIES for p in props):
        raise ConfigError(f"properties must be drawn from {PROPERTIES}")
    neutral_color = raw.get("neutral_color", "fixed")
    if neutral_color not in NEUTRAL_COLOR_POLICIES:
        raise ConfigError(f"neutral_color must be one of {NEUTRAL_COLOR_POLICIES}")
    steps = raw.get("steps")
    if steps is None:
        steps = round(cfg.parallel_time * params.n)
    if not isinstance(steps, int) or steps < 0:
        raise ConfigError("steps must be a nonnegative integer")
    check_every = raw.get("check_every", 1)
    if "populations" in raw:
        explicit = raw["populations"]
        if not isinstance(explicit, list) or len(explicit) != 3:
            raise ConfigError("populations must list exactly three populations (u, v, w)")
        pops = [_explicit_population(params, labels) for labels in explicit]
    else:
        u = make_initial(params, cfg.x0, cfg.y0, cfg.rest_policy, RandomStream(cfg.seed, 1 << 20))
        pops = list(lemma_construction(u))
    try:
        coupled = CoupledRun(pops, cfg.seed, props, neutral_color, check_every)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = run_coupled(coupled, steps)
    doc = _provenance({**report.as_dict(), "config": cfg.expanded(),
                       "rng": RandomStream(cfg.seed).describe(), "properties": list(props)})
    _emit(_dump_json(doc), args.out)
    return EXIT_OK


def cmd_reset(args) -> int:
    variant = Variant.parse(args.variant)
    ps = [1.0] if args.p is None else [float(v) for v in args.p.split(",")]
    if any(not 0.0 < p <= 1.0 for p in ps):
        raise ConfigError("--p values must lie in (0, 1]")
    if args.n < 2 or args.seeds < 1 or args.horizon < 0:
        raise ConfigError("need n >= 2, seeds >= 1, horizon >= 0")
    params = ProtocolParams.auto(args.n, variant, s=args.s)
    results = []
    for p in ps:
        times = [
            reset_experiment(args.n, params.s, variant, p, args.init, args.horizon,
                             args.seed, r, args.predicate)
            for r in range(args.seeds)
        ]
        reached = [t for t in times if t is not None]
        results.append({
            "p": p,
            "first_hit_ptimes": times,
            "all_reached": len(reached) == len(times),
            "median": float(np.median(reached)) if len(reached) == len(times) else None,
        })
    doc = _provenance({
        "config": {"n": args.n, "s": params.s, "variant": variant.name, "init": args.init,
                   "horizon_ptime": args.horizon, "seed": args.seed, "seeds": args.seeds,
                   "predicate": args.predicate},
        "rng": {**RandomStream(args.seed).describe(), "substream": "seed index"},
        "results": results,
    })
    _emit(_dump_json(doc), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="popcomp", description="Comparison population protocol toolkit")
    ap.add_argument("--version", action="version", version=f"popcomp {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="steady-state predictor table (CSV)")
    p.add_argument("--r0", type=_fraction)
    p.add_argument("--x0", type=_fraction)
    p.add_argument("--y0", type=_fraction)
    p.add_argument("--levels", type=int, default=20)
    p.add_argument("--zeta", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("run", help="simulate one configuration and write its trace (CSV)")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="replicated runs with aggregate metrics (JSON)")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--csv", help="also write per-replication metrics as rep,metric,value")
    p.add_argument("--workers", type=int, help="worker processes (default: $POPCOMP_WORKERS or 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("couple", help="coupled u/v/w run with per-step property checks (JSON)")
    p.add_argument("--config", required=True)
    p.add_argument("--properties", help="comma-separated subset of P1,P2,P3")
    p.add_argument("--out")
    p.set_defaults(func=cmd_couple)

    p = sub.add_parser("reset", help="first-hit times of baseline-free populations (JSON)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--s", type=int)
    p.add_argument("--variant", default="detection")
    p.add_argument("--p", help="coin probability, or a comma-separated list")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=100.0, help="parallel time budget")
    p.add_argument("--init", choices=BASELINE_FREE_STARTS, default="all_x1")
    p.add_argument("--predicate", choices=RESET_PREDICATES, default="below_cap")
    p.add_argument("--out")
    p.set_defaults(func=cmd_reset)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except CouplingPreconditionError as exc:
        print(f"popcomp: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ValueError) as exc:
        # precondition failures were caught above; any other ValueError is a bad parameter
        print(f"popcomp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as exc:
        print(f"popcomp: contract violation: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
