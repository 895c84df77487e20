"""Replicated experiments and the metrics computed from their traces."""

from __future__ import annotations

import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import ALL_NEUTRAL, Population, SwitchEvent, Trace, advance, make_baseline_free, make_initial, run
from .protocol import LEVEL_INF, Output, ProtocolParams, Variant, code_level, output_table
from .rng import RandomStream
from .steady_state import SteadyStatePrediction

WORKERS_ENV = "POPCOMP_WORKERS"
RESOLUTION_FLOOR = 50.0

Predicate = Callable[[Trace], np.ndarray]


# ---------------------------------------------------------------------------
# snapshot predicates


def strong_totals(trace: Trace) -> tuple[np.ndarray, np.ndarray]:
    """(sum of |X_i|, sum of |Y_i|) over levels 1..s, per snapshot."""
    return trace.x_levels[:, 1:].sum(axis=1), trace.y_levels[:, 1:].sum(axis=1)


def strong_ratio(trace: Trace) -> np.ndarray:
    xs, ys = strong_totals(trace)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ys > 0, xs / np.maximum(ys, 1), np.where(xs > 0, np.inf, np.nan))


def ratio_predicate(theta: float, truth: Output = Output.X) -> Predicate:
    """Majority-color strong agents outnumber the other color by at least ``theta``."""

    def pred(trace: Trace) -> np.ndarray:
        xs, ys = strong_totals(trace)
        if truth is Output.Y:
            xs, ys = ys, xs
        # an empty strong population does not count as separated
        return (xs > 0) & (xs >= theta * ys)

    return pred


def majority_correct(truth: Output) -> Predicate:
    """More agents output ``truth`` than the opposite value."""

    def pred(trace: Trace) -> np.ndarray:
        out = trace.outputs
        if truth is Output.X:
            return out[:, 0] > out[:, 1]
        return out[:, 1] > out[:, 0]

    return pred


def all_neutral() -> Predicate:
    return lambda trace: trace.neutral == trace.n


def strong_fraction(theta: float) -> Predicate:
    return lambda trace: (trace.n - trace.neutral) >= theta * trace.n


def convergence_time(trace: Trace, predicate: Predicate) -> float | None:
    """Parallel time of the first snapshot from which ``predicate`` holds to the end."""
    ok = np.asarray(predicate(trace), dtype=bool)
    if ok.size == 0 or not ok[-1]:
        return None
    bad = np.flatnonzero(~ok)
    first = 0 if bad.size == 0 else bad[-1] + 1
    return float(trace.ptime[first])


# ---------------------------------------------------------------------------
# population metrics


def truth_of(x0: int, y0: int) -> Output:
    if x0 > y0:
        return Output.X
    if y0 > x0:
        return Output.Y
    return Output.UNDECIDED


def output_fractions(pop: Population) -> np.ndarray:
    """Fractions of agents outputting (X, Y, Undecided)."""
    table = output_table(pop.params)
    return np.array([pop.counts[table == k].sum() for k in range(3)], dtype=np.float64) / pop.n


def wrong_output_fraction(pop: Population, truth: Output) -> tuple[float, float]:
    """(fraction with the wrong output, fraction undecided)."""
    if truth not in (Output.X, Output.Y):
        raise ValueError("ground truth must be X or Y")
    fx, fy, fu = output_fractions(pop)
    return (fy if truth is Output.X else fx), fu


def counter_hit_fraction(pop: Population, target: int, horizon_ptime: float) -> float:
    """Fraction of agents whose counter reached ``target`` (= +m or -m) by ``horizon_ptime``."""
    m = pop.params.m
    if not pop.params.variant.has_counter:
        raise ValueError("counter hits need the counter variant")
    if target == 0 and m == 0:
        return 1.0
    if target == m:
        hits = pop.hit_pos
    elif target == -m:
        hits = pop.hit_neg
    else:
        raise ValueError("counter hits are tracked only for the bounds +m and -m")
    limit = horizon_ptime * pop.n
    return float(np.count_nonzero((hits >= 0) & (hits <= limit))) / pop.n


def potential(pop: Population, d: float) -> float:
    """Sum over agents of ``d ** -level`` (baselines count 1, neutral agents 0)."""
    if not d > 1.0:
        raise ValueError("potential base must exceed 1")
    counts = pop.code_counts()
    total = 0.0
    for code in range(1, pop.params.n_codes):
        if counts[code]:
            total += counts[code] * d ** -float(code_level(code))
    return total


def potential_base(p_prime: float) -> float:
    return 2.0 * (1.0 + p_prime) / p_prime


def decay_horizon(n: int, s: int, p_prime: float, c: float = 1.0) -> int:
    """Steps after which the expected potential of a baseline-free run is below ``n**-c * d**-s``."""
    d = potential_base(p_prime)
    return math.ceil(((c + 1.0) * math.log(n) + s * math.log(d)) * n / p_prime)


def potential_decay(n: int, p_prime: float, seed: int, replication: int | None = None,
                    s: int | None = None, c: float = 1.0, init: str = "all_x1") -> dict:
    """Run a baseline-free coin population to the decay horizon and test ``potential < d**-s``."""
    params = ProtocolParams.auto(n, Variant.COIN_DETECTION, s=s, p=p_prime)
    stream = RandomStream(seed, replication)
    pop = make_baseline_free(params, init, stream)
    d = potential_base(p_prime)
    horizon = decay_horizon(n, params.s, p_prime, c)
    start = potential(pop, d)
    # a population below d**-s has no non-neutral agent left, so stop there
    watch = np.array([code_level(k) < LEVEL_INF for k in range(params.n_codes)])
    advance(pop, horizon, stream, watch_mask=watch)
    final = potential(pop, d)
    threshold = d ** -float(params.s)
    return {
        "n": n,
        "s": params.s,
        "p": p_prime,
        "d": d,
        "horizon_steps": horizon,
        "horizon_ptime": horizon / n,
        "initial_potential": start,
        "final_potential": final,
        "threshold": threshold,
        "stopped_ptime": pop.step / n,
        "passed": final < threshold,
    }


# ---------------------------------------------------------------------------
# trace summaries


@dataclass
class LevelReport:
    level: int
    predicted: float
    observed: float
    rel_error: float
    x_predicted: float | None
    x_observed: float | None
    x_rel_error: float | None
    y_predicted: float | None
    y_observed: float | None
    y_rel_error: float | None
    resolvable: bool


def _rel(obs: float, pred: float) -> float:
    if pred == 0.0:
        return 0.0 if obs == 0.0 else math.inf
    return abs(obs - pred) / pred


def tail_means(trace: Trace, window_ptime: float) -> dict[str, np.ndarray]:
    mask = trace.window(window_ptime)
    return {
        "R": trace.cumulative[mask].mean(axis=0),
        "x": trace.x_levels[mask].mean(axis=0),
        "y": trace.y_levels[mask].mean(axis=0),
    }


def concentration_report(trace: Trace, prediction: SteadyStatePrediction, window_ptime: float,
                         floor: float = RESOLUTION_FLOOR) -> list[LevelReport]:
    """Per-level relative errors of tail-window means against ``prediction``.

    Levels whose predicted cumulative count is below ``floor`` are marked
    unresolvable. Per-color errors are computed when the prediction has them.
    """
    if window_ptime > trace.ptime[-1] - trace.ptime[0] + 1e-9:
        raise ValueError("window exceeds the trace")
    n = trace.n
    tm = tail_means(trace, window_ptime)
    levels = min(trace.params.s, prediction.levels)
    rows = []
    for i in range(levels + 1):
        pr = n * prediction.r_tilde[i]
        row = dict(level=i, predicted=pr, observed=float(tm["R"][i]),
                   rel_error=_rel(float(tm["R"][i]), pr), resolvable=pr >= floor,
                   x_predicted=None, x_observed=None, x_rel_error=None,
                   y_predicted=None, y_observed=None, y_rel_error=None)
        if prediction.x_tilde is not None:
            for c in "xy":
                pc = n * getattr(prediction, f"{c}_tilde")[i]
                oc = float(tm[c][i])
                row[f"{c}_predicted"] = pc
                row[f"{c}_observed"] = oc
                row[f"{c}_rel_error"] = _rel(oc, pc)
        rows.append(LevelReport(**row))
    return rows


def level_growth_profile(trace: Trace, window_ptime: float) -> np.ndarray:
    """Tail-mean ratios |R_{i+1}| / |R_i| for i = 0..s-1 (nan where |R_i| = 0)."""
    R = tail_means(trace, window_ptime)["R"]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(R[:-1] > 0, R[1:] / np.where(R[:-1] > 0, R[:-1], 1), np.nan)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepConfig:
    params: ProtocolParams
    x0: int
    y0: int
    parallel_time: float
    seed: int = 0
    replications: int = 1
    switches: tuple[SwitchEvent, ...] = ()
    metrics: tuple[str, ...] = ("ratio_end",)
    window_fraction: float = 0.25
    snapshot_every_ptime: float = 1.0
    rest_policy: str = ALL_NEUTRAL
    ratio_threshold: float = 1.5

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not 0.0 < self.window_fraction <= 1.0:
            raise ValueError("window_fraction must lie in (0, 1]")
        if self.parallel_time < 0:
            raise ValueError("parallel_time must be nonnegative")
        if self.x0 + self.y0 > self.params.n:
            raise ValueError("x0 + y0 exceeds n")
        unknown = [m for m in self.metrics if m not in METRICS]
        if unknown:
            raise ValueError(f"unknown metrics {unknown}; known: {sorted(METRICS)}")

    @property
    def window_ptime(self) -> float:
        return self.window_fraction * self.parallel_time

    @property
    def final_baselines(self) -> tuple[int, int]:
        if not self.switches:
            return self.x0, self.y0
        last = max(self.switches, key=lambda sw: sw.at_parallel_time)
        if last.at_parallel_time > self.parallel_time:
            return self.x0, self.y0
        return last.new_x0, last.new_y0

    @property
    def last_switch_ptime(self) -> float:
        times = [sw.at_parallel_time for sw in self.switches if sw.at_parallel_time <= self.parallel_time]
        return max(times, default=0.0)

    def as_dict(self) -> dict:
        return {
            **self.params.as_dict(),
            "x0": self.x0,
            "y0": self.y0,
            "parallel_time": self.parallel_time,
            "seed": self.seed,
            "replications": self.replications,
            "switches": [
                {"at": sw.at_parallel_time, "x0": sw.new_x0, "y0": sw.new_y0} for sw in self.switches
            ],
            "metrics": list(self.metrics),
            "window_fraction": self.window_fraction,
            "snapshot_every_ptime": self.snapshot_every_ptime,
            "rest_policy": self.rest_policy,
            "ratio_threshold": self.ratio_threshold,
        }


@dataclass
class Replication:
    index: int
    metrics: dict[str, float]
    tail: dict[str, np.ndarray]


Metric = Callable[[Population, Trace, SweepConfig], float]


def _truth(cfg: SweepConfig) -> Output:
    return truth_of(*cfg.final_baselines)


def _nan(x: float | None) -> float:
    return math.nan if x is None else float(x)


def _ratio_end(pop, trace, cfg):
    r = strong_ratio(trace)[-1]
    return float(1.0 / r if _truth(cfg) is Output.Y and r > 0 else r)


def _ratio_ok(pop, trace, cfg):
    return float(ratio_predicate(cfg.ratio_threshold, _truth(cfg))(trace)[-1])


def _convergence_ratio(pop, trace, cfg):
    return _nan(convergence_time(trace, ratio_predicate(cfg.ratio_threshold, _truth(cfg))))


def _convergence_majority(pop, trace, cfg):
    return _nan(convergence_time(trace, majority_correct(_truth(cfg))))


def _recovery_time(pop, trace, cfg):
    t = convergence_time(trace, majority_correct(_truth(cfg)))
    return _nan(None if t is None else max(0.0, t - cfg.last_switch_ptime))


def _wrong_output(pop, trace, cfg):
    return wrong_output_fraction(pop, _truth(cfg))[0]


def _undecided(pop, trace, cfg):
    return float(output_fractions(pop)[2])


def _counter_hit(pop, trace, cfg):
    m = pop.params.m
    target = m if _truth(cfg) is Output.X else -m
    return counter_hit_fraction(pop, target, cfg.parallel_time)


def _all_neutral_time(pop, trace, cfg):
    return _nan(convergence_time(trace, all_neutral()))


def _strong_fraction_end(pop, trace, cfg):
    return float(1.0 - trace.neutral[-1] / trace.n)


def _leaks(pop, trace, cfg):
    return float(pop.leaks)


METRICS: dict[str, Metric] = {
    "ratio_end": _ratio_end,
    "ratio_ok": _ratio_ok,
    "convergence_ratio": _convergence_ratio,
    "convergence_majority": _convergence_majority,
    "recovery_time": _recovery_time,
    "wrong_output": _wrong_output,
    "undecided": _undecided,
    "counter_hit": _counter_hit,
    "all_neutral_time": _all_neutral_time,
    "strong_fraction_end": _strong_fraction_end,
    "leaks": _leaks,
}

BOOLEAN_METRICS = {"ratio_ok"}


def run_replication(cfg: SweepConfig, r: int, keep: bool = False):
    """Run replication ``r`` on substream ``(seed, r)``; optionally return its population and trace."""
    stream = RandomStream(cfg.seed, r)
    pop = make_initial(cfg.params, cfg.x0, cfg.y0, cfg.rest_policy, stream)
    cadence = max(1, round(cfg.snapshot_every_ptime * cfg.params.n))
    trace = run(pop, round(cfg.parallel_time * cfg.params.n), stream, cadence, cfg.switches)
    values = {name: float(METRICS[name](pop, trace, cfg)) for name in cfg.metrics}
    result = Replication(r, values, tail_means(trace, cfg.window_ptime))
    if keep:
        return result, pop, trace
    return result


def _worker(args):
    cfg, r = args
    return run_replication(cfg, r)


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return 1


@dataclass
class SweepSummary:
    config: dict
    metrics: dict[str, dict[str, float]]
    success: dict[str, float]
    level_means: dict[str, list[float]]
    replications: list[Replication] = field(repr=False, default_factory=list)

    def as_dict(self) -> dict:
        return {
            "config": self.config,
            "metrics": self.metrics,
            "success": self.success,
            "level_means": self.level_means,
            "per_replication": [
                {"rep": rep.index, **{k: _json_float(v) for k, v in rep.metrics.items()}}
                for rep in self.replications
            ],
        }

    def per_replication_csv(self) -> str:
        buf = io.StringIO()
        buf.write("rep,metric,value\n")
        for rep in self.replications:
            for name, value in rep.metrics.items():
                buf.write(f"{rep.index},{name},{value!r}\n")
        return buf.getvalue()


def _json_float(x: float):
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _stats(values: list[float]) -> dict[str, float]:
    arr = np.array(values, dtype=np.float64)
    finite = arr[~np.isnan(arr)]
    if finite.size == 0:
        return {"mean": None, "std": None, "min": None, "max": None, "count": 0}
    with np.errstate(invalid="ignore"):
        mean, std = float(finite.mean()), float(finite.std())
    return {
        "mean": _json_float(mean),
        "std": _json_float(std),
        "min": _json_float(float(finite.min())),
        "max": _json_float(float(finite.max())),
        "count": int(finite.size),
    }


def summarize(cfg: SweepConfig, reps: list[Replication]) -> SweepSummary:
    reps = sorted(reps, key=lambda rep: rep.index)
    metrics, success = {}, {}
    for name in cfg.metrics:
        values = [rep.metrics[name] for rep in reps]
        metrics[name] = _stats(values)
        if name in BOOLEAN_METRICS:
            success[name] = float(np.mean(values))
        else:
            # a finite value counts as "reached" for time-like metrics
            success[name] = float(np.mean([not math.isnan(v) for v in values]))
    level_means = {
        key: np.mean([rep.tail[key] for rep in reps], axis=0).tolist() for key in ("R", "x", "y")
    }
    return SweepSummary(cfg.as_dict(), metrics, success, level_means, reps)


def replicate(cfg: SweepConfig, workers: int | None = None) -> SweepSummary:
    """Run all replications and aggregate them in replication order."""
    workers = default_workers() if workers is None else workers
    jobs = [(cfg, r) for r in range(cfg.replications)]
    if workers > 1 and cfg.replications > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reps = list(ex.map(_worker, jobs))
    else:
        reps = [_worker(job) for job in jobs]
    return summarize(cfg, reps)
