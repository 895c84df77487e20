"""Uniform random-scheduler simulation of a population of agents.

A :class:`Population` is a flat ``uint8`` array of state codes (see
:mod:`popcomp.protocol`) plus per-agent counters, with per-state counts kept
up to date on every interaction. The interaction loop runs under numba and
consumes raw Philox draws from a :class:`~popcomp.rng.RandomStream`:

* generic leak enabled: one draw decides whether the step is a leak; a leak
  step uses one or two more draws to pick the agent and the new state;
* otherwise two draws pick the ordered pair ``(i, j)``, ``i != j``;
* probabilistic variants take one more draw for the coin / leak branch.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .protocol import (
    AgentState,
    GenericLeak,
    LeakPolicy,
    ProtocolParams,
    Variant,
    code_level,
    counter_step,
    decode_state,
    encode_state,
    make_code,
    output_table,
    transition_codes,
    validate_state,
)
from .rng import RandomStream

ALL_NEUTRAL = "all_neutral"
ARBITRARY = "arbitrary"
REST_POLICIES = (ALL_NEUTRAL, ARBITRARY)

_LEAK_KIND = {"fixed": 0, "worst_case": 1, "random": 2}
_DRAWS_PER_STEP = 4


@dataclass(frozen=True)
class SwitchEvent:
    at_parallel_time: float
    new_x0: int
    new_y0: int

    def __post_init__(self):
        if self.at_parallel_time < 0:
            raise ValueError("switch time must be nonnegative")
        if self.new_x0 < 0 or self.new_y0 < 0:
            raise ValueError("baseline counts must be nonnegative")


@dataclass
class Population:
    params: ProtocolParams
    states: np.ndarray
    counters: np.ndarray
    counts: np.ndarray
    step: int = 0
    leaks: int = 0
    hit_pos: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    hit_neg: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    @classmethod
    def from_arrays(cls, params: ProtocolParams, states, counters=None) -> Population:
        states = np.ascontiguousarray(states, dtype=np.uint8)
        if states.shape != (params.n,):
            raise ValueError(f"expected {params.n} agents, got {states.shape}")
        if states.max(initial=0) >= params.n_codes:
            raise ValueError("state code beyond level cap")
        if counters is None or not params.variant.has_counter:
            counters = np.zeros(params.n, dtype=np.int8)
        counters = np.ascontiguousarray(counters, dtype=np.int8)
        if np.any(np.abs(counters.astype(np.int64)) > params.m):
            raise ValueError(f"counter outside [-{params.m}, {params.m}]")
        pop = cls(params, states, counters, np.zeros(params.n_codes * params.width, np.int64))
        pop.counts = pop.histogram()
        if params.variant.has_counter:
            pop.hit_pos = np.where(counters == params.m, 0, -1).astype(np.int64)
            pop.hit_neg = np.where(counters == -params.m, 0, -1).astype(np.int64)
        return pop

    @classmethod
    def from_states(cls, params: ProtocolParams, agents: list[AgentState]) -> Population:
        for a in agents:
            validate_state(a, params)
        codes = [encode_state(a) for a in agents]
        counters = [a.counter or 0 for a in agents]
        return cls.from_arrays(params, codes, counters)

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def parallel_time(self) -> float:
        return self.step / self.params.n

    def slot(self, i: int) -> int:
        return int(self.states[i]) * self.params.width + self._offset(i)

    def _offset(self, i: int) -> int:
        return int(self.counters[i]) + self.params.m if self.params.variant.has_counter else 0

    def histogram(self) -> np.ndarray:
        width = self.params.width
        slots = self.states.astype(np.int64) * width
        if self.params.variant.has_counter:
            slots += self.counters.astype(np.int64) + self.params.m
        return np.bincount(slots, minlength=self.params.n_codes * width).astype(np.int64)

    def check_counts(self) -> None:
        if self.counts.sum() != self.n:
            raise AssertionError("state counts do not sum to n")
        if not np.array_equal(self.counts, self.histogram()):
            raise AssertionError("state counts drifted from the agent histogram")

    def code_counts(self) -> np.ndarray:
        return self.counts.reshape(self.params.n_codes, self.params.width).sum(axis=1)

    def baseline_counts(self) -> tuple[int, int]:
        c = self.code_counts()
        return int(c[1]), int(c[2])

    def agent(self, i: int) -> AgentState:
        counter = int(self.counters[i]) if self.params.variant.has_counter else None
        return decode_state(int(self.states[i]), counter)

    def agents(self) -> list[AgentState]:
        return [self.agent(i) for i in range(self.n)]

    def levels(self) -> np.ndarray:
        """Per-agent level: 0 for baselines, ``inf`` for neutral agents."""
        lv = ((self.states.astype(np.int64) - 1) >> 1).astype(np.float64)
        lv[self.states == 0] = np.inf
        return lv

    def copy(self) -> Population:
        return Population(
            self.params,
            self.states.copy(),
            self.counters.copy(),
            self.counts.copy(),
            self.step,
            self.leaks,
            self.hit_pos.copy(),
            self.hit_neg.copy(),
        )

    def set_agent(self, i: int, code: int, counter: int | None = None) -> None:
        old = self.slot(i)
        self.states[i] = code
        if counter is not None and self.params.variant.has_counter:
            self.counters[i] = counter
        self.counts[old] -= 1
        self.counts[self.slot(i)] += 1


def make_initial(params: ProtocolParams, x0: int, y0: int, rest_policy: str = ALL_NEUTRAL,
                 stream: RandomStream | None = None) -> Population:
    """Population with ``x0`` X_0 agents, ``y0`` Y_0 agents and the rest per ``rest_policy``.

    Baselines occupy the lowest indices. Under ``arbitrary`` the remaining
    agents are uniform over the non-catalytic states and counters uniform
    over ``[-m, m]``; under ``all_neutral`` they are N with counter 0.
    """
    n = params.n
    if x0 < 0 or y0 < 0 or x0 + y0 > n:
        raise ValueError(f"baseline counts x0={x0}, y0={y0} do not fit in n={n}")
    if rest_policy not in REST_POLICIES:
        raise ValueError(f"unknown rest policy {rest_policy!r}")
    states = np.zeros(n, dtype=np.uint8)
    states[:x0] = 1
    states[x0:x0 + y0] = 2
    counters = np.zeros(n, dtype=np.int8)
    if rest_policy == ARBITRARY:
        if stream is None:
            raise ValueError("arbitrary initialization needs a random stream")
        rest = n - x0 - y0
        states[x0 + y0:] = _random_noncatalytic(params, stream, rest)
        if params.variant.has_counter:
            counters[:] = stream.generator.integers(-params.m, params.m + 1, size=n)
    return Population.from_arrays(params, states, counters)


BASELINE_FREE_STARTS = ("all_neutral", "all_x1", "arbitrary")


def make_baseline_free(params: ProtocolParams, init: str, stream: RandomStream | None = None) -> Population:
    """Population without baselines: all N, all X_1, or uniform over non-catalytic states."""
    if init == "all_neutral":
        return make_initial(params, 0, 0)
    if init == "all_x1":
        return Population.from_arrays(params, np.full(params.n, 3, np.uint8))
    if init == "arbitrary":
        return make_initial(params, 0, 0, ARBITRARY, stream)
    raise ValueError(f"unknown baseline-free start {init!r}; choose from {BASELINE_FREE_STARTS}")


def _random_noncatalytic(params: ProtocolParams, stream: RandomStream, size: int) -> np.ndarray:
    if params.variant.merged:
        pool = np.array([0] + [make_code(lv, 0) for lv in range(1, params.s + 1)], np.uint8)
    else:
        pool = np.array([0] + list(range(3, params.n_codes)), np.uint8)
    return pool[stream.generator.integers(0, pool.shape[0], size=size)]


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, inline="always")
def _u01(x):
    return (x >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _code_count(counts, code, width):
    c = 0
    for k in range(code * width, (code + 1) * width):
        c += counts[k]
    return c


@numba.njit(cache=True)
def _leak_pick(states, counts, width, merged, s, kind, src, dst, raw, pos):
    """Choose the agent a generic leak rewrites and its new code.

    Returns ``(index, new_code, pos)``; ``index == -1`` when nothing is eligible.
    """
    n = states.shape[0]
    if kind == 1:
        x0 = _code_count(counts, 1, width)
        y0 = _code_count(counts, 2, width)
        if x0 > y0:
            src, dst = 3, 4
        elif y0 > x0:
            src, dst = 4, 3
        else:
            return -1, 0, pos
    if kind == 0 or kind == 1:
        c = _code_count(counts, src, width)
        if c == 0:
            return -1, 0, pos
        k = int(_u01(raw[pos]) * c)
        pos += 1
        for idx in range(n):
            if states[idx] == src:
                if k == 0:
                    return idx, dst, pos
                k -= 1
        return -1, 0, pos
    c = n - _code_count(counts, 1, width) - _code_count(counts, 2, width)
    if c == 0:
        return -1, 0, pos
    k = int(_u01(raw[pos]) * c)
    pos += 1
    options = s + 1 if merged else 2 * s + 1
    t = int(_u01(raw[pos]) * options)
    pos += 1
    if t == 0:
        new = 0
    elif merged:
        new = make_code(t, 0)
    else:
        new = 2 + t
    for idx in range(n):
        if states[idx] == 0 or states[idx] > 2:
            if k == 0:
                return idx, new, pos
            k -= 1
    return -1, 0, pos


@numba.njit(cache=True)
def _simulate(states, counters, counts, hit_pos, hit_neg, record,
              variant, s, m, width, has_counter, p, zeta,
              leak_rate, leak_kind, leak_src, leak_dst,
              watch_mask, watch_count, use_watch,
              raw, pos, step0, nsteps):
    n = states.shape[0]
    merged = variant != 0 and variant != 2
    probabilistic = variant >= 3
    limit = raw.shape[0] - 4
    done = 0
    leaks = 0
    while done < nsteps and pos <= limit:
        if use_watch and watch_count == 0:
            break
        cur = step0 + done + 1
        if leak_rate > 0.0:
            fire = _u01(raw[pos]) < leak_rate
            pos += 1
            if fire:
                idx, new, pos = _leak_pick(states, counts, width, merged, s,
                                           leak_kind, leak_src, leak_dst, raw, pos)
                record[0] = -1
                record[1] = -1
                record[2] = idx
                if idx >= 0:
                    old = states[idx]
                    off = counters[idx] + m if has_counter else 0
                    counts[old * width + off] -= 1
                    counts[new * width + off] += 1
                    states[idx] = new
                    if use_watch:
                        watch_count += watch_mask[new] - watch_mask[old]
                    leaks += 1
                done += 1
                continue
        i = int(_u01(raw[pos]) * n)
        j = int(_u01(raw[pos + 1]) * (n - 1))
        pos += 2
        if j >= i:
            j += 1
        u = 0.0
        if probabilistic:
            u = _u01(raw[pos])
            pos += 1
        record[0] = i
        record[1] = j
        record[2] = -1
        a = states[i]
        b = states[j]
        na, nb, lk = transition_codes(a, b, variant, s, p, zeta, u)
        leaks += lk
        if has_counter:
            ca = counters[i]
            cb = counters[j]
            nca = counter_step(ca, b, m)
            ncb = counter_step(cb, a, m)
            counts[a * width + ca + m] -= 1
            counts[na * width + nca + m] += 1
            counts[b * width + cb + m] -= 1
            counts[nb * width + ncb + m] += 1
            counters[i] = nca
            counters[j] = ncb
            if nca == m and hit_pos[i] < 0:
                hit_pos[i] = cur
            if ncb == m and hit_pos[j] < 0:
                hit_pos[j] = cur
            if nca == -m and hit_neg[i] < 0:
                hit_neg[i] = cur
            if ncb == -m and hit_neg[j] < 0:
                hit_neg[j] = cur
        else:
            if na != a:
                counts[a] -= 1
                counts[na] += 1
            if nb != b:
                counts[b] -= 1
                counts[nb] += 1
        if use_watch:
            watch_count += watch_mask[na] - watch_mask[a] + watch_mask[nb] - watch_mask[b]
        states[i] = na
        states[j] = nb
        done += 1
    return done, pos, leaks, watch_count


def _leak_args(params: ProtocolParams) -> tuple[float, int, int, int]:
    leak = params.generic_leak
    if leak is None or leak.rate <= 0.0:
        return 0.0, 0, 0, 0
    return leak.rate, _LEAK_KIND[leak.policy.kind], leak.policy.source, leak.policy.target


def advance(pop: Population, nsteps: int, stream: RandomStream,
            watch_mask: np.ndarray | None = None) -> int:
    """Execute up to ``nsteps`` interactions; returns the number executed.

    With ``watch_mask`` (a boolean per state code) the run stops early as soon
    as no agent occupies a watched code.
    """
    params = pop.params
    rate, kind, src, dst = _leak_args(params)
    use_watch = watch_mask is not None
    mask = (np.zeros(params.n_codes, np.int64) if watch_mask is None
            else np.asarray(watch_mask, dtype=np.int64))
    watch_count = int(pop.code_counts()[mask.astype(bool)].sum()) if use_watch else 0
    record = np.zeros(3, np.int64)
    total = 0
    while total < nsteps:
        if use_watch and watch_count == 0:
            break
        chunk = min(nsteps - total, 1 << 22)
        buf, pos = stream.raw(_DRAWS_PER_STEP * 64)
        done, pos, leaks, watch_count = _simulate(
            pop.states, pop.counters, pop.counts, pop.hit_pos, pop.hit_neg, record,
            int(params.variant), params.s, params.m, params.width,
            params.variant.has_counter, params.p, params.zeta,
            rate, kind, src, dst,
            mask, watch_count, use_watch,
            buf, pos, pop.step, chunk,
        )
        stream.consumed(pos)
        pop.step += done
        pop.leaks += leaks
        total += done
    return total


@dataclass(frozen=True)
class InteractionRecord:
    step: int
    first: int
    second: int
    leak_agent: int
    before: tuple[AgentState, ...]
    after: tuple[AgentState, ...]

    @property
    def is_leak(self) -> bool:
        return self.first < 0


def step(pop: Population, stream: RandomStream) -> InteractionRecord:
    """Execute exactly one scheduler step and report what happened."""
    params = pop.params
    if pop.n < 2:
        raise ValueError("need at least two agents")
    rate, kind, src, dst = _leak_args(params)
    record = np.full(3, -1, np.int64)
    buf, pos = stream.raw(_DRAWS_PER_STEP)
    snapshot_states = pop.states.copy()
    snapshot_counters = pop.counters.copy()
    done, pos, leaks, _ = _simulate(
        pop.states, pop.counters, pop.counts, pop.hit_pos, pop.hit_neg, record,
        int(params.variant), params.s, params.m, params.width,
        params.variant.has_counter, params.p, params.zeta,
        rate, kind, src, dst,
        np.zeros(params.n_codes, np.int64), 0, False,
        buf, pos, pop.step, 1,
    )
    stream.consumed(pos)
    pop.step += done
    pop.leaks += leaks
    i, j, leak_agent = (int(x) for x in record)
    touched = [leak_agent] if i < 0 else [i, j]
    touched = [t for t in touched if t >= 0]
    has_c = params.variant.has_counter
    before = tuple(decode_state(int(snapshot_states[t]), int(snapshot_counters[t]) if has_c else None)
                   for t in touched)
    after = tuple(pop.agent(t) for t in touched)
    return InteractionRecord(pop.step, i, j, leak_agent, before, after)


def leak_policy_apply(pop: Population, policy: LeakPolicy, stream: RandomStream) -> int:
    """Apply one generic leak under ``policy``; returns the rewritten index or -1."""
    params = pop.params
    buf, pos = stream.raw(4)
    idx, new, pos = _leak_pick(pop.states, pop.counts, params.width, params.variant.merged,
                               params.s, _LEAK_KIND[policy.kind], policy.source, policy.target,
                               buf, pos)
    stream.consumed(pos)
    if idx >= 0:
        pop.set_agent(idx, int(new))
        pop.leaks += 1
    return int(idx)


def apply_switch(pop: Population, new_x0: int, new_y0: int, stream: RandomStream) -> dict:
    """Move the baseline counts to ``(new_x0, new_y0)``.

    Growth recruits uniformly chosen agents that were non-baseline before the
    switch; shrinkage turns uniformly chosen baselines of that color neutral.
    Counters are preserved.
    """
    n = pop.n
    if new_x0 < 0 or new_y0 < 0 or new_x0 + new_y0 > n:
        raise ValueError(f"baseline counts ({new_x0}, {new_y0}) do not fit in n={n}")
    xs = np.flatnonzero(pop.states == 1)
    ys = np.flatnonzero(pop.states == 2)
    others = np.flatnonzero((pop.states == 0) | (pop.states > 2))
    grow_x = max(0, new_x0 - xs.shape[0])
    grow_y = max(0, new_y0 - ys.shape[0])
    if grow_x + grow_y > others.shape[0]:
        raise ValueError("not enough non-baseline agents to grow the baselines")
    recruits = stream.choice(others, grow_x + grow_y)
    drop_x = stream.choice(xs, max(0, xs.shape[0] - new_x0))
    drop_y = stream.choice(ys, max(0, ys.shape[0] - new_y0))
    for idx in recruits[:grow_x]:
        pop.set_agent(int(idx), 1)
    for idx in recruits[grow_x:]:
        pop.set_agent(int(idx), 2)
    for idx in np.concatenate([drop_x, drop_y]):
        pop.set_agent(int(idx), 0)
    return {
        "step": pop.step,
        "ptime": pop.parallel_time,
        "old_x0": int(xs.shape[0]),
        "old_y0": int(ys.shape[0]),
        "new_x0": int(new_x0),
        "new_y0": int(new_y0),
    }


# ---------------------------------------------------------------------------
# traces


@dataclass
class Trace:
    params: ProtocolParams
    cadence: int
    steps: list[int] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)
    leaks: list[int] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def record(self, pop: Population) -> None:
        if self.steps and pop.step <= self.steps[-1]:
            raise AssertionError("snapshots must be strictly increasing in step")
        self.steps.append(pop.step)
        self.snapshots.append(pop.counts.copy())
        self.leaks.append(pop.leaks)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def step_array(self) -> np.ndarray:
        return np.asarray(self.steps, dtype=np.int64)

    @property
    def ptime(self) -> np.ndarray:
        return self.step_array / self.n

    @property
    def slot_matrix(self) -> np.ndarray:
        return np.vstack(self.snapshots)

    @property
    def code_matrix(self) -> np.ndarray:
        """Snapshot-by-code counts, summed over counter values."""
        p = self.params
        return self.slot_matrix.reshape(len(self), p.n_codes, p.width).sum(axis=2)

    @property
    def x_levels(self) -> np.ndarray:
        """|X_i| for i = 0..s, one row per snapshot."""
        return self.code_matrix[:, 1::2]

    @property
    def y_levels(self) -> np.ndarray:
        return self.code_matrix[:, 2::2]

    @property
    def neutral(self) -> np.ndarray:
        return self.code_matrix[:, 0]

    @property
    def level_counts(self) -> np.ndarray:
        """|X_i| + |Y_i| for i = 0..s."""
        return self.x_levels + self.y_levels

    @property
    def cumulative(self) -> np.ndarray:
        """|R_i| = number of agents with level <= i, for i = 0..s."""
        return np.cumsum(self.level_counts, axis=1)

    @property
    def outputs(self) -> np.ndarray:
        """Output tallies (X, Y, Undecided) per snapshot."""
        table = output_table(self.params)
        mat = self.slot_matrix
        return np.stack([mat[:, table == k].sum(axis=1) for k in range(3)], axis=1)

    def window(self, ptime_span: float) -> np.ndarray:
        """Boolean mask of snapshots in the last ``ptime_span`` units of parallel time."""
        t = self.ptime
        return t >= t[-1] - ptime_span - 1e-12

    def csv_header(self) -> list[str]:
        s = self.params.s
        return (["step", "ptime", "x0", "y0", "neutral"]
                + [f"x{i}" for i in range(1, s + 1)]
                + [f"y{i}" for i in range(1, s + 1)]
                + ["out_x", "out_y", "out_undecided", "leaks"])

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.csv_header()) + "\n")
        xs, ys, neut, outs = self.x_levels, self.y_levels, self.neutral, self.outputs
        for r, st in enumerate(self.steps):
            row = [str(st), f"{st / self.n:.3f}", str(xs[r, 0]), str(ys[r, 0]), str(neut[r])]
            row += [str(v) for v in xs[r, 1:]]
            row += [str(v) for v in ys[r, 1:]]
            row += [str(v) for v in outs[r]]
            row.append(str(self.leaks[r]))
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def to_csv(self, path: str | Path) -> None:
        Path(path).write_bytes(self.csv_text().encode("utf-8"))


def run(pop: Population, total_steps: int, stream: RandomStream, cadence: int | None = None,
        switches: list[SwitchEvent] | tuple = ()) -> Trace:
    """Run ``total_steps`` interactions, snapshotting every ``cadence`` steps.

    Each switch is applied once, before the first interaction whose step
    count reaches ``ceil(at * n)``; snapshots include the initial and final
    configurations.
    """
    if total_steps < 0:
        raise ValueError("total_steps must be nonnegative")
    n = pop.n
    cadence = n if cadence is None else int(cadence)
    if cadence < 1:
        raise ValueError("cadence must be positive")
    for sw in switches:
        if sw.new_x0 + sw.new_y0 > n:
            raise ValueError("switch baseline counts exceed n")
    pending = sorted(switches, key=lambda sw: sw.at_parallel_time)
    trace = Trace(pop.params, cadence)
    trace.record(pop)
    end = pop.step + total_steps
    next_snap = pop.step + cadence
    while True:
        while pending and pop.step < end and pop.step >= math.ceil(pending[0].at_parallel_time * n):
            sw = pending.pop(0)
            event = apply_switch(pop, sw.new_x0, sw.new_y0, stream)
            event["kind"] = "switch"
            event["at"] = sw.at_parallel_time
            trace.events.append(event)
        if pop.step >= end:
            break
        target = min(end, next_snap)
        if pending:
            target = min(target, max(pop.step + 1, math.ceil(pending[0].at_parallel_time * n)))
        advance(pop, target - pop.step, stream)
        if pop.step == next_snap:
            trace.record(pop)
            next_snap += cadence
    if trace.steps[-1] != pop.step:
        trace.record(pop)
    trace.events.append({"kind": "leaks", "step": pop.step, "count": pop.leaks})
    return trace


def simulate(params: ProtocolParams, x0: int, y0: int, parallel_time: float, seed: int,
             replication: int | None = None, rest_policy: str = ALL_NEUTRAL,
             switches: list[SwitchEvent] | tuple = (),
             snapshot_every_ptime: float = 1.0) -> tuple[Population, Trace]:
    """Convenience: build, run and return the final population and its trace."""
    stream = RandomStream(seed, replication)
    pop = make_initial(params, x0, y0, rest_policy, stream)
    cadence = max(1, round(snapshot_every_ptime * params.n))
    trace = run(pop, round(parallel_time * params.n), stream, cadence, switches)
    return pop, trace


__all__ = [
    "ALL_NEUTRAL",
    "ARBITRARY",
    "GenericLeak",
    "InteractionRecord",
    "LeakPolicy",
    "Population",
    "SwitchEvent",
    "Trace",
    "Variant",
    "advance",
    "apply_switch",
    "code_level",
    "leak_policy_apply",
    "make_baseline_free",
    "make_initial",
    "run",
    "simulate",
    "step",
]
