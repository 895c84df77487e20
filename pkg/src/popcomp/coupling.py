"""Coupled populations driven by one shared schedule.

Every population in a coupled run sees the same ordered pair ``(i, j)`` and
the same uniform variate at every step. The level/color relations between
three populations ``u, v, w`` are checked after every step (or every k-th):

* ``P1``: level(u_i) <= level(v_i) and level(u_i) <= level(w_i)
* ``P2``: level(u_i) == min(level(v_i), level(w_i))
* ``P3``: P2, plus equal colors wherever u_i shares its level with v_i or w_i

Neutral agents carry a color for P3 purposes; see ``NEUTRAL_COLOR_POLICIES``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .engine import Population, advance, make_baseline_free
from .protocol import LEVEL_INF, ProtocolParams, Variant, code_color, code_level, transition_codes
from .rng import RandomStream

PROPERTIES = ("P1", "P2", "P3")
NEUTRAL_COLOR_POLICIES = ("fixed", "last_strong")
MAX_RECORDED_VIOLATIONS = 1000


class CouplingPreconditionError(ValueError):
    def __init__(self, prop: str, index: int):
        super().__init__(f"property {prop} does not hold initially at agent index {index}")
        self.property = prop
        self.index = index


@numba.njit(cache=True)
def _first_violation(states, colors, prop):
    """Index of the first agent violating ``prop`` (1, 2 or 3), or -1."""
    n = states.shape[1]
    for k in range(n):
        lu = code_level(states[0, k])
        lv = code_level(states[1, k])
        lw = code_level(states[2, k])
        if prop == 1:
            if lu > lv or lu > lw:
                return k
            continue
        lm = lv if lv < lw else lw
        if lu != lm:
            return k
        if prop == 3:
            if lu == lv and colors[0, k] != colors[1, k]:
                return k
            if lu == lw and colors[0, k] != colors[2, k]:
                return k
    return -1


@numba.njit(cache=True)
def _collect(states, colors, prop, step, out, n_out, total):
    n = states.shape[1]
    for k in range(n):
        lu = code_level(states[0, k])
        lv = code_level(states[1, k])
        lw = code_level(states[2, k])
        bad = False
        if prop == 1:
            bad = lu > lv or lu > lw
        else:
            lm = lv if lv < lw else lw
            bad = lu != lm
            if not bad and prop == 3:
                bad = (lu == lv and colors[0, k] != colors[1, k]) or (
                    lu == lw and colors[0, k] != colors[2, k])
        if bad:
            total += 1
            if n_out < out.shape[0]:
                out[n_out, 0] = step
                out[n_out, 1] = prop
                out[n_out, 2] = k
                n_out += 1
    return n_out, total


@numba.njit(cache=True)
def _below_cap_count(states, row, s):
    c = 0
    for k in range(states.shape[1]):
        if code_level(states[row, k]) < s:
            c += 1
    return c


@numba.njit(cache=True)
def _coupled_kernel(states, colors, last_strong, variant, s, p, zeta, props, check_every,
                    raw, pos, step0, nsteps, out, n_out, total, reset_row, reset_step):
    K = states.shape[0]
    n = states.shape[1]
    probabilistic = variant >= 3
    limit = raw.shape[0] - 3
    done = 0
    while done < nsteps and pos <= limit:
        i = int((raw[pos] >> np.uint64(11)) * (1.0 / 9007199254740992.0) * n)
        j = int((raw[pos + 1] >> np.uint64(11)) * (1.0 / 9007199254740992.0) * (n - 1))
        pos += 2
        if j >= i:
            j += 1
        u = 0.0
        if probabilistic:
            u = (raw[pos] >> np.uint64(11)) * (1.0 / 9007199254740992.0)
            pos += 1
        for r in range(K):
            a = states[r, i]
            b = states[r, j]
            na, nb, lk = transition_codes(a, b, variant, s, p, zeta, u)
            states[r, i] = na
            states[r, j] = nb
            if na != 0:
                colors[r, i] = code_color(na)
            elif not last_strong:
                colors[r, i] = 0
            if nb != 0:
                colors[r, j] = code_color(nb)
            elif not last_strong:
                colors[r, j] = 0
        done += 1
        cur = step0 + done
        if check_every > 0 and cur % check_every == 0:
            for q in range(props.shape[0]):
                n_out, total = _collect(states, colors, props[q], cur, out, n_out, total)
            if reset_step < 0 and _below_cap_count(states, reset_row, s) == 0:
                reset_step = cur
    return done, pos, n_out, total, reset_step


@dataclass
class CoupledRun:
    populations: list[Population]
    seed: int
    properties: tuple[str, ...] = ()
    neutral_color: str = "fixed"
    check_every: int = 1
    substream: int | None = None
    colors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.populations:
            raise ValueError("a coupled run needs at least one population")
        params = self.populations[0].params
        for pop in self.populations:
            if pop.params != params:
                raise ValueError("coupled populations must share parameters (and n)")
        if params.variant.has_counter or params.generic_leak is not None:
            raise ValueError("coupling supports only the counter-free, generic-leak-free variants")
        bad = [p for p in self.properties if p not in PROPERTIES]
        if bad:
            raise ValueError(f"unknown properties {bad}")
        if self.properties and len(self.populations) != 3:
            raise ValueError("properties P1-P3 relate exactly three populations (u, v, w)")
        if self.neutral_color not in NEUTRAL_COLOR_POLICIES:
            raise ValueError(f"unknown neutral color policy {self.neutral_color!r}")
        if self.check_every < 1:
            raise ValueError("check_every must be positive")
        states = np.stack([p.states for p in self.populations])
        # neutral agents start with color X under both policies
        self.colors = np.where(states == 0, 0, (states.astype(np.int64) - 1) & 1).astype(np.uint8)

    @property
    def params(self) -> ProtocolParams:
        return self.populations[0].params

    def check(self) -> None:
        """Raise :class:`CouplingPreconditionError` if a selected property fails now."""
        states = np.stack([p.states for p in self.populations])
        for prop in self.properties:
            k = _first_violation(states, self.colors, int(prop[1]))
            if k >= 0:
                raise CouplingPreconditionError(prop, int(k))


@dataclass
class CouplingReport:
    steps: int
    violations: list[dict]
    total_violations: int
    first_hit_ptime: float | None
    populations: list[Population] = field(repr=False, default_factory=list)

    def as_dict(self) -> dict:
        return {
            "steps": self.steps,
            "violations": self.violations,
            "total_violations": self.total_violations,
            "first_hit_ptime": self.first_hit_ptime,
        }


def run_coupled(run: CoupledRun, total_steps: int, reset_index: int = 1) -> CouplingReport:
    """Advance every population of ``run`` under one schedule for ``total_steps`` steps.

    ``first_hit_ptime`` is the first checked time at which population
    ``reset_index`` has no agent below the level cap (``None`` if never).
    """
    run.check()
    params = run.params
    stream = RandomStream(run.seed, run.substream)
    states = np.stack([p.states for p in run.populations])
    props = np.array([int(p[1]) for p in run.properties], dtype=np.int64)
    out = np.zeros((MAX_RECORDED_VIOLATIONS, 3), dtype=np.int64)
    n_out = 0
    total = 0
    reset_row = min(reset_index, len(run.populations) - 1)
    reset_step = 0 if _below_cap_count(states, reset_row, params.s) == 0 else -1
    step0 = run.populations[0].step
    done_total = 0
    while done_total < total_steps:
        buf, pos = stream.raw(3 * 64)
        chunk = min(total_steps - done_total, 1 << 20)
        done, pos, n_out, total, reset_step = _coupled_kernel(
            states, run.colors, run.neutral_color == "last_strong",
            int(params.variant), params.s, params.p, params.zeta,
            props, run.check_every, buf, pos, step0 + done_total, chunk,
            out, n_out, total, reset_row, reset_step,
        )
        stream.consumed(pos)
        done_total += done
    for r, pop in enumerate(run.populations):
        pop.states[:] = states[r]
        pop.counts = pop.histogram()
        pop.step += done_total
    violations = [
        {"step": int(s_), "property": f"P{int(q)}", "index": int(k)} for s_, q, k in out[:n_out]
    ]
    first_hit = None if reset_step < 0 else (reset_step - step0) / params.n
    return CouplingReport(done_total, violations, int(total), first_hit, run.populations)


def lemma_construction(u: Population) -> tuple[Population, Population, Population]:
    """``(u, v, w)``: v replaces baselines of u by N, w replaces non-baselines by N."""
    base = (u.states == 1) | (u.states == 2)
    v = Population.from_arrays(u.params, np.where(base, 0, u.states))
    w = Population.from_arrays(u.params, np.where(base, u.states, 0))
    return Population.from_arrays(u.params, u.states.copy()), v, w


RESET_PREDICATES = ("below_cap", "all_neutral")


def reset_experiment(n: int, s: int | None = None, variant: Variant | str = Variant.DETECTION,
                     p: float = 1.0, init: str = "all_x1", horizon_ptime: float = 100.0,
                     seed: int = 0, replication: int | None = None,
                     predicate: str = "below_cap") -> float | None:
    """Parallel time until a baseline-free population first has no agent below level ``s``.

    ``predicate="all_neutral"`` waits for every agent to be N instead. Returns
    ``None`` if the horizon expires first.
    """
    params = ProtocolParams.auto(n, variant, s=s, p=p)
    if predicate not in RESET_PREDICATES:
        raise ValueError(f"unknown reset predicate {predicate!r}")
    stream = RandomStream(seed, replication)
    pop = make_baseline_free(params, init, stream)
    if pop.baseline_counts() != (0, 0):
        raise ValueError("reset experiments start without baselines")
    levels = np.array([code_level(c) for c in range(params.n_codes)])
    if predicate == "below_cap":
        watch = levels < params.s
    else:
        watch = levels < LEVEL_INF
    horizon = math.ceil(horizon_ptime * n)
    advance(pop, horizon, stream, watch_mask=watch)
    if pop.code_counts()[watch].sum() > 0:
        return None
    return pop.step / n
