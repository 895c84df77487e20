"""Literal rule tables, built straight from the published rule lists.

This module deliberately shares nothing with the arithmetic in
:mod:`popcomp.protocol` beyond the :class:`AgentState` value type; it exists
so the fast transition function can be checked pair by pair against an
independent encoding.
"""

from __future__ import annotations

from collections import defaultdict

from .protocol import AgentState, Color, ProtocolParams, Variant, transition

Pair = tuple[AgentState, AgentState]
Distribution = dict[Pair, float]

MAX_ORACLE_S = 8
MAX_ORACLE_M = 3


def _X(i: int) -> AgentState:
    return AgentState.parse(f"X{i}")


def _Y(i: int) -> AgentState:
    return AgentState.parse(f"Y{i}")


_N = AgentState.neutral()
KEEP = object()  # outcome slot: the agent keeps its literal input state


def _comparison_rules(s: int) -> dict[Pair, Distribution]:
    rules: dict[Pair, Distribution] = {}

    def det(a, b, c, d):
        rules.setdefault((a, b), {(c, d): 1.0})

    # baseline catalysis, 1 <= i <= s
    for i in range(1, s + 1):
        det(_X(0), _X(i), _X(0), _X(1))
        det(_X(0), _Y(i), _X(0), _X(1))
        det(_Y(0), _X(i), _Y(0), _Y(1))
        det(_Y(0), _Y(i), _Y(0), _Y(1))
    # 1 <= i < s
    for i in range(1, s):
        det(_X(i), _N, _X(i + 1), _X(i + 1))
        det(_Y(i), _N, _Y(i + 1), _Y(i + 1))
    det(_X(s), _N, _N, _N)
    det(_Y(s), _N, _N, _N)
    # 1 <= i <= j <= s, i != s
    for i in range(1, s):
        for j in range(i, s + 1):
            det(_X(i), _X(j), _X(i + 1), _X(i + 1))
            det(_Y(i), _Y(j), _Y(i + 1), _Y(i + 1))
            det(_X(i), _Y(j), _X(i + 1), _X(i + 1))
            det(_Y(i), _X(j), _Y(i + 1), _Y(i + 1))
    det(_X(s), _X(s), _N, _N)
    det(_X(s), _Y(s), _N, _N)
    det(_Y(s), _Y(s), _N, _N)
    det(_Y(s), _X(s), _N, _N)
    # a baseline also recruits a neutral partner
    det(_X(0), _N, _X(0), _X(1))
    det(_Y(0), _N, _Y(0), _Y(1))
    return rules


def _detection_rules(s: int, variant: Variant, p: float, zeta: float) -> dict[Pair, Distribution]:
    U = _X
    rules: dict[Pair, Distribution] = {}

    def put(a, b, dist):
        dist = {k: v for k, v in dist.items() if v > 0.0}
        rules.setdefault((a, b), dist)

    keep = 1.0 - zeta
    for i in list(range(1, s + 1)) + [None]:
        partner = _N if i is None else U(i)
        if variant is Variant.LEAK_FN_DETECTION:
            put(U(0), partner, _merge({(KEEP, U(1)): keep, (KEEP, _N): zeta}))
        else:
            put(U(0), partner, {(KEEP, U(1)): 1.0})

    for i in range(1, s):
        partners = [_N] + [U(j) for j in range(i, s + 1)]
        for partner in partners:
            up = (U(i + 1), U(i + 1))
            if variant is Variant.COIN_DETECTION:
                put(U(i), partner, _merge({up: p, (KEEP, U(i + 1)): 1.0 - p}))
            elif variant is Variant.LEAK_FP_DETECTION:
                put(U(i), partner, _merge({up: keep, (U(1), U(1)): zeta}))
            elif variant is Variant.LEAK_FN_DETECTION:
                put(U(i), partner, _merge({up: keep, (_N, _N): zeta}))
            else:
                put(U(i), partner, {up: 1.0})

    for partner in (_N, U(s)):
        if variant is Variant.LEAK_FP_DETECTION:
            put(U(s), partner, _merge({(_N, _N): keep, (U(1), U(1)): zeta}))
        else:
            put(U(s), partner, {(_N, _N): 1.0})

    if variant is Variant.LEAK_FP_DETECTION:
        put(_N, _N, _merge({(KEEP, KEEP): keep, (U(1), U(1)): zeta}))
    return rules


def _merge(dist: Distribution) -> Distribution:
    out: Distribution = defaultdict(float)
    for k, v in dist.items():
        if v > 0.0:
            out[k] += v
    return dict(out)


def _as_u(state: AgentState) -> AgentState:
    if state.role.name == "NEUTRAL":
        return _N
    return _X(int(state.level))


def _swap(dist: Distribution) -> Distribution:
    return {(d, c): w for (c, d), w in dist.items()}


def _base_distribution(rules, a: AgentState, b: AgentState, merged: bool) -> Distribution:
    # detection tables are written over U states; either color reads as U
    ka, kb = (_as_u(a), _as_u(b)) if merged else (a, b)
    dist = rules.get((ka, kb))
    if dist is None:
        # symmetric closure for pairs listed only in the other order
        dist = rules.get((kb, ka))
        dist = None if dist is None else _swap(dist)
    if dist is None:
        return {(a, b): 1.0}
    out: Distribution = defaultdict(float)
    for (c, d), w in dist.items():
        out[(a if c is KEEP else c, b if d is KEEP else d)] += w
    return dict(out)


def rule_table_oracle(params: ProtocolParams) -> dict[Pair, Distribution]:
    """Outcome distribution for every ordered state pair under ``params``.

    Counter values (when enabled) follow the literal counter rule: +1 against
    an X-colored partner, -1 against a Y-colored one, unchanged against N,
    clamped to ``[-m, m]``.
    """
    if params.s > MAX_ORACLE_S or (params.variant.has_counter and params.m > MAX_ORACLE_M):
        raise ValueError("rule table oracle limited to s <= 8 and m <= 3")
    v = params.variant
    s = params.s
    if v in (Variant.COMPARISON, Variant.COUNTER_COMPARISON):
        rules = _comparison_rules(s)
        merged = False
    else:
        rules = _detection_rules(s, v, params.p, params.zeta)
        merged = True

    levels = [AgentState.neutral()] + [
        AgentState.parse(f"{c}{i}") for i in range(0, s + 1) for c in "XY"
    ]
    table: dict[Pair, Distribution] = {}
    if not v.has_counter:
        for a in levels:
            for b in levels:
                table[(a, b)] = _base_distribution(rules, a, b, merged)
        return table

    m = params.m
    for a in levels:
        for b in levels:
            base = _base_distribution(rules, a, b, merged)
            for ca in range(-m, m + 1):
                for cb in range(-m, m + 1):
                    na = _literal_counter(ca, b, m)
                    nb = _literal_counter(cb, a, m)
                    table[(a.with_counter(ca), b.with_counter(cb))] = {
                        (c.with_counter(na), d.with_counter(nb)): w for (c, d), w in base.items()
                    }
    return table


def _literal_counter(own: int, partner: AgentState, m: int) -> int:
    if partner.role.name == "NEUTRAL":
        return own
    step = 1 if partner.color == Color.X else -1
    return max(-m, min(m, own + step))


def transition_distribution(a: AgentState, b: AgentState, params: ProtocolParams) -> Distribution:
    """Outcome distribution of :func:`transition`, read off at one draw per branch."""
    v = params.variant
    if not v.probabilistic:
        return {transition(a, b, params, 0.5): 1.0}
    t = params.p if v is Variant.COIN_DETECTION else params.zeta
    out: Distribution = defaultdict(float)
    if t > 0.0:
        out[transition(a, b, params, t / 2)] += t
    if t < 1.0:
        out[transition(a, b, params, (1.0 + t) / 2)] += 1.0 - t
    return dict(out)
