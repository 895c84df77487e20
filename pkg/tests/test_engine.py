import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from popcomp.engine import (
    ARBITRARY,
    Population,
    SwitchEvent,
    advance,
    apply_switch,
    leak_policy_apply,
    make_baseline_free,
    make_initial,
    run,
    simulate,
    step,
)
from popcomp.protocol import (
    AgentState,
    GenericLeak,
    LeakPolicy,
    ProtocolParams,
    Variant,
    counter_step,
    decode_state,
    encode_state,
    transition,
)
from popcomp.rng import RandomStream

S = AgentState.parse


def prm(n=50, variant=Variant.COMPARISON, s=8, **kw):
    return ProtocolParams(n=n, s=s, variant=variant, **kw)


def test_make_initial_all_neutral():
    pop = make_initial(prm(10), 2, 1)
    c = pop.code_counts()
    assert (c[0], c[1], c[2]) == (7, 2, 1)
    assert make_initial(prm(10), 0, 0).code_counts()[0] == 10


def test_make_initial_rejects_overfull():
    with pytest.raises(ValueError):
        make_initial(prm(10), 6, 5)


def test_make_initial_arbitrary_is_seeded():
    p = ProtocolParams.auto(10**5, Variant.COUNTER_COMPARISON)
    a = make_initial(p, 600, 300, ARBITRARY, RandomStream(7))
    b = make_initial(p, 600, 300, ARBITRARY, RandomStream(7))
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.counters, b.counters)
    assert a.baseline_counts() == (600, 300)
    assert a.counters.min() == -p.m and a.counters.max() == p.m
    c = make_initial(p, 600, 300, ARBITRARY, RandomStream(8))
    assert not np.array_equal(a.states, c.states)


def test_step_baseline_recruits_neutral():
    pop = Population.from_states(prm(2), [S("X0"), S("N")])
    rec = step(pop, RandomStream(0))
    assert sorted(x.label() for x in pop.agents()) == ["X0", "X1"]
    assert pop.step == 1
    assert not rec.is_leak


def test_step_all_neutral_is_noop():
    pop = make_initial(prm(20), 0, 0)
    stream = RandomStream(1)
    for _ in range(50):
        step(pop, stream)
    assert pop.code_counts()[0] == 20
    assert pop.step == 50


def test_step_generic_leak_rewrites_x1():
    leak = GenericLeak(0.999999, LeakPolicy.parse("X1->Y1"))
    pop = Population.from_states(prm(3, generic_leak=leak), [S("X0"), S("X1"), S("N")])
    rec = step(pop, RandomStream(0))
    assert rec.is_leak and rec.leak_agent == 1
    assert [x.label() for x in pop.agents()] == ["X0", "Y1", "N"]
    assert pop.leaks == 1 and pop.step == 1


def test_leak_policy_apply():
    stream = RandomStream(2)
    p = prm(6)
    pop = Population.from_states(p, [S(x) for x in ["X0", "Y0", "N", "X2", "Y3", "N"]])
    assert leak_policy_apply(pop, LeakPolicy.parse("X1->Y1"), stream) == -1
    assert pop.leaks == 0
    # tie between baselines: the worst case leak has no majority to attack
    assert leak_policy_apply(pop, LeakPolicy.parse("worst_case"), stream) == -1
    pop = Population.from_states(p, [S(x) for x in ["X0", "X0", "Y0", "X1", "Y1", "N"]])
    assert leak_policy_apply(pop, LeakPolicy.parse("worst_case"), stream) == 3
    assert pop.agent(3).label() == "Y1"
    for _ in range(200):
        leak_policy_apply(pop, LeakPolicy.parse("random"), stream)
        assert pop.baseline_counts() == (2, 1)
    pop.check_counts()


def test_apply_switch_bookkeeping():
    p = prm(10)
    pop = Population.from_states(p, [S(x) for x in ["X0", "X0", "X0", "Y0", "X2", "N", "N", "Y1", "N", "N"]])
    before = pop.states.copy()
    ev = apply_switch(pop, 1, 3, RandomStream(0))
    assert pop.baseline_counts() == (1, 3)
    assert (ev["old_x0"], ev["old_y0"]) == (3, 1)
    former_x = np.flatnonzero(before == 1)
    assert np.count_nonzero(pop.states[former_x] == 0) == 2
    recruited = np.flatnonzero((before != 1) & (before != 2) & (pop.states == 2))
    assert recruited.size == 2
    pop.check_counts()


def test_apply_switch_identity_and_errors():
    p = prm(10)
    pop = make_initial(p, 3, 2)
    snapshot = pop.states.copy()
    apply_switch(pop, 3, 2, RandomStream(0))
    assert np.array_equal(pop.states, snapshot)
    with pytest.raises(ValueError):
        apply_switch(pop, 6, 5, RandomStream(0))


def test_apply_switch_preserves_counters():
    p = prm(6, Variant.COUNTER_COMPARISON, m=2)
    pop = Population.from_states(p, [S(x) for x in ["X0@2", "X0@-1", "N@1", "N@0", "N@0", "N@0"]])
    apply_switch(pop, 0, 1, RandomStream(3))
    assert sorted(pop.counters[:2].tolist()) == [-1, 2]
    pop.check_counts()


@pytest.mark.parametrize("variant", list(Variant))
def test_counts_track_histogram(variant):
    p = prm(200, variant, s=6, m=2, p=0.5, zeta=0.01,
            generic_leak=None if variant.has_counter else GenericLeak(0.01, LeakPolicy.parse("random")))
    stream = RandomStream(11)
    pop = make_initial(p, 10, 5, ARBITRARY, stream)
    for _ in range(20):
        advance(pop, 500, stream)
        pop.check_counts()
        assert pop.baseline_counts() == (10, 5)
    assert pop.step == 10_000


def _reference_run(p, states, counters, seed, steps):
    """Replay the scheduler's draw protocol in plain Python on AgentState objects."""
    stream = RandomStream(seed)
    n = p.n
    agents = [decode_state(c, int(k) if p.variant.has_counter else None) for c, k in zip(states, counters)]
    leak = p.generic_leak
    for _ in range(steps):
        if leak is not None and leak.rate > 0:
            if stream.uniform() < leak.rate:
                pol = leak.policy
                assert pol.kind == "fixed"
                idx = [k for k, a in enumerate(agents) if encode_state(a) == pol.source]
                if idx:
                    k = idx[int(stream.uniform() * len(idx))]
                    agents[k] = decode_state(pol.target, agents[k].counter)
                continue
        i = int(stream.uniform() * n)
        j = int(stream.uniform() * (n - 1))
        if j >= i:
            j += 1
        u = stream.uniform() if p.variant.probabilistic else 0.0
        agents[i], agents[j] = transition(agents[i], agents[j], p, u)
    return agents


@pytest.mark.parametrize(
    "variant, extra",
    [
        (Variant.COMPARISON, {}),
        (Variant.COUNTER_COMPARISON, {"m": 2}),
        (Variant.COIN_DETECTION, {"p": 0.3}),
        (Variant.LEAK_FP_DETECTION, {"zeta": 0.05}),
        (Variant.LEAK_FN_DETECTION, {"zeta": 0.05}),
        (Variant.COMPARISON, {"generic_leak": GenericLeak(0.05, LeakPolicy.parse("X1->Y1"))}),
    ],
)
def test_kernel_matches_reference_replay(variant, extra):
    p = prm(30, variant, s=5, **extra)
    pop = make_initial(p, 3, 2, ARBITRARY, RandomStream(5, 1))
    expected = _reference_run(p, pop.states.copy(), pop.counters.copy(), 42, 3000)
    advance(pop, 3000, RandomStream(42))
    assert pop.agents() == expected


def test_pair_selection_is_uniform():
    # chi-squared over the 20 ordered pairs of 5 agents
    pop = make_initial(prm(5), 0, 0)
    stream = RandomStream(123)
    counts = np.zeros((5, 5))
    trials = 40_000
    for _ in range(trials):
        rec = step(pop, stream)
        counts[rec.first, rec.second] += 1
    assert np.trace(counts) == 0
    expected = trials / 20
    off = counts[~np.eye(5, dtype=bool)]
    chi2 = ((off - expected) ** 2 / expected).sum()
    assert chi2 < 43.82  # 0.999 quantile of chi-squared with 19 degrees of freedom


def test_run_zero_steps_single_snapshot():
    pop = make_initial(prm(10), 2, 1)
    tr = run(pop, 0, RandomStream(0))
    assert len(tr) == 1 and tr.steps == [0]


def test_run_snapshots_and_switch_timing():
    n = 100
    pop = make_initial(prm(n), 6, 3)
    tr = run(pop, 10 * n, RandomStream(4), cadence=n, switches=[SwitchEvent(2.5, 3, 6)])
    assert tr.steps == [k * n for k in range(11)]
    switches = [e for e in tr.events if e["kind"] == "switch"]
    assert len(switches) == 1 and switches[0]["step"] == 250
    assert pop.baseline_counts() == (3, 6)
    assert tr.x_levels[2, 0] == 6 and tr.x_levels[3, 0] == 3
    assert np.all(tr.slot_matrix.sum(axis=1) == n)


def test_run_irregular_cadence_records_final_step():
    pop = make_initial(prm(10), 1, 1)
    tr = run(pop, 25, RandomStream(0), cadence=10)
    assert tr.steps == [0, 10, 20, 25]


def test_trace_csv_format():
    p = prm(100, s=3)
    _, tr = simulate(p, 5, 3, 2.0, seed=1, snapshot_every_ptime=0.5)
    text = tr.csv_text()
    lines = text.split("\n")
    assert lines[0] == "step,ptime,x0,y0,neutral,x1,x2,x3,y1,y2,y3,out_x,out_y,out_undecided,leaks"
    assert lines[1].startswith("0,0.000,5,3,92,")
    assert lines[2].startswith("50,0.500,")
    assert text.endswith("\n") and "\r" not in text
    for line in lines[1:-1]:
        vals = [int(v) for k, v in enumerate(line.split(",")) if k != 1]
        assert sum(vals[1:10]) == 100
        assert sum(vals[10:13]) == 100


def test_runs_are_bitwise_reproducible():
    p = ProtocolParams.auto(2000, Variant.COIN_DETECTION, p=0.5)
    a = simulate(p, 20, 10, 20, seed=9, replication=3)[1].csv_text()
    b = simulate(p, 20, 10, 20, seed=9, replication=3)[1].csv_text()
    c = simulate(p, 20, 10, 20, seed=9, replication=4)[1].csv_text()
    assert a == b and a != c


def test_advance_in_pieces_equals_one_call():
    p = prm(300, s=10)
    a = make_initial(p, 5, 2)
    b = make_initial(p, 5, 2)
    sa, sb = RandomStream(8), RandomStream(8)
    advance(a, 100_000, sa)
    for _ in range(100):
        advance(b, 1000, sb)
    assert np.array_equal(a.states, b.states)


def test_counter_hits_are_recorded():
    p = ProtocolParams(n=500, s=12, variant=Variant.COUNTER_COMPARISON, m=3)
    pop = make_initial(p, 40, 5)
    advance(pop, 20_000, RandomStream(3))
    at_top = pop.counters == 3
    assert np.all(pop.hit_pos[at_top] > 0)
    assert np.all(pop.hit_pos[pop.hit_pos >= 0] <= pop.step)
    assert np.all(pop.hit_neg[pop.hit_neg >= 0] <= pop.step)


def test_watch_mask_stops_at_first_hit():
    p = prm(200, Variant.DETECTION, s=6)
    pop = make_baseline_free(p, "all_x1")
    watch = np.zeros(p.n_codes, dtype=bool)
    watch[1:] = True
    advance(pop, 10**6, RandomStream(0), watch_mask=watch)
    assert pop.code_counts()[0] == 200
    # one step earlier some agent was still strong
    replay = make_baseline_free(p, "all_x1")
    advance(replay, pop.step - 1, RandomStream(0))
    assert replay.code_counts()[0] < 200


@given(seed=st.integers(0, 2**32), x0=st.integers(0, 20), y0=st.integers(0, 20),
       variant=st.sampled_from(list(Variant)))
def test_conservation_property(seed, x0, y0, variant):
    p = prm(60, variant, s=5, m=2, p=0.5, zeta=0.02)
    stream = RandomStream(seed)
    pop = make_initial(p, x0, y0, ARBITRARY, stream)
    advance(pop, 2000, stream)
    pop.check_counts()
    assert pop.baseline_counts() == (x0, y0)


def test_counter_step_matches_counter_rule():
    for own in range(-2, 3):
        for code in range(7):
            expected = own if code == 0 else max(-2, min(2, own + (1 if (code - 1) % 2 == 0 else -1)))
            assert counter_step(own, code, 2) == expected


def test_levels_helper():
    pop = Population.from_states(prm(3), [S("X0"), S("Y4"), S("N")])
    lv = pop.levels()
    assert lv[0] == 0 and lv[1] == 4 and math.isinf(lv[2])
