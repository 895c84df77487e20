import numpy as np
import pytest

from popcomp.coupling import (
    CoupledRun,
    CouplingPreconditionError,
    lemma_construction,
    reset_experiment,
    run_coupled,
)
from popcomp.engine import Population, advance, make_baseline_free, make_initial
from popcomp.protocol import AgentState, ProtocolParams, Variant, encode_state
from popcomp.rng import RandomStream

S = AgentState.parse


def _codes(labels):
    return np.array([encode_state(S(x)) for x in labels], np.uint8)


def _pop(params, labels):
    return Population.from_arrays(params, _codes(labels))


@pytest.mark.parametrize("variant", [Variant.COMPARISON, Variant.DETECTION, Variant.COIN_DETECTION])
def test_single_population_matches_engine(variant):
    params = ProtocolParams.auto(500, variant, p=0.5)
    base = make_initial(params, 6, 3, "arbitrary", RandomStream(4, 0))
    alone = base.copy()
    advance(alone, 20_000, RandomStream(11, 2))
    coupled = base.copy()
    run_coupled(CoupledRun([coupled], seed=11, substream=2), 20_000)
    assert np.array_equal(alone.states, coupled.states)
    assert np.array_equal(alone.counts, coupled.counts)


def test_identical_copies_stay_identical():
    params = ProtocolParams.auto(300, Variant.COMPARISON)
    u = make_initial(params, 5, 4, "arbitrary", RandomStream(1, 0))
    run = CoupledRun([u.copy(), u.copy(), u.copy()], seed=3, properties=("P1", "P2", "P3"))
    report = run_coupled(run, 30_000)
    assert report.total_violations == 0
    assert report.violations == []


@pytest.mark.parametrize("variant", [Variant.COMPARISON, Variant.DETECTION])
def test_all_neutral_upper_population_dominates(variant):
    # v all N sits at level infinity, so u = w satisfies P1 and P2 forever
    params = ProtocolParams.auto(400, variant)
    u = make_initial(params, 8, 2, "arbitrary", RandomStream(2, 0))
    v = make_initial(params, 0, 0)
    run = CoupledRun([u.copy(), v, u.copy()], seed=5, properties=("P1", "P2"))
    assert run_coupled(run, 40_000).total_violations == 0


@pytest.mark.parametrize("variant", [Variant.COMPARISON, Variant.DETECTION])
def test_lemma_construction_keeps_min_relation(variant):
    params = ProtocolParams.auto(1000, variant, p=0.5)
    u = make_initial(params, 6, 3, "arbitrary", RandomStream(7, 0))
    run = CoupledRun(list(lemma_construction(u)), seed=9, properties=("P1", "P2"))
    report = run_coupled(run, 100_000)
    assert report.total_violations == 0


def test_coin_tie_failure_breaks_min_relation():
    # a failed coin at equal levels advances the second agent only, so u ends
    # at (2, 3) while min(v, w) stays at level 2 for both agents
    params = ProtocolParams(n=2, s=10, variant=Variant.COIN_DETECTION, p=1e-9)
    u = _pop(params, ["X2", "X2"])
    v = _pop(params, ["X2", "X5"])
    w = _pop(params, ["X4", "X2"])
    report = run_coupled(CoupledRun([u, v, w], seed=0, properties=("P2",)), 1)
    assert report.total_violations == 1
    assert sorted(a.level for a in u.agents()) == [2, 3]


def test_lemma_construction_split():
    params = ProtocolParams(n=6, s=5)
    u, v, w = lemma_construction(_pop(params, ["X0", "Y0", "X3", "Y1", "N", "X5"]))
    assert [a.label() for a in v.agents()] == ["N", "N", "X3", "Y1", "N", "X5"]
    assert [a.label() for a in w.agents()] == ["X0", "Y0", "N", "N", "N", "N"]
    assert [a.label() for a in u.agents()] == ["X0", "Y0", "X3", "Y1", "N", "X5"]


def test_precondition_failure_names_index():
    params = ProtocolParams(n=4, s=5)
    u = _pop(params, ["X1", "X2", "Y3", "N"])
    v = _pop(params, ["X1", "X2", "Y2", "N"])
    w = _pop(params, ["N", "N", "N", "N"])
    run = CoupledRun([u, v, w], seed=0, properties=("P1",))
    with pytest.raises(CouplingPreconditionError) as err:
        run_coupled(run, 10)
    assert err.value.index == 2 and err.value.property == "P1"


def test_tie_breaking_breaks_color_agreement():
    # u = (Y5, X5), v = (Y5, Y7), w = (N, X5) satisfies P3. Whichever agent
    # starts the interaction, u ends with one color at level 6 while v or w
    # ends with the other, so P3 fails after a single step.
    params = ProtocolParams(n=2, s=10)
    u = _pop(params, ["Y5", "X5"])
    v = _pop(params, ["Y5", "Y7"])
    w = _pop(params, ["N", "X5"])
    run = CoupledRun([u, v, w], seed=0, properties=("P2", "P3"))
    run.check()
    report = run_coupled(run, 1)
    assert {x["property"] for x in report.violations} == {"P3"}
    assert report.total_violations == 2
    assert all(a.level == 6 for pop in (u, v, w) for a in pop.agents())


def test_rejects_counter_and_bad_shapes():
    params = ProtocolParams.auto(50, Variant.COUNTER_COMPARISON)
    with pytest.raises(ValueError):
        CoupledRun([make_initial(params, 1, 1)], seed=0)
    plain = ProtocolParams.auto(50, Variant.COMPARISON)
    with pytest.raises(ValueError):
        CoupledRun([make_initial(plain, 1, 1)] * 2, seed=0, properties=("P1",))
    with pytest.raises(ValueError):
        CoupledRun([make_initial(plain, 1, 1)], seed=0, neutral_color="rainbow")


def test_reset_from_all_neutral_is_immediate():
    assert reset_experiment(500, init="all_neutral", seed=1) == 0.0
    assert reset_experiment(500, init="all_neutral", predicate="all_neutral", seed=1) == 0.0


@pytest.mark.parametrize("variant, p", [(Variant.DETECTION, 1.0), (Variant.COMPARISON, 1.0),
                                        (Variant.COIN_DETECTION, 0.5)])
def test_reset_from_baseline_free_start(variant, p):
    t = reset_experiment(2000, variant=variant, p=p, init="all_x1", horizon_ptime=500, seed=3)
    assert t is not None and 0 < t < 500
    t2 = reset_experiment(2000, variant=variant, p=p, init="arbitrary", horizon_ptime=500,
                          seed=3, predicate="all_neutral")
    assert t2 is not None and t2 > 0


def test_reset_reports_first_hit_in_coupled_run():
    params = ProtocolParams.auto(500, Variant.DETECTION)
    u = make_baseline_free(params, "all_x1")
    v = make_baseline_free(params, "all_x1")
    w = make_initial(params, 0, 0)
    report = run_coupled(CoupledRun([u, v, w], seed=2, properties=("P2",)), 100 * 500)
    assert report.total_violations == 0
    assert report.first_hit_ptime is not None and report.first_hit_ptime > 0
