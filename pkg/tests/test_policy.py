from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from amarl.checker import check_chain
from amarl.game import MarkovGame, induce_chain, load_game
from amarl.policy import (AbstractJointPolicy, ConstraintError, ConstraintSet, PolicyEvaluation,
                          amg_alphabet, evaluate_all, pareto_filter, read_evaluations,
                          sample_policies, select, verify_policy, write_evaluations)
from amarl.quotient import build_amg, quotient

FIX = Path(__file__).parents[1] / "src" / "amarl" / "fixtures"


@pytest.fixture(scope="module")
def fig3():
    g = load_game(FIX / "fig3_left.json")
    part = quotient(g)
    return build_amg(g, part, "safe"), build_amg(g, part, "optimal")


def _block(amg, label):
    return amg.game.labels.index(frozenset({label}))


def _option_to(amg, src, dst):
    return next(o.name for o in amg.options[src] if dst in o.support())


def test_degenerate_space_single_policy():
    g = MarkovGame.from_rows(1, ["s"], [["idle"]], [(0, (0,), {0: 1.0}, None, None)], [set()])
    assert len(sample_policies(g, 5, seed=1)) == 1


def test_golden_policy_space(fig3):
    safe, _ = fig3
    a = _block(safe, "a")
    pols = sample_policies(safe, 200, seed=0)
    choices = {p.choice[a] for p in pols}
    assert choices == set(safe.option_names(a))
    assert len(pols) == 2
    assert sample_policies(safe, 200, seed=0) == pols


def test_verify_golden(fig3):
    safe, opt = fig3
    a, b = _block(safe, "a"), _block(safe, "b")
    go = _option_to(safe, a, b)
    stay = next(n for n in safe.option_names(a) if n != go)
    cs = ConstraintSet.parse("optimality P>=0.5 [ F b ]\nsafety P<0.15 [ F c ]", amg_alphabet(safe))
    go_pol = AbstractJointPolicy({a: go, b: "o0", _block(safe, "c"): "o0"})
    ev = verify_policy(go_pol, safe, opt, cs)
    values = {r["property"]: (r["value"], r["satisfied"]) for r in ev.results}
    assert values["P>=0.5 [ F b ]"] == (0.7, True)
    assert values["P<0.15 [ F c ]"] == (pytest.approx(0.3), False)
    assert not ev.safe and not ev.admissible
    ev = verify_policy(AbstractJointPolicy({a: stay}), safe, opt, cs)
    assert ev.safe and ev.results[1]["value"] == 0.0


def test_unknown_atoms_rejected(fig3):
    safe, _ = fig3
    with pytest.raises(ConstraintError):
        ConstraintSet.parse("safety P<0.1 [ F zzz ]", amg_alphabet(safe))


def test_constraint_file_errors():
    with pytest.raises(ConstraintError):
        ConstraintSet.parse("P<0.1 [ F a ]")
    with pytest.raises(ConstraintError):
        ConstraintSet.parse("safety P<0.1 [ X a ]")
    with pytest.raises(ConstraintError):
        ConstraintSet.parse("metric P<0.1 [ F a ]")
    with pytest.raises(ConstraintError):
        ConstraintSet.parse("optimality P=? [ F a ]")


def test_metrics_default_to_optimality_queries():
    cs = ConstraintSet.parse("optimality P>=0.8 [ F a ]\noptimality P<0.2 [ F b ]")
    assert [m.sense for m in cs.metrics] == ["max", "min"]
    assert all(m.formula.op is None for m in cs.metrics)


def _ev(pid, metrics, safe=True, admissible=True, senses=None):
    return PolicyEvaluation(AbstractJointPolicy({}, 0, pid), [], list(metrics),
                            senses or ["max"] * len(metrics), safe, admissible)


def test_pareto_examples():
    evs = [_ev(0, (0.9, 7.0)), _ev(1, (0.8, 8.0)), _ev(2, (0.7, 6.0))]
    assert [e.id for e in pareto_filter(evs)] == ["0:0", "0:1"]
    assert [e.id for e in pareto_filter(evs[:1])] == ["0:0"]
    tie = [_ev(0, (0.5, 1.0)), _ev(1, (0.5, 1.0))]
    assert len(pareto_filter(tie)) == 2
    assert pareto_filter([]) == []
    assert pareto_filter([_ev(0, (1.0,), safe=False)]) == []


def test_upper_bounds_rank_negated_and_infinity_worst():
    evs = [_ev(0, (0.3,), senses=["min"]), _ev(1, (0.1,), senses=["min"])]
    assert [e.id for e in pareto_filter(evs)] == ["0:1"]
    evs = [_ev(0, (float("inf"),)), _ev(1, (1.0,))]
    assert [e.id for e in pareto_filter(evs)] == ["0:1"]


def test_select_prefers_admissible_then_lexicographic():
    evs = [_ev(0, (0.9, 1.0), admissible=False), _ev(1, (0.8, 2.0)), _ev(2, (0.8, 3.0))]
    assert select(evs).id == "0:2"
    assert select(evs, order=[1, 0]).id == "0:2"
    assert select([_ev(3, (0.5,)), _ev(1, (0.5,))]).id == "0:1"
    assert select([]) is None


metric_vectors = st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 1.0]),
                                    st.sampled_from([0.0, 1.0, 2.0]), st.booleans()),
                          min_size=0, max_size=12)


@given(metric_vectors, st.randoms())
def test_pareto_idempotent_and_order_independent(rows, rnd):
    evs = [_ev(i, (a, b), safe=s) for i, (a, b, s) in enumerate(rows)]
    front = pareto_filter(evs)
    assert pareto_filter(front) == front
    shuffled = list(evs)
    rnd.shuffle(shuffled)
    assert [e.id for e in pareto_filter(shuffled)] == [e.id for e in front]
    assert all(e.safe for e in front)


def test_mini_pipeline_recheck(tmp_path):
    from amarl import gfc
    spec = gfc.GridSpec.load("gfc-mini")
    safe, opt = gfc.direct_amg(spec)
    cs = ConstraintSet.load(FIX / "gfc-mini.props", amg_alphabet(safe))
    evs = evaluate_all(sample_policies(safe, 200, seed=7), safe, opt, cs)
    front = pareto_filter(evs)
    assert front
    for e in front:
        chain = induce_chain(safe, e.policy)
        for c in cs.safety:
            assert check_chain(chain, c.formula).holds
    chosen = select(front)
    chain = induce_chain(opt, chosen.policy)
    assert [check_chain(chain, m.formula).value for m in cs.metrics] == chosen.metrics
    write_evaluations(tmp_path / "e.jsonl", evs, safe)
    back = read_evaluations(tmp_path / "e.jsonl", safe)
    assert [b.policy.choice for b in back] == [e.policy.choice for e in evs]
    assert [b.signed() for b in back] == [e.signed() for e in evs]
