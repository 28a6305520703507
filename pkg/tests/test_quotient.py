import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amarl.checker import extremal_prob
from amarl.game import MarkovGame, load_game
from amarl.logic import parse_path
from amarl.quotient import (DegenerateSplitError, Partition, SplitterCertificate, amg_from_dict,
                            amg_to_dict, bisimulation_classes, build_amg,
                            find_splitter, initial_partition, is_stable, match_set, quotient,
                            refine, split)
from randmodels import random_stutter_game

FIX = Path(__file__).parents[1] / "src" / "amarl" / "fixtures"

WEAK_SUITE = ["F p", "F q", "F r", "p U q", "!r U q", "(p | q) U r", "F (p & q)",
              "!p U (q & !r)", "true U (r & !q)", "q U (p | r)", "G !r", "G (p | q)"]


@pytest.fixture
def left():
    return load_game(FIX / "fig3_left.json")


def named(game, part):
    return {frozenset(game.state_ids[s] for s in b) for b in part.blocks}


def test_initial_partition_golden(left):
    assert named(left, initial_partition(left)) == {frozenset({"v0", "v1", "v2"}),
                                                    frozenset({"v3"}), frozenset({"v4"})}


def _game(labels, rows):
    n = len(labels)
    return MarkovGame.from_rows(1, [f"s{i}" for i in range(n)], [["idle", "go"]], rows, labels,
                                global_atoms={"p", "b"})


def test_initial_partition_extremes():
    same = _game([{"p"}] * 3, [(s, (0,), {s: 1.0}, None, None) for s in range(3)])
    assert len(initial_partition(same)) == 1
    distinct = _game([set(), {"p"}, {"b"}], [(s, (0,), {s: 1.0}, None, None) for s in range(3)])
    assert len(initial_partition(distinct)) == 3
    assert len(quotient(distinct)) == 3


def test_match_set_golden(left):
    part = initial_partition(left)
    a = part.block_of[0]
    assert match_set(left, part, a, {a: 1.0}) == frozenset({0, 1, 2})
    b3, b4 = part.block_of[left.state_index("v3")], part.block_of[left.state_index("v4")]
    assert match_set(left, part, a, {b3: 0.7, b4: 0.3}) == frozenset({0, 1, 2})


def test_golden_left_stable(left):
    assert find_splitter(left, initial_partition(left)) is None


def test_splitter_for_unmatched_state():
    # u reaches b surely, w cannot reach b at all
    g = _game([{"p"}, {"p"}, {"b"}], [(0, (1,), {2: 1.0}, None, None), (1, (0,), {1: 1.0}, None, None),
                                      (2, (0,), {2: 1.0}, None, None)])
    cert = find_splitter(g, initial_partition(g))
    assert cert is not None and cert.sat == frozenset({0})
    assert named(g, quotient(g)) == {frozenset({"s0"}), frozenset({"s1"}), frozenset({"s2"})}


def test_singleton_partition_has_no_splitter(left):
    part = Partition.from_blocks([[s] for s in range(left.n_states)], left.n_states)
    assert find_splitter(left, part) is None


def test_split_examples():
    cert = SplitterCertificate(0, 0, None, (), frozenset({"u"}))
    assert split({"u", "w"}, cert) == (frozenset({"u"}), frozenset({"w"}))
    cert = SplitterCertificate(0, 0, None, (), frozenset({"a", "b"}))
    assert split({"a", "b", "c"}, cert) == (frozenset({"a", "b"}), frozenset({"c"}))
    with pytest.raises(DegenerateSplitError):
        split({"u"}, SplitterCertificate(0, 0, None, (), frozenset({"u"})))


def test_refine_adds_exactly_one_block():
    g = random_stutter_game(3)
    part = initial_partition(g)
    cert = find_splitter(g, part)
    if cert is None:
        pytest.skip("label partition already stable")
    finer = refine(part, cert)
    assert len(finer) == len(part) + 1
    untouched = [b for i, b in enumerate(part.blocks) if i != cert.block]
    assert all(b in finer.blocks for b in untouched)
    # the certificate's target no longer separates either half: all of one, none of the other
    inside, outside = finer.blocks[cert.block], finer.blocks[-1]
    assert match_set(g, part, inside, cert.target) == inside
    assert match_set(g, part, outside, cert.target) == frozenset()


def test_golden_quotient_and_cross_relation(left):
    right = load_game(FIX / "fig3_right.json")
    t0 = time.perf_counter()
    part = quotient(left)
    assert named(left, part) == {frozenset({"v0", "v1", "v2"}), frozenset({"v3"}), frozenset({"v4"})}
    classes = {frozenset(c) for c in bisimulation_classes(left, right)}
    assert classes == {frozenset({"v0", "v1", "v2", "s0"}), frozenset({"v3", "s1"}),
                       frozenset({"v4", "s2"})}
    assert time.perf_counter() - t0 < 1.0


def test_golden_amg_is_right_model(left):
    right = load_game(FIX / "fig3_right.json")
    amg = build_amg(left, quotient(left))
    by_label = {right.labels[s]: s for s in range(right.n_states)}
    rename = [by_label[l] for l in amg.game.labels]
    for b in range(amg.n_states):
        got = sorted(tuple(sorted((rename[t], p) for t, p in o.distribution)) for o in amg.options[b])
        s = rename[b]
        want = sorted(tuple(sorted((int(t), float(p)) for t, p in zip(*right.entries(r))))
                      for r in right.rows_of(s))
        assert got == want
    a = amg.game.labels.index(frozenset({"a"}))
    dists = {o.distribution for o in amg.options[a]}
    assert ((a, 1.0),) in dists
    assert any(dict(d).get(amg.game.labels.index(frozenset({"b"}))) == 0.7 for d in dists)


def test_single_block_amg():
    g = _game([{"p"}], [(0, (0,), {0: 1.0}, None, None)])
    safe, opt = (build_amg(g, quotient(g), m) for m in ("safe", "optimal"))
    assert safe.n_states == 1 and safe.options[0][0].distribution == ((0, 1.0),)
    assert opt.options[0][0].distribution == safe.options[0][0].distribution


def test_uniform_weights_average_rewards():
    rows = [(0, (1,), {2: 1.0}, {2: (1.0,)}, None), (1, (1,), {2: 1.0}, {2: (3.0,)}, None),
            (0, (0,), {1: 1.0}, None, None), (1, (0,), {0: 1.0}, None, None),
            (2, (0,), {2: 1.0}, None, None)]
    g = _game([{"p"}, {"p"}, {"b"}], rows)
    amg = build_amg(g, quotient(g))
    assert np.allclose(amg.weights, [0.5, 0.5, 1.0])
    a = amg.block_of[0]
    exit_opt = next(o for o in amg.options[a] if len(o.support() - {a}))
    assert exit_opt.rewards[int(amg.block_of[2])] == pytest.approx(2.0)


def test_amg_round_trip(left):
    amg = build_amg(left, quotient(left))
    back = amg_from_dict(amg_to_dict(amg, left))
    assert back.mode == amg.mode
    assert [[o.distribution for o in opts] for opts in back.options] == \
           [[o.distribution for o in opts] for opts in amg.options]
    assert np.array_equal(back.block_of, amg.block_of)


# --- properties over random games -----------------------------------------------

seeds = st.integers(0, 10 ** 6)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_quotient_is_stable_and_label_coherent(seed):
    g = random_stutter_game(seed)
    trace = []
    part = quotient(g, trace)
    assert is_stable(g, part)
    assert all(len({g.labels[s] for s in b}) == 1 for b in part.blocks)
    assert len(trace) <= g.n_states - len(initial_partition(g))
    assert len(part) == len(initial_partition(g)) + len(trace)
    assert sorted(s for b in part.blocks for s in b) == list(range(g.n_states))


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_safe_and_optimal_share_everything_but_probabilities(seed):
    g = random_stutter_game(seed)
    part = quotient(g)
    safe, opt = build_amg(g, part, "safe"), build_amg(g, part, "optimal")
    assert safe.game.labels == opt.game.labels
    assert [o.name for os in safe.options for o in os] == [o.name for os in opt.options for o in os]
    assert [o.rewards for os in safe.options for o in os] == [o.rewards for os in opt.options for o in os]
    for r in range(safe.game.n_rows):
        assert abs(safe.game.entries(r)[1].sum() - 1.0) <= 1e-12


def test_preservation_suite():
    """Extremal values of weak formulas agree on every game and its abstraction."""
    t0 = time.perf_counter()
    merged = 0
    for seed in range(25):
        g = random_stutter_game(seed)
        part = quotient(g)
        merged += len(part) < g.n_states
        amg = build_amg(g, part)
        for f in WEAK_SUITE:
            path = parse_path(f)
            for objective in ("min", "max"):
                concrete = extremal_prob(g, path, objective)
                abstract = extremal_prob(amg, path, objective)
                assert np.max(np.abs(concrete - abstract[part.block_of])) <= 1e-9, (seed, f, objective)
    assert merged >= 20
    assert time.perf_counter() - t0 < 60
