import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amarl import gfc, shield as sh
from amarl.evaluate import monte_carlo_eval
from amarl.logic import relaxed_preserved
from amarl.game import UndefinedPolicyStateError
from amarl.quotient import build_amg, quotient

UP, DOWN, LEFT, RIGHT, IDLE = range(5)


def test_relaxed_consistent_examples():
    agent, glob = {"area=A", "area=B", "area=C"}, {"flag"}
    src, tgt = {"area=A"}, [{"area=B"}]
    assert sh.relaxed_consistent(src, src, src, tgt, agent, glob)                 # stay
    assert sh.relaxed_consistent(src, {"area=B"}, src, tgt, agent, glob)          # jump to target
    assert not sh.relaxed_consistent(src, {"area=C"}, src, tgt, agent, glob)      # off target
    assert sh.relaxed_consistent({"area=B"}, {"area=B"}, src, tgt, agent, glob)   # keep after jump
    assert not sh.relaxed_consistent({"area=B"}, src, src, tgt, agent, glob)      # no second change
    assert not sh.relaxed_consistent(src, {"area=A", "flag"}, src, tgt, agent, glob)
    assert sh.relaxed_consistent(src, {"area=A", "flag"}, src, [{"area=B", "flag"}], agent, glob)


@pytest.fixture(scope="module")
def single():
    spec = gfc.GridSpec.load("gfc-mini1")
    game = gfc.build_mg(spec)
    safe = build_amg(game, quotient(game), "safe")
    labels = [frozenset(l) for l in safe.game.labels]

    def block(*atoms):
        return labels.index(frozenset(atoms))

    def option_to(b, *atoms):
        dst = block(*atoms)
        return next(o.name for o in safe.options[b] if dst in o.support())

    def state(cell, flags=0):
        return game.spec_states.index(((spec.cell_index[cell],), flags))

    return game, safe, block, option_to, state


def _tracker(game, safe, choice, s):
    policy = {b: safe.option_names(b)[0] for b in range(safe.n_states)}
    policy.update(choice)
    model = sh.ShieldModel(game, safe, policy)
    return sh.ShieldState.start(model, s, log=[])


def test_allowed_actions_follow_the_active_option(single):
    game, safe, block, option_to, state = single
    room = block("area_1=RoomA")
    fetch = option_to(room, "area_1=RoomA", "flag_A")
    cross = option_to(room, "area_1=HallA")
    door = state((2, 2))
    near_flag = state((1, 0))
    tr = _tracker(game, safe, {room: fetch}, door)
    assert IDLE in sh.allowed_actions(tr, game, door, 0)
    assert RIGHT not in sh.allowed_actions(tr, game, door, 0)      # leaves for an untargeted area
    assert LEFT in sh.allowed_actions(tr, game, door, 0)           # stays inside the room
    assert LEFT in sh.allowed_actions(tr, game, near_flag, 0)      # picks up the targeted flag
    tr = _tracker(game, safe, {room: cross}, door)
    assert RIGHT in sh.allowed_actions(tr, game, door, 0)          # hidden crossing, all outcomes targeted
    assert LEFT not in sh.allowed_actions(tr, game, near_flag, 0)  # flag is not a target here
    assert IDLE in sh.allowed_actions(tr, game, near_flag, 0)


def test_filter_blocks_with_penalty_and_logs(single):
    game, safe, block, option_to, state = single
    room = block("area_1=RoomA")
    door = state((2, 2))
    tr = _tracker(game, safe, {room: option_to(room, "area_1=RoomA", "flag_A")}, door)
    executed, adj, dec = sh.filter(tr, game, door, [RIGHT])
    assert list(executed) == [IDLE] and list(adj) == [sh.BLOCK_PENALTY] and dec.verdicts == ["block"]
    assert tr.log == [{"episode": 0, "step": 0, "agent": 1, "blocked_action": "right",
                       "reason": "inconsistent"}]
    executed, adj, dec = sh.filter(tr, game, door, [LEFT])
    assert list(executed) == [LEFT] and list(adj) == [0.0] and dec.verdicts == ["allow"]


def test_observe_rewards_completion_and_terminates(single):
    game, safe, block, option_to, state = single
    room = block("area_1=RoomA")
    near_flag = state((1, 0))
    tr = _tracker(game, safe, {room: option_to(room, "area_1=RoomA", "flag_A")}, near_flag)
    executed, _, _ = sh.filter(tr, game, near_flag, [LEFT])
    t = int(game.entries(game.row_index(near_flag, tuple(executed)))[0][0])
    bonus, terminated, ok = sh.observe(tr, game, near_flag, executed, t)
    assert ok and terminated and list(bonus) == [sh.COMPLETION_BONUS]
    assert tr.source == block("area_1=RoomA", "flag_A") and tr.committed == (False,)


def test_stay_option_terminates_every_step(single):
    game, safe, block, option_to, state = single
    room = block("area_1=RoomA")
    s = state((1, 1))
    tr = _tracker(game, safe, {room: option_to(room, "area_1=RoomA")}, s)
    assert {IDLE, UP, DOWN, LEFT} <= sh.allowed_actions(tr, game, s, 0)
    executed, _, _ = sh.filter(tr, game, s, [LEFT])
    t = int(game.entries(game.row_index(s, tuple(executed)))[0][0])
    _, terminated, ok = sh.observe(tr, game, s, executed, t)
    assert ok and terminated and tr.source == room


def test_undefined_policy_state(single):
    game, safe, *_ = single
    model = sh.ShieldModel(game, safe, {})
    with pytest.raises(UndefinedPolicyStateError):
        sh.ShieldState.start(model, game.initial)


def _shielded_walk(m, rng, log=None):
    """One random shielded episode; yields (source block, option, new block) at each termination."""
    game, model, sim = m.game, m.model, m.sim
    s = game.initial
    tr = sh.ShieldState.start(model, s, log)
    out, blocked = [], 0
    for _ in range(m.spec.max_steps):
        acts = sim.actions[s]
        proposal = [a[int(rng.integers(len(a)))] for a in acts]
        executed, adj, _ = sh.filter(tr, game, s, proposal)
        blocked += int((adj < 0).sum())
        src, opt = tr.source, tr.option
        t, _ = sim.sample(s, executed, rng.random())
        _, terminated, ok = sh.observe(tr, game, s, executed, t)
        assert ok
        if terminated:
            out.append((src, opt, int(model.z[t])))
        s = t
        if sim.end_all[s]:
            break
    return out, blocked


def test_containment_and_policy_conformance(mini):
    safe = mini.safe
    rng = np.random.default_rng(11)
    log = []
    total_blocked = 0
    for _ in range(300):
        steps, blocked = _shielded_walk(mini, rng, log)
        total_blocked += blocked
        for src, opt, dst in steps:
            assert opt == mini.chosen.policy.choice[src]
            support = safe.game.entries(safe.game.row_index(src, opt))[0]
            assert dst in set(int(x) for x in support)
    assert len(log) == total_blocked > 0
    assert all(set(r) == {"episode", "step", "agent", "blocked_action", "reason"} for r in log)


def test_audit_log_written(mini, tmp_path):
    log = []
    _shielded_walk(mini, np.random.default_rng(3), log)
    sh.write_audit(tmp_path / "audit.jsonl", log)
    lines = (tmp_path / "audit.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == log


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_idle_always_allowed_and_filter_subset(mini, seed):
    rng = np.random.default_rng(seed)
    game, model, sim = mini.game, mini.model, mini.sim
    s = game.initial
    tr = sh.ShieldState.start(model, s)
    for _ in range(mini.spec.max_steps):
        for i in range(game.n_agents):
            assert model.idle[i] in sh.allowed_actions(tr, game, s, i)
        proposal = [a[int(rng.integers(len(a)))] for a in sim.actions[s]]
        executed, adj, _ = sh.filter(tr, game, s, proposal)
        for i, a in enumerate(executed):
            assert a == proposal[i] or a == model.idle[i]
            assert (adj[i] < 0) == (a != proposal[i])
        t, _ = sim.sample(s, executed, rng.random())
        assert sh.observe(tr, game, s, executed, t)[2]
        s = t
        if sim.end_all[s]:
            break


def test_shielded_random_play_respects_safe_bounds(mini):
    rep = monte_carlo_eval(mini.game, "random", 3000, seeds=[5], model=mini.model, shielded=True,
                           max_steps=mini.spec.max_steps, sim=mini.sim)
    for c in mini.constraints.safety:
        assert relaxed_preserved(c.formula, mini.game.agent_atoms)
        atom = c.formula.path.right.name
        p = rep.prob(atom)
        assert p <= c.formula.bound + 3 * rep.se(atom) + 1e-12, (atom, p)
