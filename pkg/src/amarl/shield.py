"""Runtime shield enforcing an abstract joint policy under the relaxed branching condition.

Each agent's own atoms (and, separately, the global atoms) may either keep
their value at the start of the active joint option or move once to the
value they have in one of the option's target classes.  Agents that have
moved ("committed") only idle until every agent is done and the joint option
terminates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .game import MarkovGame, UndefinedPolicyStateError

BLOCK_PENALTY = -1.0
COMPLETION_BONUS = 1.0


def relaxed_consistent(current, proposed, source, targets, agent_atoms, global_atoms) -> bool:
    """Relaxed branching check of one agent's atoms and of the global atoms.

    ``targets`` is an iterable of label sets of the allowed target classes.
    A part that still equals its source value may stay or jump to a target
    value; a part that already left its source value must not change again.
    """
    def part_ok(atoms):
        cur, nxt, src = (frozenset(x) & atoms for x in (current, proposed, source))
        allowed = {frozenset(t) & atoms for t in targets}
        if cur == src:
            return nxt == src or nxt in allowed
        return nxt == cur

    return part_ok(frozenset(agent_atoms)) and part_ok(frozenset(global_atoms))


class ShieldModel:
    """Per-game precomputation shared by all shield states over one abstract policy."""

    def __init__(self, game: MarkovGame, amg, policy, z=None):
        from .gfc import abstraction_map
        self.game = game
        self.amg = amg
        self.policy = policy if callable(policy) else (lambda b: policy.get(int(b)))
        self.z = np.asarray(abstraction_map(game, amg) if z is None else z)
        n = game.n_agents
        self.n = n
        self.idle = [game.idle_action(i) for i in range(n)]
        self._ids = {}
        self.local = [self._intern(game.labels, game.agent_atoms[i]) for i in range(n)]
        self.glob = self._intern(game.labels, game.global_atoms)
        alab = amg.game.labels
        self.block_local = [[self._id(frozenset(l) & game.agent_atoms[i]) for l in alab] for i in range(n)]
        self.block_glob = [self._id(frozenset(l) & game.global_atoms) for l in alab]
        self._opt = {}
        self._filter = {}
        self._observe = {}
        self._alone = {}
        self._agent_actions = [self._per_agent(s) for s in range(game.n_states)]

    def _id(self, fs):
        return self._ids.setdefault(fs, len(self._ids))

    def _intern(self, labels, atoms):
        atoms = frozenset(atoms)
        return [self._id(frozenset(l) & atoms) for l in labels]

    def _per_agent(self, s):
        acts = [set() for _ in range(self.n)]
        for a in self.game.available(s):
            for i, x in enumerate(a):
                acts[i].add(x)
        return [sorted(x) for x in acts]

    def agent_actions(self, s: int, i: int) -> list:
        return self._agent_actions[s][i]

    def option_info(self, b: int, option):
        """(targets, per-agent allowed local ids, allowed global ids, stay-only flag)."""
        key = (b, option)
        info = self._opt.get(key)
        if info is None:
            support = self.amg.game.entries(self.amg.game.row_index(b, option))[0]
            targets = frozenset(int(t) for t in support) - {b}
            local = [frozenset(self.block_local[i][t] for t in targets) for i in range(self.n)]
            glob = frozenset(self.block_glob[t] for t in targets)
            info = (targets, local, glob, not targets)
            self._opt[key] = info
        return info

    def step_consistency(self, b, option, s, t):
        """Per-agent consistency of moving from ``s`` to ``t`` plus the global part."""
        _, local, glob, _ = self.option_info(b, option)
        out = []
        for i in range(self.n):
            cur, nxt, src = self.local[i][s], self.local[i][t], self.block_local[i][b]
            out.append(nxt == src or nxt in local[i] if cur == src else nxt == cur)
        cur, nxt, src = self.glob[s], self.glob[t], self.block_glob[b]
        g = nxt == src or nxt in glob if cur == src else nxt == cur
        return out, g

    def joint_ok(self, b, option, s, joint) -> bool:
        r = self.game.row_index(s, tuple(joint))
        for t in self.game.entries(r)[0]:
            per, g = self.step_consistency(b, option, s, int(t))
            if not g or not all(per):
                return False
        return True

    def alone_flips_global(self, s, i, action) -> bool:
        key = (s, i, action)
        hit = self._alone.get(key)
        if hit is None:
            joint = list(self.idle)
            joint[i] = action
            r = self.game.row_index(s, tuple(joint))
            hit = any(self.glob[int(t)] != self.glob[s] for t in self.game.entries(r)[0])
            self._alone[key] = hit
        return hit


@dataclass
class ShieldState:
    model: ShieldModel
    source: int
    option: object
    committed: tuple
    log: list | None = None
    episode: int = 0
    step: int = 0

    @classmethod
    def start(cls, model: ShieldModel, s: int, log=None, episode=0) -> "ShieldState":
        b = int(model.z[s])
        option = model.policy(b)
        if option is None:
            raise UndefinedPolicyStateError(model.amg.game.state_ids[b])
        return cls(model, b, option, (False,) * model.n, log, episode)

    @property
    def targets(self) -> frozenset:
        return self.model.option_info(self.source, self.option)[0]

    def snapshot(self, i: int) -> frozenset:
        """Agent ``i``'s atoms at the start of the active option."""
        g = self.model.amg.game
        return frozenset(g.labels[self.source]) & self.model.game.agent_atoms[i]

    def _advance(self, b):
        option = self.model.policy(b)
        if option is None:
            raise UndefinedPolicyStateError(self.model.amg.game.state_ids[b])
        self.source, self.option, self.committed = b, option, (False,) * self.model.n


@dataclass
class ShieldDecision:
    verdicts: list                  # "allow" / "block" per agent
    adjustments: np.ndarray
    terminated: bool = False


def allowed_actions(shield: ShieldState, game: MarkovGame, s: int, agent: int) -> set:
    """Actions of ``agent`` whose outcomes, with everyone else idle, stay consistent."""
    m = shield.model
    idle = m.idle[agent]
    if shield.committed[agent]:
        return {idle}
    out = {idle}
    for a in m.agent_actions(s, agent):
        if a == idle:
            continue
        joint = list(m.idle)
        joint[agent] = a
        if m.joint_ok(shield.source, shield.option, s, joint):
            out.add(a)
    return out


def filter(shield: ShieldState, game: MarkovGame, s: int, proposed):
    """Replace inconsistent proposals by idle.

    The whole proposal is kept when every joint outcome is consistent, which
    also admits simultaneous moves that no agent could make alone.  Otherwise
    agents are admitted one at a time in index order.
    Returns (executed joint action, adjustments, decision).
    """
    m = shield.model
    key = (shield.source, shield.option, shield.committed, s, tuple(proposed))
    hit = m._filter.get(key)
    if hit is None:
        want = [m.idle[i] if shield.committed[i] else a for i, a in enumerate(proposed)]
        if m.joint_ok(shield.source, shield.option, s, want):
            executed = want
        else:
            executed = list(m.idle)
            for i, a in enumerate(want):
                if a == m.idle[i]:
                    continue
                trial = list(executed)
                trial[i] = a
                if m.joint_ok(shield.source, shield.option, s, trial):
                    executed = trial
        blocked = tuple(executed[i] != a for i, a in enumerate(proposed))
        hit = (tuple(executed), blocked)
        m._filter[key] = hit
    executed, blocked = hit
    adj = np.array([BLOCK_PENALTY if b else 0.0 for b in blocked])
    if shield.log is not None:
        for i, b in enumerate(blocked):
            if b:
                shield.log.append({"episode": shield.episode, "step": shield.step, "agent": i + 1,
                                   "blocked_action": game.actions[i][proposed[i]],
                                   "reason": "committed" if shield.committed[i] else "inconsistent"})
    verdicts = ["block" if b else "allow" for b in blocked]
    return executed, adj, ShieldDecision(verdicts, adj)


def observe(shield: ShieldState, game: MarkovGame, s: int, executed, t: int):
    """Account for the transition ``s -> t``: completion bonuses and termination.

    Returns (bonus per agent, terminated, consistent).  An inconsistent
    transition (possible only without filtering) leaves the state unchanged
    and reports the violating agents through ``violators``.
    """
    m = shield.model
    if shield.option is None:
        # tracking off the abstract policy: follow the block we are in
        if int(m.z[t]) != shield.source:
            resync(shield, t)
        shield.step += 1
        return np.zeros(m.n), False, True
    key = (shield.source, shield.option, shield.committed, s, tuple(executed), t)
    hit = m._observe.get(key)
    if hit is None:
        per, g = m.step_consistency(shield.source, shield.option, s, t)
        consistent = g and all(per)
        bonus = np.zeros(m.n)
        committed = list(shield.committed)
        if consistent:
            src_local = [m.block_local[i][shield.source] for i in range(m.n)]
            flipped = m.glob[t] != m.glob[s]
            for i in range(m.n):
                if committed[i]:
                    continue
                if m.local[i][t] != src_local[i] or (
                        flipped and m.alone_flips_global(s, i, executed[i])):
                    committed[i] = True
                    bonus[i] = COMPLETION_BONUS
        targets, _, _, stay = m.option_info(shield.source, shield.option)
        zt = int(m.z[t])
        terminated = consistent and (zt in targets or stay)
        hit = (bonus, tuple(committed), terminated, consistent, zt, per, g)
        m._observe[key] = hit
    bonus, committed, terminated, consistent, zt, _, _ = hit
    if consistent:
        shield.committed = committed
        if terminated:
            shield._advance(zt)
    shield.step += 1
    return bonus, terminated, consistent


def violators(shield: ShieldState, s: int, executed, t: int) -> list[int]:
    """Agents responsible for an inconsistent transition."""
    m = shield.model
    per, g = m.step_consistency(shield.source, shield.option, s, t)
    out = [i for i, ok in enumerate(per) if not ok]
    if not g:
        cause = [i for i in range(m.n) if m.alone_flips_global(s, i, executed[i])]
        if not cause:
            cause = [i for i in range(m.n) if executed[i] != m.idle[i]]
        out = sorted(set(out) | set(cause))
    return out


def resync(shield: ShieldState, t: int) -> None:
    """Restart tracking from ``t`` after an off-policy move (passive tracking only)."""
    b = int(shield.model.z[t])
    option = shield.model.policy(b)
    shield.source, shield.committed = b, (False,) * shield.model.n
    shield.option = option


def write_audit(path, records) -> None:
    from .game import write_atomic
    write_atomic(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
