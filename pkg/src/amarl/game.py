"""Explicit finite Markov games, induced chains, options and stochastic stepping.

Transitions are stored sparsely.  Every state owns a contiguous block of
*rows*; a row is one available joint action together with its successor
distribution.  Successor entries are sorted by state index.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Hashable, Iterable, Mapping

import numpy as np
import scipy.sparse as sp

ROW_TOL = 1e-12
LOAD_TOL = 1e-9
IDLE = "idle"


class ModelError(ValueError):
    pass


class InvalidActionError(ModelError):
    pass


class UndefinedPolicyStateError(ModelError):
    def __init__(self, state):
        super().__init__(f"policy undefined on reachable state {state!r}")
        self.state = state


@dataclass(eq=False)
class MarkovGame:
    n_agents: int
    state_ids: list[str]
    actions: list[list[str]]
    row_start: np.ndarray
    row_action: list[Hashable]
    entry_start: np.ndarray
    succ: np.ndarray
    prob: np.ndarray
    reward: np.ndarray
    labels: list[frozenset]
    agent_atoms: list[frozenset]
    global_atoms: frozenset
    gamma: float = 0.95
    initial: int = 0
    # row -> (family, member); used to pick worst/best variants of a transition
    risk: dict = field(default_factory=dict)
    # rewards identical across agents; the team reward is then one column, not the sum
    cooperative: bool = False

    def __post_init__(self):
        self._row_lookup = None
        self._index = None

    @property
    def n_states(self) -> int:
        return len(self.state_ids)

    @property
    def n_rows(self) -> int:
        return len(self.row_action)

    def rows_of(self, s: int) -> range:
        return range(int(self.row_start[s]), int(self.row_start[s + 1]))

    def available(self, s: int) -> list:
        return [self.row_action[r] for r in self.rows_of(s)]

    def entries(self, row: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.entry_start[row], self.entry_start[row + 1]
        return self.succ[lo:hi], self.prob[lo:hi]

    def row_index(self, s: int, action) -> int:
        if self._row_lookup is None:
            lookup = {}
            for st in range(self.n_states):
                for r in self.rows_of(st):
                    lookup[(st, self.row_action[r])] = r
            self._row_lookup = lookup
        try:
            return self._row_lookup[(s, action)]
        except KeyError:
            raise InvalidActionError(
                f"joint action {action!r} not available in state {self.state_ids[s]!r}"
            ) from None

    def state_index(self, state_id: str) -> int:
        if self._index is None:
            self._index = {name: i for i, name in enumerate(self.state_ids)}
        return self._index[state_id]

    def team_reward(self, rewards: np.ndarray) -> np.ndarray:
        return rewards[..., 0] if self.cooperative else rewards.sum(axis=-1)

    def expected_reward(self, row: int) -> np.ndarray:
        lo, hi = self.entry_start[row], self.entry_start[row + 1]
        return self.prob[lo:hi] @ self.reward[lo:hi]

    def atom_owner(self, atom: str):
        """Agent index owning ``atom``, or None for a global atom."""
        for i, atoms in enumerate(self.agent_atoms):
            if atom in atoms:
                return i
        return None

    def idle_action(self, agent: int):
        names = self.actions[agent]
        return names.index(IDLE) if IDLE in names else None

    def action_names(self, joint) -> list[str] | str:
        if isinstance(joint, tuple):
            return [self.actions[i][a] for i, a in enumerate(joint)]
        return joint

    @classmethod
    def from_rows(cls, n_agents, state_ids, actions, rows, labels, agent_atoms=None,
                  global_atoms=frozenset(), gamma=0.95, initial=0, cooperative=False):
        """Assemble a game from ``(state, action, {succ: prob}, {succ: reward_vec}, risk)`` rows.

        Rows may arrive in any order; they are grouped by state and kept in
        insertion order within a state.  ``risk`` may be None.
        """
        n = len(state_ids)
        per_state = [[] for _ in range(n)]
        for row in rows:
            per_state[row[0]].append(row)
        row_start = np.zeros(n + 1, dtype=np.int64)
        row_action, entry_start, succ, prob, rew, risk = [], [0], [], [], [], {}
        for s in range(n):
            for (_, action, dist, rewards, tag) in per_state[s]:
                if tag is not None:
                    risk[len(row_action)] = tag
                row_action.append(action)
                for t in sorted(dist):
                    succ.append(t)
                    prob.append(dist[t])
                    vec = rewards.get(t) if rewards else None
                    rew.append(vec if vec is not None else (0.0,) * n_agents)
                entry_start.append(len(succ))
            row_start[s + 1] = len(row_action)
        return cls(
            n_agents=n_agents,
            state_ids=list(state_ids),
            actions=[list(a) for a in actions],
            row_start=row_start,
            row_action=row_action,
            entry_start=np.asarray(entry_start, dtype=np.int64),
            succ=np.asarray(succ, dtype=np.int64),
            prob=np.asarray(prob, dtype=np.float64),
            reward=np.asarray(rew, dtype=np.float64).reshape(len(succ), n_agents),
            labels=[frozenset(l) for l in labels],
            agent_atoms=[frozenset(a) for a in (agent_atoms or [frozenset()] * n_agents)],
            global_atoms=frozenset(global_atoms),
            gamma=float(gamma),
            initial=int(initial),
            risk=risk,
            cooperative=bool(cooperative),
        )


def validate(game: MarkovGame, shared_rewards: bool = False) -> list[str]:
    """List violations of the model invariants; empty iff well-formed."""
    problems = []
    n = game.n_states
    for s in range(n):
        if game.row_start[s + 1] == game.row_start[s]:
            problems.append(f"state {game.state_ids[s]!r} has no available joint action")
        seen = set()
        for r in game.rows_of(s):
            a = game.row_action[r]
            if a in seen:
                problems.append(f"state {game.state_ids[s]!r}: duplicate joint action {a!r}")
            seen.add(a)
            succ, prob = game.entries(r)
            if np.any(succ < 0) or np.any(succ >= n):
                problems.append(f"state {game.state_ids[s]!r}, action {a!r}: unknown successor")
            if np.any(prob < 0) or np.any(prob > 1):
                problems.append(f"state {game.state_ids[s]!r}, action {a!r}: probability outside [0,1]")
            total = math.fsum(prob)
            if abs(total - 1.0) > ROW_TOL:
                problems.append(
                    f"state {game.state_ids[s]!r}, action {a!r}: row sums to {total!r}"
                )
    owners = {}
    groups = [("AP_%d" % (i + 1), atoms) for i, atoms in enumerate(game.agent_atoms)]
    groups.append(("AP_all", game.global_atoms))
    for name, atoms in groups:
        for atom in atoms:
            if atom in owners:
                problems.append(f"atom {atom!r} belongs to both {owners[atom]} and {name}")
            else:
                owners[atom] = name
    used = set().union(*game.labels) if game.labels else set()
    for atom in sorted(used - set(owners)):
        problems.append(f"atom {atom!r} is not assigned to any atom set")
    if shared_rewards and game.reward.size:
        if not np.all(game.reward == game.reward[:, :1]):
            problems.append("rewards differ across agents in cooperative mode")
    if not 0.0 <= game.gamma <= 1.0:
        problems.append(f"discount {game.gamma} outside [0,1]")
    return problems


def step(game: MarkovGame, state: int, joint_action, rng) -> tuple[int, np.ndarray]:
    """Sample a successor; ``rng`` only needs a ``random()`` method."""
    row = game.row_index(state, joint_action)
    lo, hi = game.entry_start[row], game.entry_start[row + 1]
    u = rng.random()
    acc = 0.0
    for k in range(lo, hi):
        acc += game.prob[k]
        if u < acc:
            return int(game.succ[k]), game.reward[k]
    # guard against rounding in the last cumulative sum
    k = hi - 1
    while game.prob[k] == 0.0:
        k -= 1
    return int(game.succ[k]), game.reward[k]


@dataclass(eq=False)
class InducedChain:
    """Markov chain obtained by fixing a deterministic policy.

    ``states`` holds the parent-game index of each chain state, ``matrix`` the
    transition probabilities and ``rewards`` the expected one-step reward of
    each state per agent.
    """

    states: np.ndarray
    matrix: sp.csr_matrix
    rewards: np.ndarray
    labels: list[frozenset]
    initial: int = 0
    names: list[str] | None = None
    team: np.ndarray | None = None

    @property
    def n_states(self) -> int:
        return len(self.states)

    def sat(self, atom: str) -> np.ndarray:
        return np.fromiter((atom in l for l in self.labels), dtype=bool, count=len(self.labels))

    def reward_vector(self, structure=None) -> np.ndarray:
        """Expected one-step reward per state: team reward, or one agent's (1-based)."""
        if structure is None or structure == "team":
            return self.rewards.sum(axis=1) if self.team is None else self.team
        return self.rewards[:, int(structure) - 1]

    @classmethod
    def from_matrix(cls, matrix, labels, rewards=None, initial=0):
        m = sp.csr_matrix(np.asarray(matrix, dtype=float) if not sp.issparse(matrix) else matrix)
        n = m.shape[0]
        r = np.zeros((n, 1)) if rewards is None else np.asarray(rewards, dtype=float).reshape(n, -1)
        return cls(np.arange(n), m, r, [frozenset(l) for l in labels], initial)


def _policy_lookup(policy) -> Callable:
    if callable(policy) and not isinstance(policy, Mapping):
        return policy
    if isinstance(policy, Mapping):
        return lambda s: policy.get(s)
    seq = list(policy)
    return lambda s: seq[s] if s < len(seq) else None


def induce_chain(game, policy, initial=None) -> InducedChain:
    """Fix ``policy`` (state -> joint action) and keep the reachable fragment."""
    game = getattr(game, "game", game)
    choose = _policy_lookup(policy)
    starts = [game.initial] if initial is None else (
        [initial] if isinstance(initial, (int, np.integer)) else list(initial))
    seen = {s: None for s in starts}
    queue = deque(starts)
    rows = {}
    while queue:
        s = queue.popleft()
        action = choose(s)
        if action is None:
            raise UndefinedPolicyStateError(game.state_ids[s])
        r = game.row_index(s, action)
        rows[s] = r
        for t in game.entries(r)[0]:
            t = int(t)
            if t not in seen:
                seen[t] = None
                queue.append(t)
    states = np.array(sorted(seen), dtype=np.int64)
    pos = {int(s): i for i, s in enumerate(states)}
    indptr, indices, data = [0], [], []
    rewards = np.zeros((len(states), game.n_agents))
    for i, s in enumerate(states):
        r = rows[int(s)]
        succ, prob = game.entries(r)
        indices.extend(pos[int(t)] for t in succ)
        data.extend(prob)
        indptr.append(len(indices))
        rewards[i] = game.expected_reward(r)
    n = len(states)
    matrix = sp.csr_matrix((np.asarray(data, float), np.asarray(indices, np.int64),
                            np.asarray(indptr, np.int64)), shape=(n, n))
    return InducedChain(
        states=states,
        matrix=matrix,
        rewards=rewards,
        labels=[game.labels[int(s)] for s in states],
        initial=pos[int(starts[0])],
        names=[game.state_ids[int(s)] for s in states],
        team=game.team_reward(rewards),
    )


# --- options -----------------------------------------------------------------

@dataclass(frozen=True)
class OptionSpec:
    initiation_set: frozenset
    policy: Mapping
    termination_set: frozenset

    def can_start(self, s) -> bool:
        return s in self.initiation_set

    def terminated(self, s) -> bool:
        return s in self.termination_set


@dataclass(frozen=True)
class JointOption:
    """Per-agent options executed under the T_all termination scheme."""

    options: tuple
    termination_scheme: str = "T_all"

    def run(self, game: MarkovGame, state: int, rng, max_steps: int = 10_000):
        """Execute until every component has terminated.

        Agents whose component already terminated take the idle action.
        Returns the trace as a list of ``(state, joint_action, done_flags)``
        followed by the final state.
        """
        done = [o.terminated(state) for o in self.options]
        trace = []
        for _ in range(max_steps):
            if all(done):
                break
            joint = tuple(
                game.idle_action(i) if done[i] else o.policy[state]
                for i, o in enumerate(self.options)
            )
            trace.append((state, joint, tuple(done)))
            state, _ = step(game, state, joint, rng)
            done = [d or o.terminated(state) for d, o in zip(done, self.options)]
        return trace, state


# --- serialization -----------------------------------------------------------

def _num(x) -> float:
    return float(Fraction(x)) if isinstance(x, str) else float(x)


def game_to_dict(game: MarkovGame) -> dict:
    def key(a):
        return game.action_names(a) if isinstance(a, tuple) else a

    ids = game.state_ids
    transitions, rewards, risk = [], [], []
    for s in range(game.n_states):
        for r in game.rows_of(s):
            succ, prob = game.entries(r)
            a = key(game.row_action[r])
            transitions.append({"from": ids[s], "joint_action": a,
                                "to_probs": {ids[int(t)]: float(p) for t, p in zip(succ, prob)}})
            lo = game.entry_start[r]
            for k, t in enumerate(succ):
                vec = game.reward[lo + k]
                if np.any(vec != 0):
                    rewards.append({"from": ids[s], "joint_action": a, "to": ids[int(t)],
                                    "values": [float(v) for v in vec]})
            if r in game.risk:
                fam, member = game.risk[r]
                risk.append({"from": ids[s], "joint_action": a,
                             "family": _jsonable(fam), "member": _jsonable(member)})
    out = {
        "n_agents": game.n_agents,
        "states": [{"id": ids[s], "labels": sorted(game.labels[s])} for s in range(game.n_states)],
        "actions": game.actions,
        "transitions": transitions,
        "rewards": rewards,
        "gamma": game.gamma,
        "cooperative": game.cooperative,
        "initial": ids[game.initial],
        "atom_partition": {
            "all": sorted(game.global_atoms),
            **{str(i + 1): sorted(a) for i, a in enumerate(game.agent_atoms)},
        },
    }
    if risk:
        out["risk"] = risk
    return out


def _jsonable(x):
    if isinstance(x, (tuple, list)):
        return [_jsonable(v) for v in x]
    if isinstance(x, frozenset):
        return sorted(_jsonable(v) for v in x)
    return x


def _hashable(x):
    if isinstance(x, list):
        return tuple(_hashable(v) for v in x)
    return x


def game_from_dict(data: Mapping) -> MarkovGame:
    n_agents = int(data["n_agents"])
    states = data["states"]
    ids = [str(st["id"]) for st in states]
    index = {name: i for i, name in enumerate(ids)}
    if len(index) != len(ids):
        raise ModelError("duplicate state ids")
    actions = [list(a) for a in data.get("actions", [[] for _ in range(n_agents)])]
    act_index = [{name: k for k, name in enumerate(a)} for a in actions]

    def key(a):
        if isinstance(a, list):
            if len(a) != n_agents:
                raise ModelError(f"joint action {a!r} has wrong arity")
            try:
                return tuple(act_index[i][name] for i, name in enumerate(a))
            except KeyError as e:
                raise ModelError(f"unknown action {e.args[0]!r}") from None
        return str(a)

    def state(name):
        try:
            return index[str(name)]
        except KeyError:
            raise ModelError(f"unknown state {name!r}") from None

    rew = {}
    for item in data.get("rewards", []):
        rew.setdefault((state(item["from"]), key(item["joint_action"])), {})[state(item["to"])] = tuple(
            float(v) for v in item["values"])
    risk = {}
    for item in data.get("risk", []):
        risk[(state(item["from"]), key(item["joint_action"]))] = (
            _hashable(item["family"]), _hashable(item["member"]))
    rows = []
    for tr in data["transitions"]:
        s, a = state(tr["from"]), key(tr["joint_action"])
        dist = {}
        for t, p in tr["to_probs"].items():
            dist[state(t)] = dist.get(state(t), 0.0) + _num(p)
        total = math.fsum(dist.values())
        if abs(total - 1.0) > LOAD_TOL:
            raise ModelError(f"row ({tr['from']!r}, {tr['joint_action']!r}) sums to {total!r}")
        if total != 1.0:
            dist = {t: p / total for t, p in dist.items()}
        rows.append((s, a, dist, rew.get((s, a)), risk.get((s, a))))
    part = data.get("atom_partition", {})
    agent_atoms = [frozenset(part.get(str(i + 1), [])) for i in range(n_agents)]
    initial = data.get("initial")
    return MarkovGame.from_rows(
        n_agents, ids, actions, rows,
        labels=[st.get("labels", []) for st in states],
        agent_atoms=agent_atoms,
        global_atoms=frozenset(part.get("all", [])),
        gamma=float(data.get("gamma", 0.95)),
        initial=index[str(initial)] if initial is not None else 0,
        cooperative=bool(data.get("cooperative", False)),
    )


def write_atomic(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_game(game: MarkovGame, path) -> None:
    write_atomic(path, json.dumps(game_to_dict(game), indent=1))


def load_game(path) -> MarkovGame:
    with open(path) as fh:
        return game_from_dict(json.load(fh))


def export_prism(chain: InducedChain, basepath) -> tuple[str, str]:
    """Write PRISM explicit ``.tra``/``.lab`` files for ``chain``."""
    m = chain.matrix.tocoo()
    order = np.lexsort((m.col, m.row))
    lines = [f"{chain.n_states} {m.nnz}"]
    lines += [f"{m.row[k]} {m.col[k]} {m.data[k]!r}" for k in order]
    atoms = sorted(set().union(*chain.labels)) if chain.labels else []
    ids = {"init": 0, "deadlock": 1, **{a: i + 2 for i, a in enumerate(atoms)}}
    lab = [" ".join(f'{i}="{a}"' for a, i in ids.items())]
    for s in range(chain.n_states):
        tags = ([0] if s == chain.initial else []) + sorted(ids[a] for a in chain.labels[s])
        if tags:
            lab.append(f"{s}: " + " ".join(map(str, tags)))
    tra, labf = f"{basepath}.tra", f"{basepath}.lab"
    write_atomic(tra, "\n".join(lines) + "\n")
    write_atomic(labf, "\n".join(lab) + "\n")
    return tra, labf


def reachable(game: MarkovGame, starts: Iterable[int]) -> set[int]:
    seen = set(starts)
    queue = deque(seen)
    while queue:
        s = queue.popleft()
        for r in game.rows_of(s):
            for t in game.entries(r)[0]:
                t = int(t)
                if t not in seen:
                    seen.add(t)
                    queue.append(t)
    return seen
