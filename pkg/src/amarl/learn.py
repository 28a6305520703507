"""Independent tabular Q-learning, with or without the shield."""
from __future__ import annotations

import bisect
import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .game import MarkovGame, write_atomic
from . import shield as sh

MODES = ("shielded", "unshielded-terminate", "vanilla")


@dataclass
class LearnerConfig:
    alpha: float = 0.1
    gamma: float = 0.95
    eps_start: float = 1.0
    eps_decay: float = 0.99988
    eps_floor: float = 0.1
    episodes: int = 20_000
    max_steps: int = 1_000
    seed: int = 0
    mode: str = "shielded"
    full_state_key: bool = False

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.episodes < 0 or self.max_steps < 1:
            raise ValueError("episodes must be >= 0 and max_steps >= 1")

    def epsilon(self, episode: int) -> float:
        return max(self.eps_floor, self.eps_start * self.eps_decay ** episode)


class QTable:
    """Per-agent map key -> list of action values (zero when unseen)."""

    def __init__(self, n_agents: int, n_actions):
        self.n_actions = list(n_actions) if not isinstance(n_actions, int) else [n_actions] * n_agents
        self.tables = [dict() for _ in range(n_agents)]

    def row(self, agent: int, key) -> list:
        t = self.tables[agent]
        r = t.get(key)
        if r is None:
            r = t[key] = [0.0] * self.n_actions[agent]
        return r

    def peek(self, agent: int, key):
        return self.tables[agent].get(key)

    def value(self, agent, key, action) -> float:
        r = self.peek(agent, key)
        return 0.0 if r is None else r[action]

    def max_value(self, agent, key, actions=None) -> float:
        r = self.peek(agent, key)
        if r is None:
            return 0.0
        return max(r) if actions is None else max(r[a] for a in actions)

    def to_dict(self) -> dict:
        return {"n_actions": self.n_actions,
                "agents": [[[list(k) if isinstance(k, tuple) else k, v] for k, v in sorted(t.items(), key=str)]
                           for t in self.tables]}

    @classmethod
    def from_dict(cls, d) -> "QTable":
        q = cls(len(d["agents"]), d["n_actions"])
        for i, entries in enumerate(d["agents"]):
            for k, v in entries:
                q.tables[i][_tuplify(k)] = [float(x) for x in v]
        return q


def _tuplify(k):
    return tuple(_tuplify(x) for x in k) if isinstance(k, list) else k


def iql_update(q: QTable, agent: int, s, a: int, r: float, s_next, alpha=0.1, gamma=0.95,
               next_actions=None, terminal=False) -> QTable:
    row = q.row(agent, s)
    future = 0.0 if terminal else q.max_value(agent, s_next, next_actions)
    row[a] += alpha * (r + gamma * future - row[a])
    return q


def epsilon_greedy(q: QTable, agent: int, s, eps: float, rng, actions=None) -> int:
    acts = list(range(q.n_actions[agent])) if actions is None else list(actions)
    if eps > 0 and rng.random() < eps:
        return acts[int(rng.integers(len(acts)))]
    return greedy(q, agent, s, acts)


def greedy(q: QTable, agent: int, s, actions) -> int:
    r = q.peek(agent, s)
    if r is None:
        return actions[0]
    best, arg = None, actions[0]
    for a in actions:
        if best is None or r[a] > best:
            best, arg = r[a], a
    return arg


# --- simulation ---------------------------------------------------------------

class Simulator:
    """Fast sampling of rows of an explicit game."""

    def __init__(self, game: MarkovGame):
        self.game = game
        es, succ, prob = game.entry_start, game.succ, game.prob
        self.cum, self.succ, self.rew = [], [], []
        for r in range(game.n_rows):
            lo, hi = int(es[r]), int(es[r + 1])
            c = np.cumsum(prob[lo:hi]).tolist()
            c[-1] = 1.0
            self.cum.append(c)
            self.succ.append([int(x) for x in succ[lo:hi]])
            self.rew.append([game.reward[k] for k in range(lo, hi)])
        n = game.n_agents
        self.end_all = [("end_all" in l) for l in game.labels]
        self.done = [[(f"end_{i + 1}" in l) or ("end_all" in l) for i in range(n)] for l in game.labels]
        self.actions = []
        for s in range(game.n_states):
            acts = [set() for _ in range(n)]
            for a in game.available(s):
                for i, x in enumerate(a):
                    acts[i].add(x)
            self.actions.append([sorted(x) for x in acts])
        self.idle = [game.idle_action(i) for i in range(n)]

    def sample(self, s: int, joint, u: float):
        r = self.game.row_index(s, tuple(joint))
        c = self.cum[r]
        k = bisect.bisect_right(c, u) if len(c) > 1 else 0
        if k >= len(c):
            k = len(c) - 1
        return self.succ[r][k], self.rew[r][k]


def state_keys(game: MarkovGame, full: bool = False) -> list[list]:
    """Per-agent observation id of every state.

    For grid games built by :mod:`amarl.gfc` the key is (own position or
    status, other agents' area or status, flag mask); otherwise the state
    index itself.
    """
    n = game.n_agents
    states = getattr(game, "spec_states", None)
    if full or states is None:
        return [list(range(game.n_states)) for _ in range(n)]
    area = {}
    for s, labs in enumerate(game.labels):
        area[s] = []
        for i in range(n):
            tag = next((l for l in labs if l.startswith(f"area_{i + 1}=")), None)
            if tag is None:
                tag = "goal" if f"goal_{i + 1}" in labs else "captured"
            area[s].append(tag.split("=")[-1])
    intern = {}
    out = []
    for i in range(n):
        ids = []
        for s, (values, flags) in enumerate(states):
            k = (values[i], tuple(a for j, a in enumerate(area[s]) if j != i), flags)
            ids.append(intern.setdefault(k, len(intern)))
        out.append(ids)
    return out


@dataclass
class TrainStats:
    returns: np.ndarray                 # episodes x agents
    interventions: np.ndarray           # blocked proposals per episode
    unsafe: np.ndarray                  # bool per episode
    lengths: np.ndarray
    wall_time: float = 0.0

    @property
    def unsafe_terminations(self) -> int:
        return int(self.unsafe.sum())

    @property
    def unsafe_rate(self) -> float:
        return float(self.unsafe.mean()) if len(self.unsafe) else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.returns.shape[1] if self.returns.ndim == 2 else 0
        w.writerow(["episode"] + [f"return_{i + 1}" for i in range(n)]
                   + ["interventions", "unsafe", "length"])
        for e in range(len(self.unsafe)):
            w.writerow([e] + [f"{x:.6g}" for x in self.returns[e]]
                       + [int(self.interventions[e]), int(self.unsafe[e]), int(self.lengths[e])])
        return buf.getvalue()


@dataclass
class GreedyPolicy:
    """Learned deterministic policies, one per agent, over (observation, tracker) keys."""

    q: QTable
    keys: list
    tracked: bool = True
    sim: Simulator | None = field(default=None, repr=False)

    def key(self, i, s, tracker):
        if not self.tracked or tracker is None:
            return (self.keys[i][s],)
        return (self.keys[i][s], tracker.source, tracker.committed[i])

    def act(self, i, s, tracker, actions):
        return greedy(self.q, i, self.key(i, s, tracker), actions)


def train(game: MarkovGame, model: sh.ShieldModel | None, config: LearnerConfig,
          keys=None, audit: list | None = None, sim: Simulator | None = None):
    """Run independent Q-learning; returns (greedy policies, stats)."""
    if config.mode != "vanilla" and model is None:
        raise ValueError(f"mode {config.mode!r} needs a shield model")
    t0 = time.perf_counter()
    sim = sim or Simulator(game)
    keys = keys or state_keys(game, config.full_state_key)
    n = game.n_agents
    q = QTable(n, [len(a) for a in game.actions])
    rng = np.random.default_rng(config.seed)
    tracked = config.mode != "vanilla"
    pol = GreedyPolicy(q, keys, tracked, sim)
    E = config.episodes
    returns = np.zeros((E, n))
    interventions = np.zeros(E, dtype=np.int64)
    unsafe = np.zeros(E, dtype=bool)
    lengths = np.zeros(E, dtype=np.int64)
    alpha, gamma = config.alpha, config.gamma
    shielded = config.mode == "shielded"
    for ep in range(E):
        eps = config.epsilon(ep)
        s = game.initial
        tracker = sh.ShieldState.start(model, s, audit, ep) if tracked else None
        ret = np.zeros(n)
        blocked_count = 0
        steps = 0
        for steps in range(1, config.max_steps + 1):
            acts = sim.actions[s]
            done_now = sim.done[s]
            cur = [pol.key(i, s, tracker) for i in range(n)]
            proposal = [sim.idle[i] if done_now[i] else epsilon_greedy(q, i, cur[i], eps, rng, acts[i])
                        for i in range(n)]
            adj = None
            if shielded:
                executed, adj, _ = sh.filter(tracker, game, s, proposal)
                learned = proposal
                blocked_count += int((adj < 0).sum())
            elif tracked:
                executed = tuple(sim.idle[i] if tracker.committed[i] else a for i, a in enumerate(proposal))
                learned = executed
            else:
                executed = learned = tuple(proposal)
            t, r = sim.sample(s, executed, rng.random())
            rew = np.array(r, dtype=float)
            if adj is not None:
                rew += adj
            violation = False
            if tracked:
                bonus, _, ok = sh.observe(tracker, game, s, executed, t)
                if not ok:
                    violation = True
                    for i in sh.violators(tracker, s, executed, t):
                        rew[i] -= 1.0
                else:
                    rew += bonus
            end = sim.end_all[t] or violation
            nxt_done = sim.done[t]
            for i in range(n):
                if done_now[i]:
                    continue
                term = end or nxt_done[i]
                nk = None if term else pol.key(i, t, tracker)
                iql_update(q, i, cur[i], learned[i], rew[i], nk, alpha, gamma,
                           sim.actions[t][i], term)
            ret += rew
            s = t
            if end:
                break
        returns[ep] = ret
        interventions[ep] = blocked_count
        unsafe[ep] = tracked and violation
        lengths[ep] = steps
    stats = TrainStats(returns, interventions, unsafe, lengths, time.perf_counter() - t0)
    return pol, stats


def save_checkpoint(path, policy: GreedyPolicy, config: LearnerConfig) -> None:
    data = {"config": asdict(config), "seed": config.seed, "tracked": policy.tracked,
            "q": policy.q.to_dict()}
    write_atomic(path, json.dumps(data, sort_keys=True))


def load_checkpoint(path, game: MarkovGame) -> tuple[GreedyPolicy, LearnerConfig]:
    data = json.loads(Path(path).read_text())
    config = LearnerConfig(**data["config"])
    q = QTable.from_dict(data["q"])
    return GreedyPolicy(q, state_keys(game, config.full_state_key), data["tracked"]), config
