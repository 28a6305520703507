"""Monte-Carlo evaluation of concrete and abstract policies."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import shield as sh
from .game import MarkovGame
from .learn import GreedyPolicy, Simulator


def workers() -> int:
    try:
        return max(1, int(os.environ.get("AMARL_THREADS", "1")))
    except ValueError:
        return 1


def report_atoms(n_agents: int) -> list[str]:
    out = []
    for i in range(1, n_agents + 1):
        out += [f"captured_{i}", f"goal_{i}", f"end_{i}"]
    return out + ["captured_all", "goal_all", "end_all"]


@dataclass
class EvalReport:
    episodes: int                       # total sample count
    reached: dict                       # atom -> fraction of episodes that reached it
    returns: np.ndarray                 # mean per-agent return
    returns_se: np.ndarray
    per_seed: list = field(default_factory=list)
    unsafe: float = 0.0                 # fraction of episodes with an off-policy move

    def se(self, atom: str) -> float:
        p = self.reached[atom]
        return math.sqrt(p * (1 - p) / self.episodes)

    def prob(self, atom: str) -> float:
        return self.reached[atom]

    @property
    def team_return(self) -> float:
        return float(self.returns.sum())

    def rows(self):
        """Table rows (agent, P(F captured_i), P(F goal_i), return) including 'all'."""
        n = len(self.returns)
        out = []
        for i in range(1, n + 1):
            out.append((str(i), self.reached[f"captured_{i}"], self.reached[f"goal_{i}"],
                        float(self.returns[i - 1])))
        out.append(("all", self.reached["captured_all"], self.reached["goal_all"], self.team_return))
        return out

    def to_dict(self) -> dict:
        return {"episodes": self.episodes,
                "reached": {k: float(v) for k, v in self.reached.items()},
                "standard_errors": {k: self.se(k) for k in self.reached},
                "returns": [float(x) for x in self.returns],
                "returns_se": [float(x) for x in self.returns_se],
                "unsafe": self.unsafe,
                "per_seed": self.per_seed}


def _rollouts(game, sim, policy, model, shielded, seed, episodes, max_steps, atoms):
    """Returns (hits episodes x atoms bool, returns episodes x agents, unsafe flags)."""
    n = game.n_agents
    atom_mask = np.array([[a in l for a in atoms] for l in game.labels], dtype=bool)
    hits = np.zeros((episodes, len(atoms)), dtype=bool)
    rets = np.zeros((episodes, n))
    unsafe = np.zeros(episodes, dtype=bool)
    for ep in range(episodes):
        rng = np.random.default_rng([seed, ep])
        s = game.initial
        tracker = sh.ShieldState.start(model, s) if model is not None else None
        seen = atom_mask[s].copy()
        ret = np.zeros(n)
        for _ in range(max_steps):
            acts = sim.actions[s]
            if policy == "random":
                proposal = [a[int(rng.integers(len(a)))] for a in acts]
            else:
                proposal = [policy.act(i, s, tracker, acts[i]) for i in range(n)]
            executed = tuple(proposal)
            if shielded:
                executed, _, _ = sh.filter(tracker, game, s, proposal)
            t, r = sim.sample(s, executed, rng.random())
            ret += r
            if tracker is not None:
                _, _, ok = sh.observe(tracker, game, s, executed, t)
                if not ok:
                    unsafe[ep] = True
                    sh.resync(tracker, t)
            s = t
            seen |= atom_mask[s]
            if sim.end_all[s]:
                break
        hits[ep] = seen
        rets[ep] = ret
    return hits, rets, unsafe


def monte_carlo_eval(game: MarkovGame, policy, episodes: int = 10_000, seeds=(0,),
                     model: sh.ShieldModel | None = None, shielded: bool = False,
                     max_steps: int = 1_000, sim: Simulator | None = None) -> EvalReport:
    """Estimate reachability of the report atoms and per-agent returns.

    ``policy`` is a learned :class:`GreedyPolicy` (run without the shield,
    with ``model`` used only to track the abstract option for its keys) or
    ``"random"`` for uniform exploration, optionally shielded.  ``episodes``
    is split evenly over the seeds; episode ``k`` of seed ``s`` uses its own
    generator seeded with ``(s, k)``.
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    if shielded and model is None:
        raise ValueError("shielded evaluation needs a shield model")
    sim = sim or Simulator(game)
    atoms = report_atoms(game.n_agents)
    seeds = list(seeds)
    share = [episodes // len(seeds) + (1 if k < episodes % len(seeds) else 0) for k in range(len(seeds))]
    tracked = model if (shielded or (isinstance(policy, GreedyPolicy) and policy.tracked)) else None
    parts = [_rollouts(game, sim, policy, tracked, shielded, sd, m, max_steps, atoms)
             for sd, m in zip(seeds, share) if m > 0]
    hits = np.concatenate([p[0] for p in parts])
    rets = np.concatenate([p[1] for p in parts])
    unsafe = np.concatenate([p[2] for p in parts])
    per_seed = []
    for sd, (h, r, _) in zip(seeds, parts):
        per_seed.append({"seed": sd, "episodes": len(h),
                         "reached": {a: float(h[:, k].mean()) for k, a in enumerate(atoms)},
                         "returns": [float(x) for x in r.mean(axis=0)]})
    N = len(hits)
    return EvalReport(
        episodes=N,
        reached={a: float(math.fsum(hits[:, k]) / N) for k, a in enumerate(atoms)},
        returns=rets.mean(axis=0),
        returns_se=rets.std(axis=0, ddof=1) / math.sqrt(N) if N > 1 else np.zeros(game.n_agents),
        per_seed=per_seed,
        unsafe=float(unsafe.mean()),
    )


def simulate_chain(chain, atom: str, episodes: int = 10_000, seed: int = 0, max_steps: int = 10_000):
    """Fraction of runs of an induced chain that reach a state labelled ``atom``."""
    m = chain.matrix.tocsr()
    cum = [np.cumsum(m.data[m.indptr[s]:m.indptr[s + 1]]) for s in range(chain.n_states)]
    idx = [m.indices[m.indptr[s]:m.indptr[s + 1]] for s in range(chain.n_states)]
    target = chain.sat(atom)
    # states that cannot reach the target end the run early
    from .checker import prob0
    dead = prob0(m, np.ones(chain.n_states, dtype=bool), target)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(episodes):
        s = chain.initial
        for _ in range(max_steps):
            if target[s]:
                hits += 1
                break
            if dead[s]:
                break
            c = cum[s]
            k = min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(c) - 1)
            s = int(idx[s][k])
    return hits / episodes
