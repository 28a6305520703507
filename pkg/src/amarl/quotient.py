"""Stutter-bisimulation quotienting of Markov games by partition refinement.

A state matches a class distribution when it can stutter inside its own block
through deterministic steps and then take one joint action whose successor
distribution, projected onto blocks, equals the target.  This restriction can
only refuse merges, so every partition it reports as stable is a genuine
stutter bisimulation.
"""
from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from .game import MarkovGame, ModelError

SAFE, OPTIMAL = "safe", "optimal"


class DegenerateSplitError(ModelError):
    pass


class UnstablePartitionError(ModelError):
    pass


@dataclass(eq=False)
class Partition:
    blocks: list[frozenset]
    block_of: np.ndarray

    @classmethod
    def from_blocks(cls, blocks, n_states: int) -> "Partition":
        block_of = np.full(n_states, -1, dtype=np.int64)
        out = []
        for b, members in enumerate(blocks):
            members = frozenset(int(s) for s in members)
            if not members:
                raise ModelError("empty block")
            for s in members:
                if block_of[s] != -1:
                    raise ModelError(f"state {s} in two blocks")
                block_of[s] = b
            out.append(members)
        if np.any(block_of < 0):
            raise ModelError("blocks do not cover the state space")
        return cls(out, block_of)

    def __len__(self) -> int:
        return len(self.blocks)

    def as_sets(self) -> set[frozenset]:
        return set(self.blocks)


def class_distribution(game: MarkovGame, block_of, row: int) -> tuple:
    """Project a row onto blocks: sorted ``(block, mass)`` pairs.

    Masses are exactly-rounded sums so equal multisets give equal keys
    regardless of summation order.
    """
    succ, prob = game.entries(row)
    acc = defaultdict(list)
    for t, p in zip(succ, prob):
        acc[int(block_of[t])].append(float(p))
    return tuple((b, math.fsum(ps)) for b, ps in sorted(acc.items()))


def _row_order(game: MarkovGame, s: int) -> list[int]:
    return sorted(game.rows_of(s), key=lambda r: game.row_action[r])


def _deterministic_target(game: MarkovGame, row: int):
    lo, hi = game.entry_start[row], game.entry_start[row + 1]
    if hi - lo == 1 and game.prob[lo] == 1.0:
        return int(game.succ[lo])
    return None


class _BlockView:
    """Per-block matching data: distinct class distributions and stutter edges."""

    def __init__(self, game: MarkovGame, block_of, members):
        self.members = sorted(members)
        member_set = frozenset(members)
        self.member_set = member_set
        self.direct = {}  # distribution -> set of states realizing it in one step
        self.first = {}   # distribution -> (state, row) first in search order
        self.order = []   # (state, row, distribution) in search order
        self.back = defaultdict(list)  # t -> [(s, row)] deterministic stutter steps s -> t
        for s in self.members:
            for r in _row_order(game, s):
                key = class_distribution(game, block_of, r)
                self.order.append((s, r, key))
                self.direct.setdefault(key, set()).add(s)
                self.first.setdefault(key, (s, r))
                t = _deterministic_target(game, r)
                if t is not None and t != s and t in member_set:
                    self.back[t].append((s, r))
        self._sat = {}

    def sat(self, key) -> frozenset:
        if key not in self._sat:
            self._sat[key] = frozenset(self.next_hop(key))
        return self._sat[key]

    def next_hop(self, key) -> dict:
        """Backward BFS from the direct matchers of ``key``.

        Maps each matching state to the stutter row it should take next, or
        None when it realizes ``key`` directly.
        """
        direct = self.direct.get(key, ())
        hop = {s: None for s in sorted(direct)}
        queue = deque(sorted(direct))
        while queue:
            t = queue.popleft()
            for s, r in self.back.get(t, ()):
                if s not in hop:
                    hop[s] = r
                    queue.append(s)
        return hop


def initial_partition(game: MarkovGame) -> Partition:
    """Group states with identical label sets, ordered by first occurrence."""
    groups = {}
    for s, lab in enumerate(game.labels):
        groups.setdefault(lab, []).append(s)
    return Partition.from_blocks(list(groups.values()), game.n_states)


def match_set(game: MarkovGame, partition: Partition, block, target) -> frozenset:
    """States of ``block`` that can mimic the class distribution ``target``."""
    members = partition.blocks[block] if isinstance(block, (int, np.integer)) else block
    view = _BlockView(game, partition.block_of, members)
    return view.sat(_normalize_target(target))


def _normalize_target(target) -> tuple:
    items = target.items() if isinstance(target, dict) else target
    return tuple(sorted((int(b), float(p)) for b, p in items if p > 0))


@dataclass(frozen=True)
class SplitterCertificate:
    block: int
    state: int
    action: object
    target: tuple
    sat: frozenset


def _block_splitter(game, partition, b, view=None):
    members = partition.blocks[b]
    if len(members) < 2:
        return None
    view = view or _BlockView(game, partition.block_of, members)
    for s, r, key in view.order:
        sat = view.sat(key)
        if len(sat) < len(members):
            return SplitterCertificate(b, s, game.row_action[r], key, sat)
    return None


def find_splitter(game: MarkovGame, partition: Partition):
    """First splitter in (block id, state id, joint action) order, or None."""
    for b in range(len(partition.blocks)):
        cert = _block_splitter(game, partition, b)
        if cert is not None:
            return cert
    return None


def split(block, certificate: SplitterCertificate) -> tuple[frozenset, frozenset]:
    block = frozenset(block)
    inside = block & certificate.sat
    outside = block - certificate.sat
    if not inside or not outside:
        raise DegenerateSplitError("splitter does not divide the block")
    return inside, outside


def refine(partition: Partition, certificate: SplitterCertificate) -> Partition:
    """Replace the certified block by its two halves; the outside half gets a new id."""
    b = certificate.block
    inside, outside = split(partition.blocks[b], certificate)
    blocks = list(partition.blocks)
    blocks[b] = inside
    blocks.append(outside)
    block_of = partition.block_of.copy()
    block_of[list(outside)] = len(blocks) - 1
    return Partition(blocks, block_of)


def _predecessors(game: MarkovGame) -> list[np.ndarray]:
    owner = np.repeat(np.arange(game.n_states), np.diff(game.row_start))
    entry_owner = np.repeat(owner, np.diff(game.entry_start))
    order = np.argsort(game.succ, kind="stable")
    starts = np.searchsorted(game.succ[order], np.arange(game.n_states + 1))
    src = entry_owner[order]
    return [src[starts[t]:starts[t + 1]] for t in range(game.n_states)]


def quotient(game: MarkovGame, trace: list | None = None) -> Partition:
    """Coarsest stable refinement of the label partition.

    Blocks are re-examined only when one of their successor blocks changed.
    If ``trace`` is given, every applied certificate is appended to it.
    """
    part = initial_partition(game)
    preds = _predecessors(game)
    dirty = set(range(len(part.blocks)))
    while dirty:
        b = min(dirty)
        dirty.discard(b)
        cert = _block_splitter(game, part, b)
        if cert is None:
            continue
        old = part.blocks[b]
        part = refine(part, cert)
        if trace is not None:
            trace.append(cert)
        dirty.update((b, len(part.blocks) - 1))
        for t in old:
            dirty.update(int(part.block_of[p]) for p in preds[t])
    return part


def is_stable(game: MarkovGame, partition: Partition) -> bool:
    return find_splitter(game, partition) is None


# --- abstract Markov games ----------------------------------------------------

@dataclass(eq=False)
class AbstractOption:
    name: str
    family: object
    variants: dict          # risk member -> class distribution
    member: object          # member installed in this AMG
    rewards: dict           # target block -> team reward conditioned on landing there
    realizations: dict = field(default_factory=dict, repr=False)  # state -> [(state, action)]

    @property
    def distribution(self) -> tuple:
        return self.variants[self.member]

    def support(self) -> frozenset:
        return frozenset(b for b, _ in self.distribution)


@dataclass(eq=False)
class AbstractMG:
    """Abstract game whose states are blocks and whose actions are joint options."""

    game: MarkovGame
    mode: str
    block_members: list[tuple]
    options: list[list[AbstractOption]]
    weights: np.ndarray
    block_of: np.ndarray | None = None

    @property
    def n_states(self) -> int:
        return self.game.n_states

    def option(self, block: int, name: str) -> AbstractOption:
        for o in self.options[block]:
            if o.name == name:
                return o
        raise KeyError(f"block {block} has no option {name!r}")

    def option_names(self, block: int) -> list[str]:
        return [o.name for o in self.options[block]]

    def support(self, block: int, name: str) -> frozenset:
        return self.option(block, name).support()


def _family_key(game, row, key):
    tag = game.risk.get(row)
    if tag is None:
        return ("plain", key), None
    family, member = tag
    return ("risk", family, tuple(b for b, _ in key)), member


def _select(members, mode):
    ranked = sorted(members)
    return ranked[-1] if mode == SAFE else ranked[0]


def build_amg(game: MarkovGame, partition: Partition, mode: str = SAFE,
              check_stable: bool = True) -> AbstractMG:
    """Assemble the safe or optimal abstract game over a stable partition.

    Options are the distinct class distributions of each block; risk-tagged
    variants of the same transition family collapse into one option whose
    probabilities are the riskiest (safe) or least risky (optimal) member.
    Rewards are per (block, option, target block) team rewards and do not
    depend on the mode.
    """
    if mode not in (SAFE, OPTIMAL):
        raise ValueError(f"mode must be {SAFE!r} or {OPTIMAL!r}")
    block_of = partition.block_of
    n_blocks = len(partition.blocks)
    weights = np.zeros(game.n_states)
    all_options, rows = [], []
    for b, members in enumerate(partition.blocks):
        view = _BlockView(game, block_of, members)
        weights[list(members)] = 1.0 / len(members)
        families = {}
        for s, r, key in view.order:
            if check_stable and len(view.sat(key)) != len(members):
                raise UnstablePartitionError(
                    f"block {b} is not stable: state {game.state_ids[s]!r} action "
                    f"{game.row_action[r]!r} is a splitter")
            fam, member = _family_key(game, r, key)
            families.setdefault(fam, {}).setdefault(member, key)
        options = []
        for k, (fam, variants) in enumerate(families.items()):
            member = _select(variants, mode) if fam[0] == "risk" else None
            reward_member = _select(variants, OPTIMAL) if fam[0] == "risk" else None
            paths = _realizations(game, view, variants[member])
            reward_paths = paths if reward_member == member else _realizations(
                game, view, variants[reward_member])
            rewards = _option_rewards(game, block_of, variants[reward_member], reward_paths)
            options.append(AbstractOption(
                name=f"o{k}", family=fam, variants=dict(variants), member=member,
                rewards=rewards, realizations=paths))
            dist = {t: p for t, p in variants[member]}
            rvec = {t: (rewards.get(t, 0.0),) * game.n_agents for t in dist}
            rows.append((b, f"o{k}", dist, rvec, None))
        all_options.append(options)
    labels = [game.labels[min(m)] for m in partition.blocks]
    abstract = MarkovGame.from_rows(
        game.n_agents,
        [f"b{b}" for b in range(n_blocks)],
        [[] for _ in range(game.n_agents)],
        rows,
        labels=labels,
        agent_atoms=game.agent_atoms,
        global_atoms=game.global_atoms,
        gamma=game.gamma,
        initial=int(block_of[game.initial]),
        cooperative=True,
    )
    return AbstractMG(
        game=abstract,
        mode=mode,
        block_members=[tuple(sorted(m)) for m in partition.blocks],
        options=all_options,
        weights=weights,
        block_of=block_of.copy(),
    )


def _realizations(game, view: _BlockView, key) -> dict:
    """For every member: stutter steps then the exit action realizing ``key``."""
    hop = view.next_hop(key)
    exit_row = {}
    for s, r, k in view.order:
        if k == key and s not in exit_row:
            exit_row[s] = r
    out = {}
    for s in view.members:
        path, cur = [], s
        while hop[cur] is not None:
            r = hop[cur]
            path.append((cur, r))
            cur = _deterministic_target(game, r)
        path.append((cur, exit_row[cur]))
        out[s] = path
    return out


def _option_rewards(game, block_of, key, paths) -> dict:
    """Mean over members of the team reward, conditioned on the landing block."""
    totals = defaultdict(list)
    for s, path in paths.items():
        stutter = 0.0
        for _, r in path[:-1]:
            stutter += float(game.team_reward(game.reward[game.entry_start[r]]))
        r = path[-1][1]
        lo, hi = game.entry_start[r], game.entry_start[r + 1]
        mass, gain = defaultdict(float), defaultdict(float)
        for k in range(lo, hi):
            t = int(block_of[game.succ[k]])
            mass[t] += game.prob[k]
            gain[t] += game.prob[k] * float(game.team_reward(game.reward[k]))
        for t, _ in key:
            totals[t].append(stutter + (gain[t] / mass[t] if mass[t] > 0 else 0.0))
    return {t: math.fsum(v) / len(v) for t, v in totals.items()}


def disjoint_union(g1: MarkovGame, g2: MarkovGame, prefixes=("", "")) -> MarkovGame:
    """Both games side by side; used to relate states across two models."""
    if g1.n_agents != g2.n_agents:
        raise ModelError("games have different numbers of agents")
    rows, ids, labels = [], [], []
    for offset, g, pre in ((0, g1, prefixes[0]), (g1.n_states, g2, prefixes[1])):
        ids.extend(pre + name for name in g.state_ids)
        labels.extend(g.labels)
        for s in range(g.n_states):
            for r in g.rows_of(s):
                succ, prob = g.entries(r)
                lo = g.entry_start[r]
                dist = {int(t) + offset: float(p) for t, p in zip(succ, prob)}
                rew = {int(t) + offset: tuple(g.reward[lo + k]) for k, t in enumerate(succ)}
                rows.append((s + offset, (offset, g.row_action[r]), dist, rew, None))
    return MarkovGame.from_rows(
        g1.n_agents, ids, [[] for _ in range(g1.n_agents)], rows, labels,
        agent_atoms=[a | b for a, b in zip(g1.agent_atoms, g2.agent_atoms)],
        global_atoms=g1.global_atoms | g2.global_atoms,
        gamma=g1.gamma, initial=g1.initial)


def bisimulation_classes(g1: MarkovGame, g2: MarkovGame, prefixes=("", "")) -> list[set[str]]:
    """Equivalence classes over the states of both games (by state id)."""
    union = disjoint_union(g1, g2, prefixes)
    part = quotient(union)
    return [{union.state_ids[s] for s in block} for block in part.blocks]


def amg_to_dict(amg: AbstractMG, concrete: MarkovGame | None = None) -> dict:
    from .game import game_to_dict, _jsonable

    out = game_to_dict(amg.game)
    out["mode"] = amg.mode
    out["block_member_index"] = [list(map(int, m)) for m in amg.block_members]
    if concrete is not None:
        out["block_members"] = [[concrete.state_ids[s] for s in m] for m in amg.block_members]
        out["weights"] = {concrete.state_ids[s]: float(w) for s, w in enumerate(amg.weights)}
    out["options"] = [
        [{"name": o.name, "family": _jsonable(o.family), "member": _jsonable(o.member),
          "variants": [{"member": _jsonable(m), "distribution": [[b, p] for b, p in d]}
                       for m, d in o.variants.items()],
          "rewards": {str(t): v for t, v in o.rewards.items()}}
         for o in opts]
        for opts in amg.options
    ]
    return out


def amg_from_dict(data: dict) -> AbstractMG:
    from .game import game_from_dict, _hashable

    game = game_from_dict(data)
    members = [tuple(m) for m in data.get("block_member_index", [])]
    n_concrete = sum(len(m) for m in members)
    block_of = np.zeros(n_concrete, dtype=np.int64)
    weights = np.zeros(n_concrete)
    for b, m in enumerate(members):
        block_of[list(m)] = b
        weights[list(m)] = 1.0 / len(m)
    options = []
    for opts in data["options"]:
        block_opts = []
        for o in opts:
            variants = {_hashable(v["member"]): tuple((int(b), float(p)) for b, p in v["distribution"])
                        for v in o["variants"]}
            block_opts.append(AbstractOption(
                name=o["name"], family=_hashable(o["family"]), variants=variants,
                member=_hashable(o["member"]),
                rewards={int(t): float(v) for t, v in o["rewards"].items()}))
        options.append(block_opts)
    return AbstractMG(game=game, mode=data.get("mode", SAFE), block_members=members,
                      options=options, weights=weights, block_of=block_of if members else None)
