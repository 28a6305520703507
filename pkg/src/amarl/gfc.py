"""Guarded flag collection: grid specs, explicit Markov games and direct abstract games.

Each agent's position is a cell index, ``C`` once captured, or ``C + 1`` once
it has reached the goal area (``C`` = number of non-goal cells).  Crossing a
monitored door succeeds with probability ``1 - d`` and captures the agent
with probability ``d``, where ``d`` depends on the exposure of the door cell.
"""
from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .game import IDLE, MarkovGame, ModelError
from .quotient import OPTIMAL, SAFE, AbstractMG, AbstractOption

MOVES = {"up": (0, -1), "down": (0, 1), "left": (-1, 0), "right": (1, 0), IDLE: (0, 0)}
ACTIONS = ("up", "down", "left", "right", IDLE)
EXPOSURES = ("hidden", "partial", "direct")       # index = risk rank
DEFAULT_CAPACITY = 2_000_000
FIXTURES = Path(__file__).parent / "fixtures"


class CapacityError(ModelError):
    def __init__(self, count, capacity):
        super().__init__(f"state count {count} exceeds capacity {capacity}")
        self.count = count


class SpecError(ModelError):
    pass


def _pair(a, b):
    return tuple(sorted((a, b)))


@dataclass
class GridSpec:
    name: str
    areas: dict                     # area -> list of (x, y)
    goal: str
    doors: list                     # dicts: cell, pair, exposure
    cameras: dict                   # sorted pair -> {exposure: probability}
    flags: list                     # (flag id, cell)
    spawns: list                    # one cell per agent
    max_steps: int = 50
    gamma: float = 0.95

    def __post_init__(self):
        self.area_of = {}
        for a, cells in self.areas.items():
            for c in cells:
                if c in self.area_of:
                    raise SpecError(f"cell {c} belongs to {self.area_of[c]} and {a}")
                self.area_of[c] = a
        self.cells = [c for a in self.areas if a != self.goal for c in self.areas[a]]
        self.cell_index = {c: i for i, c in enumerate(self.cells)}
        self.crossings = self._crossings()

    @property
    def n_agents(self) -> int:
        return len(self.spawns)

    @property
    def captured(self) -> int:
        return len(self.cells)

    @property
    def at_goal(self) -> int:
        return len(self.cells) + 1

    @property
    def rooms(self) -> list[str]:
        return [a for a in self.areas if a != self.goal]

    def _crossings(self) -> dict:
        """(from cell, to cell) -> (from area, to area, exposure rank)."""
        out = {}
        for d in self.doors:
            cell, (a, b) = d["cell"], d["pair"]
            if self.area_of.get(cell) != a:
                raise SpecError(f"door cell {cell} is not in area {a}")
            nbrs = [(cell[0] + dx, cell[1] + dy) for dx, dy in list(MOVES.values())[:4]]
            other = [n for n in nbrs if self.area_of.get(n) == b]
            if len(other) != 1:
                raise SpecError(f"door cell {cell} must touch exactly one cell of {b}, found {len(other)}")
            rank = EXPOSURES.index(d["exposure"])
            out[(cell, other[0])] = (a, b, rank)
            out[(other[0], cell)] = (b, a, rank)
        return out

    def camera(self, a, b, rank):
        probs = self.cameras.get(_pair(a, b))
        return None if probs is None else probs[EXPOSURES[rank]]

    def state_count(self) -> int:
        return (len(self.cells) + 2) ** self.n_agents * 2 ** len(self.flags)

    def validate(self) -> list[str]:
        errs = []
        if self.goal not in self.areas:
            errs.append(f"goal area {self.goal!r} is not defined")
        for d in self.doors:
            if d.get("exposure") not in EXPOSURES:
                errs.append(f"door {d['cell']} has exposure {d.get('exposure')!r}")
        for pair, probs in self.cameras.items():
            for e in EXPOSURES:
                p = probs.get(e)
                if p is None or not 0.0 <= p <= 1.0:
                    errs.append(f"camera {pair} {e} probability {p!r} not in [0,1]")
        door_cells = {c for k in self.crossings for c in k}
        flag_cells = set()
        for fid, cell in self.flags:
            if cell not in self.cell_index:
                errs.append(f"flag {fid} at {cell} is not on a room cell")
            if cell in door_cells:
                errs.append(f"flag {fid} at {cell} sits on a crossing")
            if cell in self.spawns:
                errs.append(f"flag {fid} at {cell} sits on a spawn cell")
            flag_cells.add(cell)
        for i, s in enumerate(self.spawns):
            if s not in self.cell_index:
                errs.append(f"spawn of agent {i + 1} at {s} is not on a room cell")
        for a in self.rooms:
            free = [c for c in self.areas[a] if c not in flag_cells]
            if free and not _connected(free):
                errs.append(f"area {a} is disconnected once its flag cells are removed")
        return errs

    @classmethod
    def from_dict(cls, data) -> "GridSpec":
        areas = {}
        for name, cells in data["areas"].items():
            if isinstance(cells, dict):
                x0, y0, x1, y1 = cells["rect"]
                areas[name] = [(x, y) for y in range(y0, y1 + 1) for x in range(x0, x1 + 1)]
            else:
                areas[name] = [tuple(c) for c in cells]
        doors = [{"cell": tuple(d["cell"]), "pair": tuple(d["pair"]), "exposure": d["exposure"]}
                 for d in data.get("doors", [])]
        cameras = {}
        for c in data.get("cameras", []):
            cameras[_pair(*c["pair"])] = {e: float(c[e]) for e in EXPOSURES}
        flags = [(f["id"], tuple(f["cell"])) for f in data.get("flags", [])]
        spec = cls(data.get("name", "gfc"), areas, data["goal"], doors, cameras, flags,
                   [tuple(s) for s in data["spawns"]], int(data.get("max_steps", 50)),
                   float(data.get("gamma", 0.95)))
        errs = spec.validate()
        if errs:
            raise SpecError("; ".join(errs))
        return spec

    @classmethod
    def load(cls, path) -> "GridSpec":
        p = Path(path)
        if not p.exists() and (FIXTURES / f"{path}.json").exists():
            p = FIXTURES / f"{path}.json"
        return cls.from_dict(json.loads(p.read_text()))

    def with_agents(self, n: int) -> "GridSpec":
        return GridSpec(self.name, self.areas, self.goal, self.doors, self.cameras,
                        self.flags, self.spawns[:n], self.max_steps, self.gamma)


def _connected(cells) -> bool:
    cells = set(cells)
    start = next(iter(cells))
    seen, queue = {start}, deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            n = (x + dx, y + dy)
            if n in cells and n not in seen:
                seen.add(n)
                queue.append(n)
    return len(seen) == len(cells)


# --- labels ---------------------------------------------------------------------

def atom_partition(spec: GridSpec):
    agent_atoms = []
    for i in range(1, spec.n_agents + 1):
        atoms = {f"area_{i}={a}" for a in spec.rooms} | {f"captured_{i}", f"goal_{i}", f"end_{i}"}
        agent_atoms.append(frozenset(atoms))
    global_atoms = frozenset({f"flag_{fid}" for fid, _ in spec.flags}
                             | {"captured_all", "goal_all", "end_all"})
    return agent_atoms, global_atoms


def status_labels(spec: GridSpec, statuses, flags: int) -> frozenset:
    """Labels from per-agent status (area name, 'captured' or 'goal') and the flag mask."""
    out = set()
    for i, st in enumerate(statuses, 1):
        if st == "captured":
            out |= {f"captured_{i}", f"end_{i}"}
        elif st == "goal":
            out |= {f"goal_{i}", f"end_{i}"}
        else:
            out.add(f"area_{i}={st}")
    for k, (fid, _) in enumerate(spec.flags):
        if flags >> k & 1:
            out.add(f"flag_{fid}")
    if all(st == "captured" for st in statuses):
        out.add("captured_all")
    if all(st == "goal" for st in statuses):
        out.add("goal_all")
    if all(st in ("captured", "goal") for st in statuses):
        out.add("end_all")
    return frozenset(out)


# --- explicit game ------------------------------------------------------------

class _Dynamics:
    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.flag_bit = {cell: k for k, (_, cell) in enumerate(spec.flags)}
        self.status = [spec.area_of[c] for c in spec.cells] + ["captured", "goal"]
        self.outcomes = {}      # (value, action index) -> [(prob, value, crossing or None)]
        for v, c in enumerate(spec.cells):
            for k, name in enumerate(ACTIONS):
                self.outcomes[(v, k)] = self._move(c, name)

    def _move(self, cell, name):
        spec = self.spec
        dx, dy = MOVES[name]
        t = (cell[0] + dx, cell[1] + dy)
        here = spec.area_of[cell]
        stay = [(1.0, spec.cell_index[cell], None)]
        if name == IDLE or t not in spec.area_of:
            return stay
        there = spec.area_of[t]
        land = spec.at_goal if there == spec.goal else spec.cell_index[t]
        if there == here:
            return [(1.0, land, None)]
        cross = spec.crossings.get((cell, t))
        if cross is None:
            return stay
        a, b, rank = cross
        d = spec.camera(a, b, rank)
        if d is None:
            return [(1.0, land, None)]
        return [(1.0 - d, land, (a, b, rank)), (d, spec.captured, (a, b, rank))]

    def available(self, v):
        return list(range(len(ACTIONS))) if v < self.spec.captured else [ACTIONS.index(IDLE)]

    def labels(self, values, flags) -> frozenset:
        return status_labels(self.spec, [self.status[v] for v in values], flags)

    def joint(self, values, flags, joint_action):
        """Successor distribution of a joint action, with rewards and the risk tag."""
        spec = self.spec
        n = len(values)
        per_agent = [self.outcomes[(v, a)] if v < spec.captured else [(1.0, v, None)]
                     for v, a in zip(values, joint_action)]
        family = tuple(o[0][2][:2] if o[0][2] is not None else None for o in per_agent)
        member = tuple(o[0][2][2] if o[0][2] is not None else 0 for o in per_agent)
        risk = (family, member) if any(f is not None for f in family) else None
        succ = {}
        for combo in itertools.product(*per_agent):
            p = 1.0
            for o in combo:
                p *= o[0]
            new = tuple(o[1] for o in combo)
            reward = np.zeros(n)
            mask = flags
            for i, (old, nv) in enumerate(zip(values, new)):
                if nv == old or nv >= spec.captured:
                    if nv == spec.at_goal and old != spec.at_goal:
                        reward[i] += 1.0
                    continue
                bit = self.flag_bit.get(spec.cells[nv])
                if bit is not None and not mask >> bit & 1:
                    mask |= 1 << bit
                    reward[i] += 1.0
            key = (new, mask)
            if key in succ:
                raise ModelError("distinct outcomes reached the same state")
            succ[key] = (p, reward)
        return succ, risk


def encode(spec: GridSpec, values, flags) -> str:
    parts = []
    for v in values:
        if v == spec.captured:
            parts.append("X")
        elif v == spec.at_goal:
            parts.append("G")
        else:
            x, y = spec.cells[v]
            parts.append(f"{x},{y}")
    return "|".join(parts) + f"|f{flags}"


def build_mg(spec: GridSpec, capacity: int = DEFAULT_CAPACITY) -> MarkovGame:
    """Explicit Markov game over the states reachable from the spawn cells."""
    count = spec.state_count()
    if count > capacity:
        raise CapacityError(count, capacity)
    dyn = _Dynamics(spec)
    start = (tuple(spec.cell_index[s] for s in spec.spawns), 0)
    index = {start: 0}
    order = [start]
    rows = []
    i = 0
    while i < len(order):
        values, flags = order[i]
        for joint in itertools.product(*(dyn.available(v) for v in values)):
            succ, risk = dyn.joint(values, flags, joint)
            dist, rew = {}, {}
            for key, (p, r) in succ.items():
                if key not in index:
                    index[key] = len(order)
                    order.append(key)
                dist[index[key]] = p
                rew[index[key]] = r
            rows.append((i, joint, dist, rew, risk))
        i += 1
    agent_atoms, global_atoms = atom_partition(spec)
    game = MarkovGame.from_rows(
        spec.n_agents,
        [encode(spec, v, f) for v, f in order],
        [list(ACTIONS) for _ in range(spec.n_agents)],
        rows,
        labels=[dyn.labels(v, f) for v, f in order],
        agent_atoms=agent_atoms,
        global_atoms=global_atoms,
        gamma=spec.gamma,
        initial=0,
    )
    game.spec_states = order
    return game


def decode(game: MarkovGame, s: int):
    """(per-agent values, flag mask) of a state of a game built by :func:`build_mg`."""
    return game.spec_states[s]


# --- direct abstract game -------------------------------------------------------

def _agent_choices(spec: GridSpec, dyn: _Dynamics, status, flags):
    """Abstract choices of one agent: (kind, outcomes by risk rank) pairs.

    Outcomes are lists of (probability, new status, collected flag bit or None).
    """
    if status in ("captured", "goal"):
        return [("stay", {None: [(1.0, status, None)]})]
    out = [("stay", {None: [(1.0, status, None)]})]
    for k, (fid, cell) in enumerate(spec.flags):
        if spec.area_of[cell] == status and not flags >> k & 1:
            out.append((("flag", fid), {None: [(1.0, status, k)]}))
    targets = {}
    for (c, t), (a, b, rank) in spec.crossings.items():
        if a == status:
            targets.setdefault(b, set()).add(rank)
    for b in sorted(targets):
        land = "goal" if b == spec.goal else b
        variants = {}
        for rank in sorted(targets[b]):
            d = spec.camera(status, b, rank)
            variants[rank if d is not None else None] = (
                [(1.0, land, None)] if d is None else [(1.0 - d, land, None), (d, "captured", None)])
        if None in variants:
            out.append((("to", b), {None: variants[None]}))
        else:
            out.append((("cross", status, b), variants))
    return out


def direct_amg(spec: GridSpec):
    """Safe and optimal abstract games built from the layout alone.

    Abstract states are (per-agent area or status, flag mask) reachable from
    the spawn configuration.  Joint options are products of per-agent choices
    (stay, collect a flag in the area, move to an adjacent area); choices with
    the same class distribution are merged.
    """
    dyn = _Dynamics(spec)
    start = (tuple(spec.area_of[s] for s in spec.spawns), 0)
    index = {start: 0}
    order = [start]
    options = {SAFE: [], OPTIMAL: []}
    rows = {SAFE: [], OPTIMAL: []}
    i = 0
    while i < len(order):
        statuses, flags = order[i]
        choices = [_agent_choices(spec, dyn, st, flags) for st in statuses]
        families = {}
        for combo in itertools.product(*choices):
            crossing = tuple(ch[0][1:] if ch[0][0] == "cross" else None for ch in combo)
            members = itertools.product(*(sorted(ch[1], key=lambda r: -1 if r is None else r)
                                          for ch in combo))
            for member in members:
                dist, rew = _abstract_outcome(spec, statuses, flags,
                                              [ch[1][m] for ch, m in zip(combo, member)])
                for key in dist:
                    if key not in index:
                        index[key] = len(order)
                        order.append(key)
                d = tuple(sorted((index[k], p) for k, p in dist.items()))
                r = {index[k]: v for k, v in rew.items()}
                if any(c is not None for c in crossing):
                    fam = ("risk", crossing, tuple(b for b, _ in d))
                    rank = tuple(0 if m is None else m for m in member)
                else:
                    fam, rank = ("plain", d), None
                families.setdefault(fam, {}).setdefault(rank, (d, r))
        for mode in (SAFE, OPTIMAL):
            opts = []
            for k, (fam, variants) in enumerate(families.items()):
                ranks = sorted(variants, key=lambda m: () if m is None else m)
                member = ranks[-1] if mode == SAFE else ranks[0]
                reward_member = ranks[0]
                d = variants[member][0]
                opts.append(AbstractOption(
                    name=f"o{k}", family=fam, variants={m: v[0] for m, v in variants.items()},
                    member=member, rewards=dict(variants[reward_member][1])))
                rows[mode].append((i, f"o{k}", dict(d),
                                   {t: (opts[-1].rewards.get(t, 0.0),) * spec.n_agents for t, _ in d},
                                   None))
            options[mode].append(opts)
        i += 1
    agent_atoms, global_atoms = atom_partition(spec)
    labels = [status_labels(spec, st, f) for st, f in order]
    out = []
    for mode in (SAFE, OPTIMAL):
        g = MarkovGame.from_rows(
            spec.n_agents, [f"b{k}" for k in range(len(order))],
            [[] for _ in range(spec.n_agents)], rows[mode], labels=labels,
            agent_atoms=agent_atoms, global_atoms=global_atoms, gamma=spec.gamma,
            initial=0, cooperative=True)
        amg = AbstractMG(game=g, mode=mode, block_members=[], options=options[mode],
                         weights=np.zeros(0))
        amg.abstract_states = order
        out.append(amg)
    return tuple(out)


def _abstract_outcome(spec, statuses, flags, per_agent):
    dist, rew = {}, {}
    for combo in itertools.product(*per_agent):
        p = 1.0
        for o in combo:
            p *= o[0]
        new = tuple(o[1] for o in combo)
        mask = flags
        gain = 0.0
        for o in combo:
            if o[2] is not None and not mask >> o[2] & 1:
                mask |= 1 << o[2]
                gain += 1.0
        gain += sum(1.0 for old, nw in zip(statuses, new) if nw == "goal" and old != "goal")
        key = (new, mask)
        dist[key] = dist.get(key, 0.0) + p
        rew[key] = gain
    return dist, rew


def abstraction_map(game: MarkovGame, amg) -> np.ndarray:
    """Block of every concrete state, matched by label set."""
    if getattr(amg, "block_of", None) is not None and len(amg.block_of) == game.n_states:
        return np.asarray(amg.block_of)
    g = amg.game
    by_label = {}
    for b, lab in enumerate(g.labels):
        if lab in by_label:
            raise ModelError("abstract states do not have distinct labels")
        by_label[lab] = b
    try:
        return np.array([by_label[lab] for lab in game.labels], dtype=np.int64)
    except KeyError as e:
        raise ModelError(f"concrete labels {set(e.args[0])} have no abstract state") from None


def amg_isomorphic(a, b, tol: float = 1e-12) -> tuple[bool, str]:
    """Compare two label-partition abstract games up to block and option renaming."""
    ga, gb = a.game, b.game
    if ga.n_states != gb.n_states:
        return False, f"{ga.n_states} vs {gb.n_states} abstract states"
    pos = {lab: k for k, lab in enumerate(gb.labels)}
    if len(pos) != gb.n_states or len(set(ga.labels)) != ga.n_states:
        return False, "labels do not identify abstract states"
    try:
        m = [pos[lab] for lab in ga.labels]
    except KeyError:
        return False, "label sets differ"
    if m[ga.initial] != gb.initial:
        return False, "initial states differ"

    def rows(g, s, rename):
        out = []
        for r in g.rows_of(s):
            succ, prob = g.entries(r)
            out.append(sorted((rename(int(t)), float(p), float(g.reward[k, 0]))
                              for t, p, k in zip(succ, prob, range(g.entry_start[r], g.entry_start[r + 1]))))
        return sorted(out)

    for s in range(ga.n_states):
        ra = rows(ga, s, lambda t: m[t])
        rb = rows(gb, m[s], lambda t: t)
        if len(ra) != len(rb):
            return False, f"block {ga.state_ids[s]} has {len(ra)} vs {len(rb)} options"
        for x, y in zip(ra, rb):
            if len(x) != len(y) or any(
                    t1 != t2 or abs(p1 - p2) > tol or abs(r1 - r2) > tol
                    for (t1, p1, r1), (t2, p2, r2) in zip(x, y)):
                return False, f"block {ga.state_ids[s]} options differ: {x} vs {y}"
    return True, ""
