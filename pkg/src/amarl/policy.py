"""Abstract joint policies: sampling, verification on the safe/optimal pair, Pareto sets."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import logic as L
from .checker import check_chain, INF
from .game import induce_chain

TAGS = ("safety", "optimality", "metric")


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class AbstractJointPolicy:
    choice: dict            # block index -> option name
    seed: int = 0
    index: int = 0

    @property
    def id(self) -> str:
        return f"{self.seed}:{self.index}"

    @property
    def sort_key(self):
        return (self.seed, self.index)

    def __call__(self, block):
        return self.choice.get(int(block))

    def to_dict(self, amg=None) -> dict:
        names = (lambda b: amg.game.state_ids[b]) if amg is not None else str
        return {"id": self.id, "seed": self.seed, "index": self.index,
                "choice": {names(b): o for b, o in sorted(self.choice.items())}}

    @classmethod
    def from_dict(cls, data, amg=None):
        def idx(k):
            return amg.game.state_index(k) if amg is not None else int(k)
        return cls({idx(k): v for k, v in data["choice"].items()},
                   int(data.get("seed", 0)), int(data.get("index", 0)))


@dataclass(frozen=True)
class Constraint:
    tag: str
    text: str
    formula: object
    sense: str = "max"      # for metrics: which direction is better

    @property
    def is_query(self) -> bool:
        return getattr(self.formula, "op", "x") is None


@dataclass
class ConstraintSet:
    items: list[Constraint] = field(default_factory=list)

    @property
    def safety(self):
        return [c for c in self.items if c.tag == "safety"]

    @property
    def optimality(self):
        return [c for c in self.items if c.tag == "optimality"]

    @property
    def metrics(self) -> list[Constraint]:
        """Explicit metric queries, or the optimality bounds when none are given.

        A bound with ``<``/``<=`` is a quantity to keep low, so it ranks by its
        negated value.
        """
        explicit = [c for c in self.items if c.tag == "metric"]
        if explicit:
            return explicit
        out = []
        for c in self.optimality:
            sense = "min" if c.formula.op in ("<", "<=") else "max"
            out.append(Constraint("metric", c.text, _as_query(c.formula), sense))
        return out

    def atoms(self) -> set[str]:
        out = set()
        for c in self.items:
            out |= L.atoms(c.formula)
        return out

    def check_alphabet(self, alphabet) -> None:
        missing = sorted(self.atoms() - set(alphabet))
        if missing:
            raise ConstraintError(f"constraints mention unknown atoms: {missing}")

    @classmethod
    def parse(cls, text: str, alphabet=None) -> "ConstraintSet":
        items = []
        for row in L.read_properties(text.splitlines()):
            if len(row) == 1:
                raise ConstraintError(f"constraint {row[0]!r} lacks a tag column ({'/'.join(TAGS)})")
            tag, rest = row
            sense = "max"
            if tag == "metric":
                head, _, tail = rest.partition(" ")
                if head in ("min", "max"):
                    sense, rest = head, tail.strip()
            f = L.parse(rest)
            if not isinstance(f, (L.Prob, L.Reward)):
                raise ConstraintError(f"{rest!r} is not a P or R operator")
            if tag == "metric" and f.op is not None:
                raise ConstraintError(f"metric {rest!r} must be a '=?' query")
            if tag != "metric" and f.op is None:
                raise ConstraintError(f"{tag} constraint {rest!r} needs a bound")
            if tag == "safety" and not L.is_weak(f):
                raise ConstraintError(f"safety constraint {rest!r} is not in the weak fragment")
            items.append(Constraint(tag, rest, f, sense))
        cs = cls(items)
        if alphabet is not None:
            cs.check_alphabet(alphabet)
        return cs

    @classmethod
    def load(cls, path, alphabet=None) -> "ConstraintSet":
        return cls.parse(Path(path).read_text(), alphabet)


def _as_query(f):
    if isinstance(f, L.Prob):
        return L.Prob(None, None, f.path, f.opt)
    return L.Reward(None, None, f.kind, f.structure, f.opt)


def amg_alphabet(amg) -> set[str]:
    g = getattr(amg, "game", amg)
    out = set(g.global_atoms)
    for atoms in g.agent_atoms:
        out |= set(atoms)
    for lab in g.labels:
        out |= set(lab)
    return out


# --- sampling -------------------------------------------------------------

def restrict(amg, choice: dict) -> dict:
    """Keep only the blocks reachable from the initial block under ``choice``."""
    g = getattr(amg, "game", amg)
    seen = {g.initial}
    stack = [g.initial]
    while stack:
        b = stack.pop()
        r = g.row_index(b, choice[b])
        for t in g.entries(r)[0]:
            t = int(t)
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return {b: choice[b] for b in sorted(seen)}


def sample_policies(amg, count: int, seed: int = 0) -> list[AbstractJointPolicy]:
    """Uniform i.i.d. option choice per block, restricted to the reachable part, deduplicated."""
    if count < 1:
        raise ValueError("count must be at least 1")
    g = getattr(amg, "game", amg)
    rng = np.random.default_rng(seed)
    options = [g.available(b) for b in range(g.n_states)]
    sizes = np.array([len(o) for o in options])
    out, seen = [], set()
    for i in range(count):
        picks = (rng.random(g.n_states) * sizes).astype(np.int64)
        full = {b: options[b][int(k)] for b, k in enumerate(picks)}
        choice = restrict(g, full)
        key = tuple(sorted(choice.items()))
        if key in seen:
            continue
        seen.add(key)
        out.append(AbstractJointPolicy(choice, seed, i))
    return out


# --- verification -------------------------------------------------------------

@dataclass
class PolicyEvaluation:
    policy: AbstractJointPolicy
    results: list[dict]          # one per constraint: tag, property, value, satisfied
    metrics: list[float]
    senses: list[str]
    safe: bool
    admissible: bool

    @property
    def id(self):
        return self.policy.id

    def signed(self) -> tuple:
        """Metric vector where larger is better; non-finite values rank worst."""
        out = []
        for v, s in zip(self.metrics, self.senses):
            x = v if s == "max" else -v
            out.append(x if math.isfinite(x) else -INF)
        return tuple(out)

    def to_dict(self, amg=None) -> dict:
        return {**self.policy.to_dict(amg),
                "safe": self.safe, "admissible": self.admissible,
                "constraints": self.results,
                "metrics": [_num(v) for v in self.metrics], "senses": list(self.senses)}

    @classmethod
    def from_dict(cls, data, amg=None) -> "PolicyEvaluation":
        metrics = [float(v) if v is not None else math.nan for v in data["metrics"]]
        return cls(AbstractJointPolicy.from_dict(data, amg), data["constraints"], metrics,
                   data.get("senses", ["max"] * len(metrics)), data["safe"], data["admissible"])


def _num(v):
    if v is None:
        return None
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def verify_policy(policy, safe_amg, optimal_amg, constraints: ConstraintSet) -> PolicyEvaluation:
    choose = policy if callable(policy) else (lambda b: policy.get(int(b)))
    chains = {}

    def chain(mode):
        if mode not in chains:
            chains[mode] = induce_chain(safe_amg if mode == "safe" else optimal_amg, choose)
        return chains[mode]

    results = []
    for c in constraints.safety + constraints.optimality:
        r = check_chain(chain("safe" if c.tag == "safety" else "optimal"), c.formula)
        results.append({"tag": c.tag, "property": c.text, "value": _num(r.value),
                        "satisfied": bool(r.holds)})
    metrics, senses = [], []
    for m in constraints.metrics:
        metrics.append(check_chain(chain("optimal"), m.formula).value)
        senses.append(m.sense)
    safe = all(r["satisfied"] for r in results if r["tag"] == "safety")
    admissible = safe and all(r["satisfied"] for r in results)
    if not isinstance(policy, AbstractJointPolicy):
        policy = AbstractJointPolicy(dict(policy))
    return PolicyEvaluation(policy, results, metrics, senses, safe, admissible)


def dominates(a: tuple, b: tuple) -> bool:
    return all(x >= y for x, y in zip(a, b)) and any(x > y for x, y in zip(a, b))


def pareto_filter(evaluations) -> list[PolicyEvaluation]:
    """Safe evaluations not strictly dominated by another safe one, ordered by policy id."""
    safe = [e for e in evaluations if e.safe]
    vecs = [e.signed() for e in safe]
    keep = [e for e, v in zip(safe, vecs) if not any(dominates(w, v) for w in vecs)]
    return sorted(keep, key=lambda e: e.policy.sort_key)


def select(pareto, order=None) -> PolicyEvaluation | None:
    """Admissible members first, then lexicographic metric order, then policy id.

    ``order`` lists metric indices by priority (default: file order).
    """
    if not pareto:
        return None

    def key(e):
        v = e.signed()
        idx = range(len(v)) if order is None else order
        return (not e.admissible, tuple(-v[k] for k in idx), e.policy.sort_key)
    return min(pareto, key=key)


def evaluate_all(policies, safe_amg, optimal_amg, constraints) -> list[PolicyEvaluation]:
    return [verify_policy(p, safe_amg, optimal_amg, constraints) for p in policies]


def write_evaluations(path, evaluations, amg=None) -> None:
    from .game import write_atomic
    lines = [json.dumps(e.to_dict(amg), sort_keys=True) for e in evaluations]
    write_atomic(path, "\n".join(lines) + ("\n" if lines else ""))


def read_evaluations(path, amg=None) -> list[PolicyEvaluation]:
    text = Path(path).read_text()
    return [PolicyEvaluation.from_dict(json.loads(l), amg) for l in text.splitlines() if l.strip()]


def read_policy(path, amg=None) -> AbstractJointPolicy:
    data = json.loads(Path(path).read_text())
    return AbstractJointPolicy.from_dict(data, amg)
