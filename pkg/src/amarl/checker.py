"""Probabilistic model checking of induced chains and of games.

Chains are checked exactly where possible: unbounded until is reduced to a
linear system after graph-based elimination of the probability-0 and
probability-1 states.  When the remaining states form an acyclic graph the
system is solved by back-substitution, which is exact on dyadic inputs.

Games are checked adversarially: lower probability bounds use the minimum
over deterministic policies, upper bounds the maximum.
"""
from __future__ import annotations

from dataclasses import dataclass
from collections import deque

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import logic as L
from .game import InducedChain, MarkovGame

DIRECT_LIMIT = 20_000
RESIDUAL_TOL = 1e-10
VI_TOL = 1e-13
INF = float("inf")


class CheckError(ValueError):
    pass


def _as_formula(f, path=False):
    if isinstance(f, str):
        return L.parse_path(f) if path else L.parse(f)
    return f


def compare(values: np.ndarray, op: str, bound: float) -> np.ndarray:
    if op == "<":
        return values < bound
    if op == "<=":
        return values <= bound
    if op == ">":
        return values > bound
    if op == ">=":
        return values >= bound
    raise CheckError(f"unknown comparison {op!r}")


@dataclass
class CheckResult:
    formula: str
    values: np.ndarray | None     # quantitative values per state, if any
    sat: np.ndarray | None        # satisfaction per state, if the formula is boolean
    initial: int = 0

    @property
    def value(self) -> float | None:
        return None if self.values is None else float(self.values[self.initial])

    @property
    def holds(self) -> bool | None:
        return None if self.sat is None else bool(self.sat[self.initial])

    def record(self) -> dict:
        v = self.value
        return {"formula": self.formula,
                "value": None if v is None else ("inf" if v == INF else v),
                "holds": self.holds}


# --- graph helpers ------------------------------------------------------------

def _backward_closure(pred: sp.csr_matrix, seeds: np.ndarray, through: np.ndarray) -> np.ndarray:
    """States in ``seeds`` plus those in ``through`` that reach them inside ``through``."""
    out = seeds.copy()
    queue = deque(np.flatnonzero(seeds))
    while queue:
        t = queue.popleft()
        for s in pred.indices[pred.indptr[t]:pred.indptr[t + 1]]:
            if not out[s] and through[s]:
                out[s] = True
                queue.append(s)
    return out


def _pattern(m: sp.csr_matrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m)
    m.eliminate_zeros()
    return m


def prob0(matrix, s1, s2) -> np.ndarray:
    """States whose probability of ``s1 U s2`` is zero."""
    pred = _pattern(matrix).T.tocsr()
    return ~_backward_closure(pred, s2.copy(), s1 & ~s2)


def prob1(matrix, s1, s2, no=None) -> np.ndarray:
    """States whose probability of ``s1 U s2`` is one."""
    pred = _pattern(matrix).T.tocsr()
    if no is None:
        no = prob0(matrix, s1, s2)
    return ~_backward_closure(pred, no.copy(), s1 & ~s2)


def _topological(a: sp.csr_matrix):
    """Topological order of the graph of ``a`` or None if it has a cycle (self-loops count)."""
    n = a.shape[0]
    a = _pattern(a)
    indeg = np.zeros(n, dtype=int)
    np.add.at(indeg, a.indices, 1)
    queue = deque(np.flatnonzero(indeg == 0))
    order = []
    while queue:
        s = queue.popleft()
        order.append(s)
        for t in a.indices[a.indptr[s]:a.indptr[s + 1]]:
            indeg[t] -= 1
            if indeg[t] == 0:
                queue.append(t)
    return order if len(order) == n else None


def solve_linear(a: sp.csr_matrix, b: np.ndarray, method: str = "auto") -> np.ndarray:
    """Solve ``x = a x + b`` for a substochastic ``a`` with spectral radius below one.

    ``method`` is one of auto, exact (acyclic back-substitution), direct,
    iterative or value_iteration.
    """
    a = sp.csr_matrix(a)
    b = np.asarray(b, dtype=float)
    n = len(b)
    if n == 0:
        return np.zeros(0)
    if method in ("auto", "exact"):
        order = _topological(a)
        if order is not None:
            x = np.zeros(n)
            for s in reversed(order):
                lo, hi = a.indptr[s], a.indptr[s + 1]
                x[s] = b[s] + float(np.dot(a.data[lo:hi], x[a.indices[lo:hi]]))
            return x
        if method == "exact":
            raise CheckError("system is cyclic; exact back-substitution is unavailable")
        method = "direct" if n <= DIRECT_LIMIT else "iterative"
    m = (sp.identity(n, format="csc") - a.tocsc())
    if method == "direct":
        return np.asarray(spla.spsolve(m, b)).reshape(n)
    if method == "iterative":
        x, _ = spla.gmres(m, b, rtol=1e-13, atol=0.0, restart=200, maxiter=2000)
        if np.max(np.abs(m @ x - b), initial=0.0) < RESIDUAL_TOL:
            return x
        method = "value_iteration"
    if method == "value_iteration":
        x = np.zeros(n)
        for _ in range(10_000_000):
            nxt = a @ x + b
            if np.max(np.abs(nxt - x), initial=0.0) < VI_TOL * max(1.0, np.max(np.abs(nxt), initial=0.0)):
                return nxt
            x = nxt
        raise CheckError("value iteration did not converge")
    raise CheckError(f"unknown solve method {method!r}")


def until_probabilities(matrix, s1, s2, method="auto") -> np.ndarray:
    matrix = sp.csr_matrix(matrix)
    no = prob0(matrix, s1, s2)
    yes = prob1(matrix, s1, s2, no)
    maybe = np.flatnonzero(~no & ~yes)
    x = yes.astype(float)
    if len(maybe):
        sub = matrix[maybe]
        a = sub[:, maybe]
        b = np.asarray(sub[:, np.flatnonzero(yes)].sum(axis=1)).reshape(-1)
        x[maybe] = np.clip(solve_linear(a, b, method), 0.0, 1.0)
    return x


def bounded_until(matrix, s1, s2, k: int) -> np.ndarray:
    x = s2.astype(float)
    live = s1 & ~s2
    for _ in range(k):
        x = np.where(s2, 1.0, np.where(live, matrix @ x, 0.0))
    return x


def globally_probabilities(matrix, keep: np.ndarray, tol: float = 1e-14,
                           max_iter: int = 10_000_000) -> np.ndarray:
    """Probability of staying in ``keep`` forever, as a greatest fixed point.

    Independent of the until routines so the two can be checked against
    each other.
    """
    y = keep.astype(float)
    for _ in range(max_iter):
        nxt = np.where(keep, matrix @ y, 0.0)
        if np.max(np.abs(nxt - y), initial=0.0) < tol:
            return nxt
        y = nxt
    raise CheckError("greatest fixed point did not converge")


def reach_reward(matrix, rewards, target, method="auto") -> np.ndarray:
    """Expected reward accumulated before reaching ``target``; inf where reaching is not sure."""
    matrix = sp.csr_matrix(matrix)
    n = matrix.shape[0]
    sure = prob1(matrix, np.ones(n, dtype=bool), target)
    x = np.where(sure, 0.0, INF)
    rest = np.flatnonzero(sure & ~target)
    if len(rest):
        a = matrix[rest][:, rest]
        x[rest] = solve_linear(a, np.asarray(rewards, dtype=float)[rest], method)
    return x


def cumulative_reward(matrix, rewards, k: int) -> np.ndarray:
    x = np.zeros(matrix.shape[0])
    for _ in range(k):
        x = rewards + matrix @ x
    return x


def instant_reward(matrix, rewards, k: int) -> np.ndarray:
    """Expected reward of the transition taken at step ``k`` (0-based)."""
    x = np.asarray(rewards, dtype=float).copy()
    for _ in range(k):
        x = matrix @ x
    return x


# --- chains ---------------------------------------------------------------------

class _ChainChecker:
    def __init__(self, chain: InducedChain, method="auto"):
        self.chain = chain
        self.method = method
        self.n = chain.n_states
        self.matrix = sp.csr_matrix(chain.matrix)

    def sat(self, f) -> np.ndarray:
        if isinstance(f, L.Const):
            return np.full(self.n, f.value)
        if isinstance(f, L.Atom):
            return self.chain.sat(f.name)
        if isinstance(f, L.Not):
            return ~self.sat(f.arg)
        if isinstance(f, L.And):
            return self.sat(f.left) & self.sat(f.right)
        if isinstance(f, (L.Prob, L.Reward)):
            if f.op is None:
                raise CheckError(f"query {f} cannot be nested inside a formula")
            return compare(self.values(f), f.op, f.bound)
        raise CheckError(f"not a state formula: {f!r}")

    def values(self, f) -> np.ndarray:
        if isinstance(f, L.Prob):
            return self.path(f.path)
        if isinstance(f, L.Reward):
            r = self.chain.reward_vector(f.structure)
            k = f.kind
            if isinstance(k, L.Reach):
                return reach_reward(self.matrix, r, self.sat(k.target), self.method)
            if isinstance(k, L.Cumulative):
                return cumulative_reward(self.matrix, r, k.k)
            if isinstance(k, L.Instant):
                return instant_reward(self.matrix, r, k.k)
        raise CheckError(f"no quantitative value for {f!r}")

    def path(self, p) -> np.ndarray:
        if isinstance(p, L.Next):
            return self.matrix @ self.sat(p.arg).astype(float)
        if isinstance(p, L.Until):
            s1, s2 = self.sat(p.left), self.sat(p.right)
            if p.bound is None:
                return until_probabilities(self.matrix, s1, s2, self.method)
            return bounded_until(self.matrix, s1, s2, p.bound)
        if isinstance(p, L.Globally):
            return globally_probabilities(self.matrix, self.sat(p.arg))
        raise CheckError(f"not a path formula: {p!r}")


def check_chain(chain: InducedChain, formula, method="auto") -> CheckResult:
    f = _as_formula(formula)
    c = _ChainChecker(chain, method)
    if isinstance(f, (L.Prob, L.Reward)):
        values = c.values(f)
        sat = None if f.op is None else compare(values, f.op, f.bound)
        return CheckResult(str(f), values, sat, chain.initial)
    return CheckResult(str(f), None, c.sat(f), chain.initial)


# --- games ----------------------------------------------------------------------

class _GameView:
    """Row-level arrays of a game for vectorised Bellman backups."""

    def __init__(self, game: MarkovGame):
        self.game = game
        n, m = game.n_states, game.n_rows
        self.n = n
        self.row_state = np.repeat(np.arange(n), np.diff(game.row_start))
        counts = np.diff(game.entry_start)
        self.rows = sp.csr_matrix((np.asarray(game.prob, dtype=float), np.asarray(game.succ),
                                   np.asarray(game.entry_start)), shape=(m, n))
        self.counts = counts
        self.row_start = np.asarray(game.row_start)

    def reduce(self, q: np.ndarray, objective: str, allowed=None) -> np.ndarray:
        if allowed is not None:
            q = np.where(allowed, q, INF if objective == "min" else -INF)
        fn = np.minimum if objective == "min" else np.maximum
        return fn.reduceat(q, self.row_start[:-1])

    def row_all_in(self, mask: np.ndarray) -> np.ndarray:
        bad = self.rows @ (~mask).astype(float)
        return bad <= 0

    def row_some_in(self, mask: np.ndarray) -> np.ndarray:
        return self.rows @ mask.astype(float) > 0


def _fix(step, init):
    x = init
    while True:
        nxt = step(x)
        if np.array_equal(nxt, x):
            return x
        x = nxt


def game_prob0(v: _GameView, s1, s2, objective) -> np.ndarray:
    """States where the min (or max) probability of ``s1 U s2`` is zero."""
    live = s1 & ~s2

    def grow(r):
        some = v.row_some_in(r)
        if objective == "max":
            ok = np.logical_or.reduceat(some, v.row_start[:-1])
        else:
            ok = np.logical_and.reduceat(some, v.row_start[:-1])
        return r | (live & ok)

    return ~_fix(grow, s2.copy())


def game_prob1(v: _GameView, s1, s2, objective) -> np.ndarray:
    """States where the min (or max) probability of ``s1 U s2`` is one."""
    live = s1 & ~s2
    if objective == "min":
        # some policy avoids s2 with positive probability: backward closure of
        # the min-prob0 set under existential choice
        zero = game_prob0(v, s1, s2, "min")

        def grow(r):
            hit = v.row_some_in(r)
            return r | (live & np.logical_or.reduceat(hit, v.row_start[:-1]))

        return ~_fix(grow, zero)

    # max: nested fixed point
    u = np.ones(v.n, dtype=bool)
    while True:
        stay = v.row_all_in(u)

        def grow(r, stay=stay):
            hit = v.row_some_in(r) & stay
            return r | (live & np.logical_or.reduceat(hit, v.row_start[:-1]))

        nxt = _fix(grow, s2.copy())
        if np.array_equal(nxt, u):
            return u
        u = nxt


def _evaluate(v: _GameView, choice: np.ndarray, s1, s2, method) -> np.ndarray:
    """Exact until probabilities of a deterministic memoryless policy."""
    m = v.rows[choice]
    return until_probabilities(m, s1, s2, method)


def _greedy(v, x, objective, allowed=None, current=None):
    q = v.rows @ x
    best = v.reduce(q, objective, allowed)
    choice = np.empty(v.n, dtype=int)
    for s in range(v.n):
        lo, hi = v.row_start[s], v.row_start[s + 1]
        if current is not None:
            c = current[s]
            tol = 1e-12 * max(1.0, abs(best[s]))
            if abs(q[c] - best[s]) <= tol and (allowed is None or allowed[c]):
                choice[s] = c
                continue
        cand = [r for r in range(lo, hi) if (allowed is None or allowed[r])
                and (q[r] == best[s] or abs(q[r] - best[s]) <= 1e-12 * max(1.0, abs(best[s])))]
        choice[s] = cand[0] if cand else lo
    return choice, q


def _value_iteration(v, x0, fixed, objective, bonus=None, allowed=None, tol=VI_TOL, max_iter=1_000_000):
    x = x0.copy()
    for _ in range(max_iter):
        q = v.rows @ x
        if bonus is not None:
            q = q + bonus
        nxt = np.where(fixed, x0, v.reduce(q, objective, allowed))
        if np.max(np.abs(nxt - x), initial=0.0) < tol:
            return nxt
        x = nxt
    return x


def extremal_prob(game, path, objective: str, method="auto", return_policy=False):
    """Min or max probability of an until/eventually path formula, per state.

    Graph precomputation fixes the 0 and 1 states, value iteration gives a
    starting policy, and policy iteration with exact evaluation finishes.
    """
    game = getattr(game, "game", game)
    if objective not in ("min", "max"):
        raise CheckError("objective must be 'min' or 'max'")
    p = _as_formula(path, path=True)
    if isinstance(p, L.Prob):
        p = p.path
    if isinstance(p, L.Globally):
        # G phi holds exactly when F !phi fails; the opponent's objective flips
        dual = extremal_prob(game, L.eventually(L.Not(p.arg)), "max" if objective == "min" else "min",
                             method, return_policy)
        return (1.0 - dual[0], dual[1]) if return_policy else 1.0 - dual
    if not isinstance(p, L.Until) or p.bound is not None:
        raise CheckError("extremal_prob expects an unbounded until or eventually formula")
    v = _GameView(game)
    gc = _GameChecker(game, method)
    s1, s2 = gc.sat(p.left), gc.sat(p.right)
    zero = game_prob0(v, s1, s2, objective)
    one = game_prob1(v, s1, s2, objective)
    x0 = one.astype(float)
    fixed = zero | one
    x = _value_iteration(v, x0, fixed, objective)
    choice, _ = _greedy(v, x, objective)
    if objective == "max":
        # attractor choices at sure states so the evaluated policy really reaches s2
        choice = np.where(one & ~s2, _attractor(v, s2, one), choice)
    for _ in range(10_000):
        x = _evaluate(v, choice, s1, s2, method)
        nxt, q = _greedy(v, x, objective, current=choice)
        if np.array_equal(nxt, choice):
            break
        improve = q[nxt] - q[choice]
        if objective == "min":
            improve = -improve
        strict = improve > 1e-12 * np.maximum(1.0, np.abs(x))
        strict &= ~fixed
        if not strict.any():
            break
        choice = np.where(strict, nxt, choice)
    x = np.where(zero, 0.0, np.where(one, 1.0, x))
    return (x, choice) if return_policy else x


def _attractor(v: _GameView, target: np.ndarray, inside: np.ndarray) -> np.ndarray:
    """For states of ``inside``: a row staying in ``inside`` that moves closer to ``target``."""
    stay = v.row_all_in(inside)
    reached = target.copy()
    choice = np.array(v.row_start[:-1])
    while True:
        hit = v.row_some_in(reached) & stay
        new = False
        for s in np.flatnonzero(inside & ~reached):
            lo, hi = v.row_start[s], v.row_start[s + 1]
            rows = np.flatnonzero(hit[lo:hi])
            if len(rows):
                choice[s] = lo + rows[0]
                new = True
        if not new:
            return choice
        reached = reached | (inside & np.logical_or.reduceat(hit, v.row_start[:-1]))


def extremal_reward(game, target, objective: str, structure=None, method="auto"):
    """Min or max expected reward accumulated until ``target`` per state.

    Follows the usual convention: the maximum is infinite where some policy
    misses the target with positive probability, the minimum where no policy
    reaches it surely.  Rewards are expected to be non-negative.
    """
    game = getattr(game, "game", game)
    v = _GameView(game)
    gc = _GameChecker(game, method)
    t = gc.sat(_as_formula(target))
    r = gc.row_rewards(structure)
    every = np.ones(v.n, dtype=bool)
    if objective == "max":
        finite = game_prob1(v, every, t, "min")
        allowed = None
        choice = np.array(v.row_start[:-1])
    elif objective == "min":
        finite = game_prob1(v, every, t, "max")
        allowed = v.row_all_in(finite)
        choice = _attractor(v, t, finite)
    else:
        raise CheckError("objective must be 'min' or 'max'")
    rest = finite & ~t
    idx = np.flatnonzero(rest)
    x = np.where(finite, 0.0, INF)
    if not len(idx):
        return x
    def evaluate(ch):
        m = v.rows[ch[idx]][:, idx]
        out = np.where(finite, 0.0, INF)
        out[idx] = solve_linear(m, r[ch[idx]], method)
        return out

    for _ in range(10_000):
        x = evaluate(choice)
        q = v.rows @ np.where(finite, x, 0.0) + r
        nxt, _ = _greedy_q(v, q, objective, allowed, choice)
        improve = q[nxt] - q[choice]
        if objective == "min":
            improve = -improve
        strict = (improve > 1e-12 * np.maximum(1.0, np.abs(np.where(finite, x, 0.0)))) & rest
        if not strict.any():
            break
        choice = np.where(strict, nxt, choice)
    return x


def _greedy_q(v, q, objective, allowed, current):
    best = v.reduce(q, objective, allowed)
    choice = current.copy()
    for s in range(v.n):
        lo, hi = v.row_start[s], v.row_start[s + 1]
        for row in range(lo, hi):
            if allowed is not None and not allowed[row]:
                continue
            if q[row] == best[s]:
                choice[s] = row
                break
    return choice, best


class _GameChecker:
    def __init__(self, game: MarkovGame, method="auto"):
        self.game = game
        self.method = method
        self.n = game.n_states

    def atom(self, name):
        return np.fromiter((name in l for l in self.game.labels), dtype=bool, count=self.n)

    def row_rewards(self, structure=None) -> np.ndarray:
        g = self.game
        m = g.n_rows
        per_row = np.zeros((m, g.n_agents))
        rew = np.asarray(g.reward, dtype=float).reshape(len(g.prob), -1)
        w = np.asarray(g.prob, dtype=float)[:, None] * rew
        es = np.asarray(g.entry_start)
        nonempty = es[:-1] < es[1:]
        per_row[nonempty] = np.add.reduceat(w, es[:-1][nonempty], axis=0)
        if structure is None or structure == "team":
            return per_row[:, 0] if g.cooperative else per_row.sum(axis=1)
        return per_row[:, int(structure) - 1]

    def sat(self, f) -> np.ndarray:
        if isinstance(f, L.Const):
            return np.full(self.n, f.value)
        if isinstance(f, L.Atom):
            return self.atom(f.name)
        if isinstance(f, L.Not):
            return ~self.sat(f.arg)
        if isinstance(f, L.And):
            return self.sat(f.left) & self.sat(f.right)
        if isinstance(f, (L.Prob, L.Reward)):
            if f.op is None:
                raise CheckError(f"query {f} cannot be nested inside a formula")
            return compare(self.values(f), f.op, f.bound)
        raise CheckError(f"not a state formula: {f!r}")

    def _objective(self, f):
        if f.opt is not None:
            return f.opt
        if f.op is None:
            raise CheckError(f"{f} needs min or max on a game")
        return "min" if f.op in (">", ">=") else "max"

    def values(self, f) -> np.ndarray:
        obj = self._objective(f)
        if isinstance(f, L.Prob):
            p = f.path
            if isinstance(p, L.Globally):
                # P(G a) = 1 - P(F !a) with the dual objective
                dual = "max" if obj == "min" else "min"
                return 1.0 - extremal_prob(self.game, L.eventually(L.Not(p.arg)), dual, self.method)
            if isinstance(p, L.Until) and p.bound is None:
                return extremal_prob(self.game, p, obj, self.method)
            raise CheckError("only unbounded until, eventually and globally are supported on games")
        if isinstance(f, L.Reward) and isinstance(f.kind, L.Reach):
            return extremal_reward(self.game, f.kind.target, obj, f.structure, self.method)
        raise CheckError(f"unsupported game formula {f}")


def check_game(game, formula, method="auto") -> CheckResult:
    game = getattr(game, "game", game)
    f = _as_formula(formula)
    c = _GameChecker(game, method)
    if isinstance(f, (L.Prob, L.Reward)):
        values = c.values(f)
        sat = None if f.op is None else compare(values, f.op, f.bound)
        return CheckResult(str(f), values, sat, game.initial)
    return CheckResult(str(f), None, c.sat(f), game.initial)


def check(model, formula, method="auto") -> CheckResult:
    if isinstance(model, InducedChain):
        return check_chain(model, formula, method)
    return check_game(model, formula, method)
