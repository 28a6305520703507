"""Random model generators shared by the test modules."""
import itertools
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from amarl.game import InducedChain, MarkovGame

ATOMS = ("p", "q", "r")
LABEL_SETS = [frozenset(c) for k in range(4) for c in itertools.combinations(ATOMS, k)]


def random_stutter_game(seed, max_states=50, n_classes=None):
    """Two-agent game built from an abstract skeleton with deterministic intra-class moves.

    Each class gets a distinct label set and 1..6 members.  Members are linked
    by deterministic moves (a cycle when ``loop`` is drawn, a chain towards
    the exit members otherwise) and exit members take probabilistic joint
    actions whose class distributions come from the skeleton.  Some members
    randomly lose moves so the quotient is not always the label partition.
    """
    rng = np.random.default_rng(seed)
    k = int(n_classes or rng.integers(2, 6))
    labels = [LABEL_SETS[i] for i in rng.permutation(len(LABEL_SETS))[:k]]
    sizes = rng.integers(1, 7, size=k)
    while sizes.sum() > max_states:
        sizes[np.argmax(sizes)] -= 1
    members, ids, state_labels = [], [], []
    for c in range(k):
        members.append(list(range(len(ids), len(ids) + sizes[c])))
        ids += [f"c{c}m{m}" for m in range(sizes[c])]
        state_labels += [labels[c]] * int(sizes[c])
    joint = list(itertools.product(range(3), repeat=2))
    # class-level exit distributions
    exits = []
    for c in range(k):
        n_exit = int(rng.integers(1, 3))
        dists = []
        for _ in range(n_exit):
            targets = rng.choice(k, size=int(rng.integers(1, min(3, k) + 1)), replace=False)
            w = rng.integers(1, 5, size=len(targets)).astype(float)
            dists.append({int(t): float(x) for t, x in zip(targets, w / w.sum())})
        exits.append(dists)
    rows = []
    for c in range(k):
        mem = members[c]
        loop = rng.random() < 0.6
        for j, s in enumerate(mem):
            acts = iter(rng.permutation(len(joint)))
            out = []
            if len(mem) > 1:
                nxt = mem[(j + 1) % len(mem)]
                if loop or j + 1 < len(mem):
                    out.append({nxt: 1.0})
                if rng.random() < 0.3:
                    out.append({mem[int(rng.integers(len(mem)))]: 1.0})
            is_exit = j == len(mem) - 1 or rng.random() < 0.3
            if is_exit:
                for d in exits[c]:
                    dist = {}
                    for t, p in d.items():
                        tgt = members[t][int(rng.integers(len(members[t])))]
                        if t == c:
                            tgt = s if rng.random() < 0.5 else tgt
                        dist[tgt] = dist.get(tgt, 0.0) + p
                    out.append(dist)
            if not out:
                out.append({s: 1.0})
            for dist in out:
                a = joint[next(acts)]
                rows.append((s, a, dist, None, None))
    return MarkovGame.from_rows(2, ids, [["idle", "a", "b"]] * 2, rows, state_labels,
                                agent_atoms=[frozenset(), frozenset()],
                                global_atoms=frozenset(ATOMS), initial=0)


def random_chain(seed, n, acyclic=False, density=0.3, absorbing=0.2):
    """Random chain with labels p/q/r and integer rewards; acyclic chains end in sinks."""
    rng = np.random.default_rng(seed)
    m = np.zeros((n, n))
    for s in range(n):
        cand = np.arange(s + 1, n) if acyclic else np.arange(n)
        if len(cand) == 0 or rng.random() < absorbing:
            m[s, s] = 1.0
            continue
        mask = rng.random(len(cand)) < density
        if not mask.any():
            mask[int(rng.integers(len(cand)))] = True
        idx = cand[mask][:8]
        # dyadic weights keep enumeration sums exact
        counts = 1 + rng.multinomial(8 - len(idx), np.full(len(idx), 1.0 / len(idx)))
        m[s, idx] = counts / 8.0
    labels = [frozenset(a for a in ATOMS if rng.random() < 0.35) for _ in range(n)]
    rewards = rng.integers(0, 4, size=n).astype(float)
    return InducedChain.from_matrix(sp.csr_matrix(m), labels, rewards)


# --- exact path-enumeration oracle for small acyclic chains -------------------

def enumerate_paths(m, s, depth):
    """All (probability, states) paths of exactly ``depth`` steps, with Fractions."""
    out = [(Fraction(1), [s])]
    for _ in range(depth):
        nxt = []
        for p, path in out:
            row = m[path[-1]]
            for t in np.nonzero(row)[0]:
                nxt.append((p * Fraction(row[t]).limit_denominator(1 << 20), path + [int(t)]))
        out = nxt
    return out


def path_until(path, s1, s2, k=None):
    for i, s in enumerate(path):
        if k is not None and i > k:
            return False
        if s2[s]:
            return True
        if not s1[s]:
            return False
    return False


def path_reach_reward(path, target, r):
    total = Fraction(0)
    for s in path:
        if target[s]:
            return total, True
        total += Fraction(r[s])
    return total, False
