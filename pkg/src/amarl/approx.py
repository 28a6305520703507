"""Small fully connected Q-value approximator with replay and a target network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DivergenceError(FloatingPointError):
    def __init__(self, loss, step):
        super().__init__(f"loss became {loss} at update {step}")
        self.loss, self.step = loss, step


@dataclass
class ApproxConfig:
    sizes: tuple = (8, 32, 5)       # input, hidden..., actions
    lr: float = 1e-4
    gamma: float = 0.95
    batch_size: int = 64
    buffer_size: int = 1_000_000
    target_every: int = 1_000
    seed: int = 0


class MLP:
    """tanh hidden layers, linear output; parameters live in one flat vector."""

    def __init__(self, sizes, rng=None, params=None):
        self.sizes = tuple(int(s) for s in sizes)
        self.shapes = [(a, b) for a, b in zip(self.sizes[:-1], self.sizes[1:])]
        n = sum(a * b + b for a, b in self.shapes)
        if params is None:
            rng = rng or np.random.default_rng(0)
            parts = []
            for a, b in self.shapes:
                parts += [rng.normal(0, 1 / np.sqrt(a), a * b), np.zeros(b)]
            params = np.concatenate(parts)
        self.params = np.asarray(params, dtype=float).copy()
        if self.params.size != n:
            raise ValueError(f"expected {n} parameters, got {self.params.size}")

    def layers(self, params=None):
        p = self.params if params is None else params
        out, k = [], 0
        for a, b in self.shapes:
            w = p[k:k + a * b].reshape(a, b)
            k += a * b
            out.append((w, p[k:k + b]))
            k += b
        return out

    def forward(self, x, params=None):
        h = np.atleast_2d(np.asarray(x, dtype=float))
        acts = [h]
        layers = self.layers(params)
        for j, (w, b) in enumerate(layers):
            h = h @ w + b
            if j < len(layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def copy(self) -> "MLP":
        return MLP(self.sizes, params=self.params)

    def loss_and_grad(self, x, actions, targets, params=None):
        """Mean squared TD error of Q(x, a) against fixed targets and its gradient."""
        q, acts = self.forward(x, params)
        m = len(q)
        idx = np.arange(m)
        err = q[idx, actions] - targets
        loss = float(np.mean(err ** 2))
        delta = np.zeros_like(q)
        delta[idx, actions] = 2 * err / m
        grads = []
        layers = self.layers(params)
        for j in range(len(layers) - 1, -1, -1):
            w, _ = layers[j]
            grads.append((acts[j].T @ delta, delta.sum(axis=0)))
            if j > 0:
                delta = (delta @ w.T) * (1 - acts[j] ** 2)
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in reversed(grads)])
        return loss, flat


def numeric_grad(f, params, h=1e-5):
    g = np.zeros_like(params)
    for k in range(params.size):
        p = params.copy()
        p[k] += h
        up = f(p)
        p[k] -= 2 * h
        g[k] = (up - f(p)) / (2 * h)
    return g


def relative_error(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300))


def gradient_check(net: MLP, x, actions, targets, h=1e-5) -> float:
    _, g = net.loss_and_grad(x, actions, targets)
    num = numeric_grad(lambda p: net.loss_and_grad(x, actions, targets, p)[0], net.params, h)
    return relative_error(g, num)


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, seed: int = 0):
        self.capacity = int(capacity)
        self.s = np.zeros((min(self.capacity, 1024), obs_dim))
        self.a = np.zeros(len(self.s), dtype=np.int64)
        self.r = np.zeros(len(self.s))
        self.s2 = np.zeros_like(self.s)
        self.done = np.zeros(len(self.s), dtype=bool)
        self.size = 0
        self.pos = 0
        self.rng = np.random.default_rng(seed)

    def _grow(self):
        n = min(self.capacity, 2 * len(self.s))
        for name in ("s", "a", "r", "s2", "done"):
            old = getattr(self, name)
            new = np.zeros((n,) + old.shape[1:], dtype=old.dtype)
            new[:len(old)] = old
            setattr(self, name, new)

    def add(self, s, a, r, s2, done):
        if self.size == len(self.s) < self.capacity:
            self._grow()
        k = self.pos
        self.s[k], self.a[k], self.r[k], self.s2[k], self.done[k] = s, a, r, s2, done
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, m: int):
        idx = self.rng.integers(self.size, size=m)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]


class ApproxLearner:
    """One agent's Q-network trained on double-estimator TD targets."""

    def __init__(self, config: ApproxConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.online = MLP(config.sizes, rng)
        self.target = self.online.copy()
        self.buffer = ReplayBuffer(config.buffer_size, config.sizes[0], config.seed)
        self.updates = 0

    def sync(self):
        self.target.params[:] = self.online.params

    def targets(self, r, s2, done):
        best = np.argmax(self.online(s2), axis=1)
        nxt = self.target(s2)[np.arange(len(best)), best]
        return r + self.config.gamma * np.where(done, 0.0, nxt)

    def update(self):
        c = self.config
        if self.buffer.size < c.batch_size:
            return None
        s, a, r, s2, done = self.buffer.sample(c.batch_size)
        with np.errstate(invalid="ignore", over="ignore"):   # checked just below
            loss, g = self.online.loss_and_grad(s, a, self.targets(r, s2, done))
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise DivergenceError(loss, self.updates)
        self.online.params -= c.lr * g
        self.updates += 1
        if self.updates % c.target_every == 0:
            self.sync()
        return loss
